//! Slice-level compute kernels. Everything here is NCHW and single-threaded;
//! results are bitwise reproducible for a given input.

/// Column width of the pixel blocks large convolutions are split into.
pub(crate) const PIXEL_BLOCK: usize = 2048;

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * rsc..i * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable buffer of `len` values with unspecified contents;
/// `f` must overwrite whatever it reads.
pub(crate) fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.borrow_mut().pop()).unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    let r = f(&mut buf[..len]);
    SCRATCH.with(|s| s.borrow_mut().push(buf));
    r
}

/// `y += a·x`.
#[inline(always)]
fn axpy_body(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums (fixed order, so results
/// are reproducible while still vectorizing).
#[inline(always)]
fn dot_body(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for i in 0..8 {
            acc[i] += a[i] * b[i];
        }
    }
    let mut tail = 0.0;
    for (a, b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_avx2(a: f64, x: &[f64], y: &mut [f64]) {
    axpy_body(a, x, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(x: &[f64], y: &[f64]) -> f64 {
    dot_body(x, y)
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { axpy_avx2(a, x, y) };
    }
    axpy_body(a, x, y)
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { dot_avx2(x, y) };
    }
    dot_body(x, y)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self { cin, h, w, k, stride, pad, ho, wo })
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        // largest ox with ox*stride + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx { ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Unfolds one image `(cin, h, w)` into `(cin·k·k, ho·wo)` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (x0, x1) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..x0].fill(0.0);
                    d[x1..].fill(0.0);
                    if g.stride == 1 {
                        let off = x0 + kx - g.pad;
                        d[x0..x1].copy_from_slice(&src[off..off + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (x0, x1) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let d = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let off = x0 + kx - g.pad;
                        for (dv, sv) in d[off..off + (x1 - x0)].iter_mut().zip(&s[x0..x1]) {
                            *dv += sv;
                        }
                    } else {
                        for ox in x0..x1 {
                            d[ox * g.stride + kx - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copies a `(h, w)` plane into the interior of a `(h+2p, w+2p)` plane whose
/// border is already zero.
fn pad_plane(src: &[f64], h: usize, w: usize, p: usize, dst: &mut [f64]) {
    let wp = w + 2 * p;
    for y in 0..h {
        dst[(y + p) * wp + p..(y + p) * wp + p + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// Depth-wise `k×k` convolution with "same" zero padding on one `(c, h, w)` image.
///
/// Works on a padded copy of each plane with outputs laid out at the padded
/// row pitch, so every tap is a single contiguous multiply-add.
pub(crate) fn depthwise_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    (c, h, wd, k): (usize, usize, usize, usize),
    out: &mut [f64],
) {
    let p = k / 2;
    let wp = wd + 2 * p;
    let mut padded = vec![0.0; (h + 2 * p) * wp];
    for ch in 0..c {
        pad_plane(&x[ch * h * wd..(ch + 1) * h * wd], h, wd, p, &mut padded);
        let wc = &w[ch * k * k..(ch + 1) * k * k];
        // row by row so the k input rows stay in cache on large planes
        for (y, row) in out[ch * h * wd..(ch + 1) * h * wd].chunks_exact_mut(wd).enumerate() {
            row.fill(bias.map_or(0.0, |b| b[ch]));
            for ky in 0..k {
                let src = &padded[(y + ky) * wp..(y + ky + 1) * wp];
                for kx in 0..k {
                    axpy(wc[ky * k + kx], &src[kx..kx + wd], row);
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`] for one image; `dx`, `dw` are accumulated into.
pub(crate) fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    (c, h, wd, k): (usize, usize, usize, usize),
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let p = k / 2;
    let wp = wd + 2 * p;
    let mut padded = vec![0.0; (h + 2 * p) * wp];
    let mut dpadded = vec![0.0; (h + 2 * p) * wp];
    for ch in 0..c {
        let gc = &g[ch * h * wd..(ch + 1) * h * wd];
        if let Some(dw) = dw.as_deref_mut() {
            pad_plane(&x[ch * h * wd..(ch + 1) * h * wd], h, wd, p, &mut padded);
            let dwc = &mut dw[ch * k * k..(ch + 1) * k * k];
            for (y, grow) in gc.chunks_exact(wd).enumerate() {
                for ky in 0..k {
                    let src = &padded[(y + ky) * wp..(y + ky + 1) * wp];
                    for kx in 0..k {
                        dwc[ky * k + kx] += dot(grow, &src[kx..kx + wd]);
                    }
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dpadded.fill(0.0);
            let wc = &w[ch * k * k..(ch + 1) * k * k];
            for (y, grow) in gc.chunks_exact(wd).enumerate() {
                for ky in 0..k {
                    let dst = &mut dpadded[(y + ky) * wp..(y + ky + 1) * wp];
                    for kx in 0..k {
                        axpy(wc[ky * k + kx], grow, &mut dst[kx..kx + wd]);
                    }
                }
            }
            let dxc = &mut dx[ch * h * wd..(ch + 1) * h * wd];
            for y in 0..h {
                for (d, s) in
                    dxc[y * wd..(y + 1) * wd].iter_mut().zip(&dpadded[(y + p) * wp + p..(y + p) * wp + p + wd])
                {
                    *d += s;
                }
            }
        }
    }
}

/// Normalizes contiguous groups of `len` elements; returns per-group `1/σ`.
pub(crate) fn normalize_groups(x: &[f64], len: usize, eps: f64, xhat: &mut [f64]) -> Vec<f64> {
    let mut inv = Vec::with_capacity(x.len() / len);
    for (src, dst) in x.chunks_exact(len).zip(xhat.chunks_exact_mut(len)) {
        let mean = src.iter().sum::<f64>() / len as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
    }
    inv
}

/// Backward through `xhat = (x - mean)/σ` over contiguous groups given `d xhat`.
pub(crate) fn normalize_groups_backward(xhat: &[f64], inv: &[f64], len: usize, dxhat: &[f64], dx: &mut [f64]) {
    for (gi, ((xh, dxh), d)) in
        xhat.chunks_exact(len).zip(dxhat.chunks_exact(len)).zip(dx.chunks_exact_mut(len)).enumerate()
    {
        let m1 = dxh.iter().sum::<f64>() / len as f64;
        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / len as f64;
        for ((dv, a), b) in d.iter_mut().zip(dxh).zip(xh) {
            *dv = inv[gi] * (a - m1 - b * m2);
        }
    }
}

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_rows(x: &[f64], n: usize, out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
