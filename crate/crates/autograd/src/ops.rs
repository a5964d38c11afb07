use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{strides, Tensor};
use crate::var::Var;
use crate::{Error, Result};

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

/// Iterates the index space of `shape` and calls `f(linear_out, offset)` where
/// `offset` is computed from `src_strides` (one stride per output dim).
fn walk_strided(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut lin = 0usize;
    loop {
        let mut o = off;
        for _ in 0..inner {
            f(lin, o);
            lin += 1;
            o += inner_stride;
        }
        // carry into the outer dims
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Gelu,
    Silu,
    Exp,
    Abs,
    Square,
    Tanh,
}

impl Unary {
    fn f(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Gelu => kernels::gelu(x),
            Unary::Silu => x * kernels::sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Tanh => x.tanh(),
        }
    }

    fn df(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Silu => {
                let s = kernels::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Tanh => 1.0 - y * y,
        }
    }
}

impl Var {
    fn unary(&self, op: Unary) -> Var {
        let x = self.value_rc();
        let y = Rc::new(x.map(|v| op.f(v)));
        let (xs, ys) = (x.clone(), y.clone());
        Var::from_op(
            &[self],
            y.clone(),
            Box::new(move |g, _| {
                let d = g.data().iter().zip(xs.data()).zip(ys.data());
                let data = d.map(|((g, &x), &y)| g * op.df(x, y)).collect();
                vec![Some(Tensor::new(g.shape().to_vec(), data).unwrap())]
            }),
        )
        .expect("single-input op")
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Unary::Sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var {
        self.unary(Unary::Gelu)
    }

    pub fn silu(&self) -> Var {
        self.unary(Unary::Silu)
    }

    pub fn exp(&self) -> Var {
        self.unary(Unary::Exp)
    }

    pub fn abs(&self) -> Var {
        self.unary(Unary::Abs)
    }

    pub fn square(&self) -> Var {
        self.unary(Unary::Square)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Unary::Tanh)
    }

    /// `a·x + b` elementwise.
    pub fn affine(&self, a: f64, b: f64) -> Var {
        let y = self.value().map(|v| a * v + b);
        Var::from_op(&[self], y, Box::new(move |g, _| vec![Some(g.map(|v| a * v))])).expect("single-input op")
    }

    pub fn scale(&self, a: f64) -> Var {
        self.affine(a, 0.0)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let x = self.value_rc();
        let y = x.map(|v| v.clamp(lo, hi));
        Var::from_op(
            &[self],
            y,
            Box::new(move |g, _| {
                let mask = x.map(|v| if (lo..=hi).contains(&v) { 1.0 } else { 0.0 });
                vec![Some(g.zip_map(&mask, |a, b| a * b).unwrap())]
            }),
        )
        .expect("single-input op")
    }

    fn binary(&self, o: &Var, f: fn(f64, f64) -> f64, kind: u8) -> Result<Var> {
        let (a, b) = (self.value_rc(), o.value_rc());
        let y = a.zip_map(&b, f)?;
        Var::from_op(
            &[self, o],
            y,
            Box::new(move |g, needs| match kind {
                0 => vec![Some(g.clone()), Some(g.clone())],
                1 => vec![Some(g.clone()), Some(g.map(|v| -v))],
                _ => vec![
                    needs[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                    needs[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
                ],
            }),
        )
    }

    pub fn add(&self, o: &Var) -> Result<Var> {
        self.binary(o, |a, b| a + b, 0)
    }

    pub fn sub(&self, o: &Var) -> Result<Var> {
        self.binary(o, |a, b| a - b, 1)
    }

    pub fn mul(&self, o: &Var) -> Result<Var> {
        self.binary(o, |a, b| a * b, 2)
    }

    /// Broadcasts `o` to this var's shape, then adds.
    pub fn add_bcast(&self, o: &Var) -> Result<Var> {
        self.add(&o.broadcast_to(self.shape())?)
    }

    /// Broadcasts `o` to this var's shape, then multiplies.
    pub fn mul_bcast(&self, o: &Var) -> Result<Var> {
        self.mul(&o.broadcast_to(self.shape())?)
    }

    /// Numpy-style broadcast (right-aligned, size-1 dims repeat).
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Var> {
        let src = self.shape().to_vec();
        if src == target {
            return Ok(self.clone());
        }
        if src.len() > target.len() {
            return shape_err(format!("cannot broadcast {src:?} to {target:?}"));
        }
        let lead = target.len() - src.len();
        let sst = strides(&src);
        let mut bst = vec![0usize; target.len()];
        for (k, (&d, &s)) in src.iter().zip(&sst).enumerate() {
            let t = target[lead + k];
            if d == t {
                bst[lead + k] = s;
            } else if d != 1 {
                return shape_err(format!("cannot broadcast {src:?} to {target:?}"));
            }
        }
        let x = self.value_rc();
        let mut out = vec![0.0; target.iter().product()];
        walk_strided(target, &bst, |i, o| out[i] = x.data()[o]);
        let tshape = target.to_vec();
        Var::from_op(
            &[self],
            Tensor::new(tshape.clone(), out)?,
            Box::new(move |g, _| {
                let mut dx = vec![0.0; src.iter().product()];
                walk_strided(&tshape, &bst, |i, o| dx[o] += g.data()[i]);
                vec![Some(Tensor::new(src.clone(), dx).unwrap())]
            }),
        )
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        Var::from_op(
            &[self],
            Tensor::scalar(self.value().sum()),
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
        .expect("single-input op")
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let old = self.shape().to_vec();
        let y = (*self.value_rc()).clone().reshape(shape.to_vec())?;
        Var::from_op(&[self], y, Box::new(move |g, _| vec![Some(g.clone().reshape(old.clone()).unwrap())]))
    }

    /// Reorders axes: output dim `i` is input dim `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return shape_err(format!("bad permutation {axes:?} for {shape:?}"));
        }
        let y = permute_tensor(self.value(), axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Var::from_op(&[self], y, Box::new(move |g, _| vec![Some(permute_tensor(g, &inv))]))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) on {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        Var::from_op(
            &[self],
            Tensor::new(oshape, out)?,
            Box::new(move |g, _| {
                let mut dx = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(&self, parts: usize, axis: usize) -> Result<Vec<Var>> {
        let n = *self.shape().get(axis).ok_or_else(|| Error::Shape("chunk axis".into()))?;
        if parts == 0 || n % parts != 0 {
            return shape_err(format!("cannot split {n} into {parts} chunks"));
        }
        let len = n / parts;
        (0..parts).map(|i| self.narrow(axis, i * len, len)).collect()
    }

    /// Batched matrix product of `op(self)` and `op(o)`, where `op` transposes
    /// the last two axes when the matching flag is set. Rank 2 or 3.
    pub fn matmul_t(&self, o: &Var, ta: bool, tb: bool) -> Result<Var> {
        let (a, b) = (self.value_rc(), o.value_rc());
        let dims = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [r, c] => Ok((1, r, c)),
                [bb, r, c] => Ok((bb, r, c)),
                _ => shape_err(format!("matmul needs rank 2/3, got {s:?}")),
            }
        };
        let (ba, ra, ca) = dims(a.shape())?;
        let (bb, rb, cb) = dims(b.shape())?;
        if a.rank() != b.rank() || ba != bb {
            return shape_err(format!("matmul batch mismatch {:?} {:?}", a.shape(), b.shape()));
        }
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return shape_err(format!("matmul inner mismatch {:?} {:?}", a.shape(), b.shape()));
        }
        let sa = if ta { (1, ca) } else { (ca, 1) };
        let sb = if tb { (1, cb) } else { (cb, 1) };
        let (la, lb, lc) = (ra * ca, rb * cb, m * n);
        let mut out = vec![0.0; ba * lc];
        for i in 0..ba {
            kernels::gemm(m, k, n, &a.data()[i * la..], sa, &b.data()[i * lb..], sb, 0.0, &mut out[i * lc..], n);
        }
        let oshape = if a.rank() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let (ashape, bshape) = (a.shape().to_vec(), b.shape().to_vec());
        Var::from_op(
            &[self, o],
            Tensor::new(oshape, out)?,
            Box::new(move |g, needs| {
                let gd = g.data();
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; ba * la];
                    for i in 0..ba {
                        let (gi, bi) = (&gd[i * lc..], &b.data()[i * lb..]);
                        if !ta {
                            kernels::gemm(m, n, k, gi, (n, 1), bi, (sb.1, sb.0), 0.0, &mut da[i * la..], k);
                        } else {
                            kernels::gemm(k, n, m, bi, sb, gi, (1, n), 0.0, &mut da[i * la..], m);
                        }
                    }
                    Tensor::new(ashape.clone(), da).unwrap()
                });
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; ba * lb];
                    for i in 0..ba {
                        let (gi, ai) = (&gd[i * lc..], &a.data()[i * la..]);
                        if !tb {
                            kernels::gemm(k, m, n, ai, (sa.1, sa.0), gi, (n, 1), 0.0, &mut db[i * lb..], n);
                        } else {
                            kernels::gemm(n, m, k, gi, (1, n), ai, sa, 0.0, &mut db[i * lb..], k);
                        }
                    }
                    Tensor::new(bshape.clone(), db).unwrap()
                });
                vec![da, db]
            }),
        )
    }

    pub fn matmul(&self, o: &Var) -> Result<Var> {
        self.matmul_t(o, false, false)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let n = *self.shape().last().unwrap_or(&1);
        let mut y = vec![0.0; self.value().numel()];
        kernels::softmax_rows(self.value().data(), n, &mut y);
        let y = Rc::new(Tensor::new(self.shape().to_vec(), y).unwrap());
        let ys = y.clone();
        Var::from_op(
            &[self],
            y.clone(),
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.numel()];
                for ((gr, yr), dr) in
                    g.data().chunks_exact(n).zip(ys.data().chunks_exact(n)).zip(dx.chunks_exact_mut(n))
                {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - s);
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx).unwrap())]
            }),
        )
        .expect("single-input op")
    }

    /// Scales each row of the last axis to unit L2 norm: `x / max(‖x‖, eps)`.
    pub fn l2_normalize_last(&self, eps: f64) -> Var {
        let n = *self.shape().last().unwrap_or(&1);
        let x = self.value();
        let norms: Vec<f64> = x.data().chunks_exact(n).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut y = vec![0.0; x.numel()];
        for ((yr, xr), &nr) in y.chunks_exact_mut(n).zip(x.data().chunks_exact(n)).zip(&norms) {
            let d = nr.max(eps);
            for (a, b) in yr.iter_mut().zip(xr) {
                *a = b / d;
            }
        }
        let y = Rc::new(Tensor::new(self.shape().to_vec(), y).unwrap());
        let ys = y.clone();
        Var::from_op(
            &[self],
            y.clone(),
            Box::new(move |g, _| {
                let mut dx = vec![0.0; g.numel()];
                for (((gr, yr), dr), &nr) in
                    g.data().chunks_exact(n).zip(ys.data().chunks_exact(n)).zip(dx.chunks_exact_mut(n)).zip(&norms)
                {
                    if nr > eps {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * s) / nr;
                        }
                    } else {
                        for (d, gv) in dr.iter_mut().zip(gr) {
                            *d = gv / eps;
                        }
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), dx).unwrap())]
            }),
        )
        .expect("single-input op")
    }

    /// Dense 2-D convolution. `self`: `(n, cin, h, w)`, `weight`: `(cout, cin, k, k)`.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value().dims4()?;
        let (cout, wcin, k, k2) = weight.value().dims4()?;
        if wcin != cin || k != k2 {
            return shape_err(format!("conv2d input {:?} vs kernel {:?}", self.shape(), weight.shape()));
        }
        check_bias(bias, cout)?;
        let geom = ConvGeom::new(cin, h, w, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("conv2d kernel {k} too large for {h}x{w}")))?;
        let (x, wt) = (self.value_rc(), weight.value_rc());
        let plane = geom.ho * geom.wo;
        let ckk = cin * k * k;
        let mut out = vec![0.0; n * cout * plane];
        let cols_len = if geom.is_pointwise() { 0 } else { ckk * plane };
        kernels::with_scratch(cols_len, |cols| {
            for i in 0..n {
                let xi = &x.data()[i * cin * h * w..(i + 1) * cin * h * w];
                let src = if geom.is_pointwise() {
                    xi
                } else {
                    kernels::im2col(xi, &geom, cols);
                    &cols[..]
                };
                let oi = &mut out[i * cout * plane..(i + 1) * cout * plane];
                // pixel blocks keep the packed inputs and outputs cache-resident
                for j in (0..plane).step_by(kernels::PIXEL_BLOCK) {
                    let nb = kernels::PIXEL_BLOCK.min(plane - j);
                    kernels::gemm(cout, ckk, nb, wt.data(), (ckk, 1), &src[j..], (plane, 1), 0.0, &mut oi[j..], plane);
                }
                if let Some(b) = bias {
                    for (c, row) in oi.chunks_exact_mut(plane).enumerate() {
                        let bv = b.value().data()[c];
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        });
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Var::from_op(
            &inputs,
            Tensor::new(vec![n, cout, geom.ho, geom.wo], out)?,
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; n * cin * h * w]);
                let mut dw = needs[1].then(|| vec![0.0; cout * ckk]);
                let cols_len = if geom.is_pointwise() { 0 } else { ckk * plane };
                kernels::with_scratch(cols_len, |cols| {
                    for i in 0..n {
                        let gi = &g.data()[i * cout * plane..(i + 1) * cout * plane];
                        let xi = &x.data()[i * cin * h * w..(i + 1) * cin * h * w];
                        if let Some(dw) = dw.as_mut() {
                            let src = if geom.is_pointwise() {
                                xi
                            } else {
                                kernels::im2col(xi, &geom, cols);
                                &cols[..]
                            };
                            kernels::gemm(cout, plane, ckk, gi, (plane, 1), src, (1, plane), 1.0, dw, ckk);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dxi = &mut dx[i * cin * h * w..(i + 1) * cin * h * w];
                            if geom.is_pointwise() {
                                kernels::gemm(ckk, cout, plane, wt.data(), (1, ckk), gi, (plane, 1), 0.0, dxi, plane);
                            } else {
                                // reuse the column buffer for the column gradient
                                kernels::gemm(ckk, cout, plane, wt.data(), (1, ckk), gi, (plane, 1), 0.0, cols, plane);
                                kernels::col2im(cols, &geom, dxi);
                            }
                        }
                    }
                });
                let mut res = vec![
                    dx.map(|d| Tensor::new(vec![n, cin, h, w], d).unwrap()),
                    dw.map(|d| Tensor::new(vec![cout, cin, k, k], d).unwrap()),
                ];
                if has_bias {
                    res.push(needs[2].then(|| channel_sums(g, n, cout, plane)));
                }
                res
            }),
        )
    }

    /// Depth-wise convolution with "same" padding. `weight`: `(c, 1, k, k)`, `k` odd.
    pub fn depthwise_conv2d(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        let (wc, one, k, k2) = weight.value().dims4()?;
        if wc != c || one != 1 || k != k2 || k % 2 == 0 {
            return shape_err(format!("depthwise input {:?} vs kernel {:?}", self.shape(), weight.shape()));
        }
        check_bias(bias, c)?;
        let (x, wt) = (self.value_rc(), weight.value_rc());
        let img = c * h * w;
        let mut out = vec![0.0; n * img];
        let bvals = bias.map(|b| b.value().data().to_vec());
        for i in 0..n {
            kernels::depthwise_forward(
                &x.data()[i * img..(i + 1) * img],
                wt.data(),
                bvals.as_deref(),
                (c, h, w, k),
                &mut out[i * img..(i + 1) * img],
            );
        }
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Var::from_op(
            &inputs,
            Tensor::new(vec![n, c, h, w], out)?,
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; n * img]);
                let mut dw = needs[1].then(|| vec![0.0; c * k * k]);
                for i in 0..n {
                    kernels::depthwise_backward(
                        &x.data()[i * img..(i + 1) * img],
                        wt.data(),
                        &g.data()[i * img..(i + 1) * img],
                        (c, h, w, k),
                        dx.as_mut().map(|d| &mut d[i * img..(i + 1) * img]),
                        dw.as_deref_mut(),
                    );
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(vec![n, c, h, w], d).unwrap()),
                    dw.map(|d| Tensor::new(vec![c, 1, k, k], d).unwrap()),
                ];
                if has_bias {
                    res.push(needs[2].then(|| channel_sums(g, n, c, h * w)));
                }
                res
            }),
        )
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
    /// `weight`: `(cin, cout, 2, 2)`.
    pub fn conv_transpose2x2(&self, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let (n, cin, h, w) = self.value().dims4()?;
        let (wcin, cout, k1, k2) = weight.value().dims4()?;
        if wcin != cin || k1 != 2 || k2 != 2 {
            return shape_err(format!("conv_transpose2x2 input {:?} vs kernel {:?}", self.shape(), weight.shape()));
        }
        check_bias(bias, cout)?;
        let (x, wt) = (self.value_rc(), weight.value_rc());
        let (p, c4) = (h * w, cout * 4);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * cout * oh * ow];
        let mut tmp = vec![0.0; c4 * p];
        for i in 0..n {
            kernels::gemm(c4, cin, p, wt.data(), (1, c4), &x.data()[i * cin * p..], (p, 1), 0.0, &mut tmp, p);
            let oi = &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow];
            for o in 0..cout {
                let bv = bias.map_or(0.0, |b| b.value().data()[o]);
                for a in 0..2 {
                    for b in 0..2 {
                        let row = &tmp[(o * 4 + a * 2 + b) * p..(o * 4 + a * 2 + b + 1) * p];
                        for y in 0..h {
                            let dst = &mut oi[o * oh * ow + (2 * y + a) * ow..];
                            for xx in 0..w {
                                dst[2 * xx + b] = row[y * w + xx] + bv;
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Var::from_op(
            &inputs,
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Box::new(move |g, needs| {
                let mut dx = needs[0].then(|| vec![0.0; n * cin * p]);
                let mut dw = needs[1].then(|| vec![0.0; cin * c4]);
                let mut gt = vec![0.0; c4 * p];
                for i in 0..n {
                    let gi = &g.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                    for o in 0..cout {
                        for a in 0..2 {
                            for b in 0..2 {
                                let row = &mut gt[(o * 4 + a * 2 + b) * p..(o * 4 + a * 2 + b + 1) * p];
                                for y in 0..h {
                                    let src = &gi[o * oh * ow + (2 * y + a) * ow..];
                                    for xx in 0..w {
                                        row[y * w + xx] = src[2 * xx + b];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm(cin, c4, p, wt.data(), (c4, 1), &gt, (p, 1), 0.0, &mut dx[i * cin * p..], p);
                    }
                    if let Some(dw) = dw.as_mut() {
                        kernels::gemm(cin, p, c4, &x.data()[i * cin * p..], (p, 1), &gt, (1, p), 1.0, dw, c4);
                    }
                }
                let mut res = vec![
                    dx.map(|d| Tensor::new(vec![n, cin, h, w], d).unwrap()),
                    dw.map(|d| Tensor::new(vec![cin, cout, 2, 2], d).unwrap()),
                ];
                if has_bias {
                    res.push(needs[2].then(|| channel_sums(g, n, cout, oh * ow)));
                }
                res
            }),
        )
    }

    /// Nearest-neighbour 2× upsampling of `(n, c, h, w)`.
    pub fn upsample_nearest2x(&self) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        let x = self.value();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Var::from_op(
            &[self],
            Tensor::new(vec![n, c, oh, ow], out)?,
            Box::new(move |g, _| {
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let src = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(vec![n, c, h, w], dx).unwrap())]
            }),
        )
    }

    /// Group normalization of `(n, c, h, w)` with per-channel gain and bias.
    pub fn group_norm(&self, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{c} channels not divisible into {groups} groups"));
        }
        check_bias(Some(gamma), c)?;
        check_bias(Some(beta), c)?;
        let len = (c / groups) * h * w;
        let mut xhat = vec![0.0; n * c * h * w];
        let inv = kernels::normalize_groups(self.value().data(), len, eps, &mut xhat);
        let (gm, bt) = (gamma.value_rc(), beta.value_rc());
        let p = h * w;
        let mut out = xhat.clone();
        for (j, row) in out.chunks_exact_mut(p).enumerate() {
            let ch = j % c;
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            row.iter_mut().for_each(|v| *v = *v * gv + bv);
        }
        Var::from_op(
            &[self, gamma, beta],
            Tensor::new(vec![n, c, h, w], out)?,
            Box::new(move |g, needs| {
                let mut dxhat = g.data().to_vec();
                let mut dgamma = vec![0.0; c];
                for (j, (row, xr)) in dxhat.chunks_exact_mut(p).zip(xhat.chunks_exact(p)).enumerate() {
                    let ch = j % c;
                    dgamma[ch] += row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    let gv = gm.data()[ch];
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * c * p];
                    kernels::normalize_groups_backward(&xhat, &inv, len, &dxhat, &mut dx);
                    Tensor::new(vec![n, c, h, w], dx).unwrap()
                });
                vec![dx, Some(Tensor::new(vec![c], dgamma).unwrap()), Some(channel_sums(g, n, c, p))]
            }),
        )
    }

    /// Layer normalization across channels at every pixel of `(n, c, h, w)`.
    pub fn channel_layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value().dims4()?;
        check_bias(Some(gamma), c)?;
        check_bias(Some(beta), c)?;
        let p = h * w;
        let x = self.value();
        let mut xhat = vec![0.0; n * c * p];
        let mut inv = vec![0.0; n * p];
        let mut mean = vec![0.0; p];
        let mut var = vec![0.0; p];
        for i in 0..n {
            let xi = &x.data()[i * c * p..(i + 1) * c * p];
            mean.fill(0.0);
            var.fill(0.0);
            for row in xi.chunks_exact(p) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= c as f64);
            for row in xi.chunks_exact(p) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let inv_i = &mut inv[i * p..(i + 1) * p];
            for (iv, s) in inv_i.iter_mut().zip(&var) {
                *iv = 1.0 / (s / c as f64 + eps).sqrt();
            }
            let xh = &mut xhat[i * c * p..(i + 1) * c * p];
            for (row, src) in xh.chunks_exact_mut(p).zip(xi.chunks_exact(p)) {
                for (((d, v), m), iv) in row.iter_mut().zip(src).zip(&mean).zip(inv_i.iter()) {
                    *d = (v - m) * iv;
                }
            }
        }
        let (gm, bt) = (gamma.value_rc(), beta.value_rc());
        let mut out = xhat.clone();
        for (j, row) in out.chunks_exact_mut(p).enumerate() {
            let ch = j % c;
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            row.iter_mut().for_each(|v| *v = *v * gv + bv);
        }
        Var::from_op(
            &[self, gamma, beta],
            Tensor::new(vec![n, c, h, w], out)?,
            Box::new(move |g, needs| {
                let mut dgamma = vec![0.0; c];
                let mut dxhat = g.data().to_vec();
                for (j, (row, xr)) in dxhat.chunks_exact_mut(p).zip(xhat.chunks_exact(p)).enumerate() {
                    let ch = j % c;
                    dgamma[ch] += row.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    let gv = gm.data()[ch];
                    row.iter_mut().for_each(|v| *v *= gv);
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * c * p];
                    let mut m1 = vec![0.0; p];
                    let mut m2 = vec![0.0; p];
                    for i in 0..n {
                        let dxh = &dxhat[i * c * p..(i + 1) * c * p];
                        let xh = &xhat[i * c * p..(i + 1) * c * p];
                        m1.fill(0.0);
                        m2.fill(0.0);
                        for (r, xr) in dxh.chunks_exact(p).zip(xh.chunks_exact(p)) {
                            for (((a, b), d), xv) in m1.iter_mut().zip(m2.iter_mut()).zip(r).zip(xr) {
                                *a += d;
                                *b += d * xv;
                            }
                        }
                        let dxi = &mut dx[i * c * p..(i + 1) * c * p];
                        let iv = &inv[i * p..(i + 1) * p];
                        for ((o, r), xr) in dxi.chunks_exact_mut(p).zip(dxh.chunks_exact(p)).zip(xh.chunks_exact(p)) {
                            for q in 0..p {
                                o[q] = iv[q] * (r[q] - m1[q] / c as f64 - xr[q] * m2[q] / c as f64);
                            }
                        }
                    }
                    Tensor::new(vec![n, c, h, w], dx).unwrap()
                });
                vec![dx, Some(Tensor::new(vec![c], dgamma).unwrap()), Some(channel_sums(g, n, c, p))]
            }),
        )
    }

    /// Forward first difference `x[i+1] - x[i]` along `axis`; the last entry is 0
    /// (replicate boundary).
    pub fn forward_diff(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("forward_diff axis {axis} on {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let x = self.value().data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..n.saturating_sub(1) {
                let a = (o * n + i) * inner;
                let b = a + inner;
                for j in 0..inner {
                    out[a + j] = x[b + j] - x[a + j];
                }
            }
        }
        Var::from_op(
            &[self],
            Tensor::new(shape.clone(), out)?,
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..n.saturating_sub(1) {
                        let a = (o * n + i) * inner;
                        let b = a + inner;
                        for j in 0..inner {
                            dx[b + j] += gd[a + j];
                            dx[a + j] -= gd[a + j];
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx).unwrap())]
            }),
        )
    }
}

/// Concatenates along `axis`.
pub fn cat(vars: &[&Var], axis: usize) -> Result<Var> {
    let first = vars.first().ok_or_else(|| Error::Shape("cat of nothing".into()))?;
    let base = first.shape().to_vec();
    if axis >= base.len() {
        return shape_err(format!("cat axis {axis} on {base:?}"));
    }
    let mut sizes = Vec::with_capacity(vars.len());
    for v in vars {
        let s = v.shape();
        if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
            return shape_err(format!("cat shape mismatch {base:?} vs {s:?}"));
        }
        sizes.push(s[axis]);
    }
    let total: usize = sizes.iter().sum();
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in vars.iter().zip(&sizes) {
            out.extend_from_slice(&v.value().data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let mut oshape = base.clone();
    oshape[axis] = total;
    let shapes: Vec<Vec<usize>> = vars.iter().map(|v| v.shape().to_vec()).collect();
    Var::from_op(
        vars,
        Tensor::new(oshape, out)?,
        Box::new(move |g, needs| {
            let mut off = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for (k, &s) in sizes.iter().enumerate() {
                if needs[k] {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let start = (o * total + off) * inner;
                        d.extend_from_slice(&g.data()[start..start + s * inner]);
                    }
                    res.push(Some(Tensor::new(shapes[k].clone(), d).unwrap()));
                } else {
                    res.push(None);
                }
                off += s;
            }
            res
        }),
    )
}

fn permute_tensor(x: &Tensor, axes: &[usize]) -> Tensor {
    let st = strides(x.shape());
    let oshape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let ost: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let mut out = vec![0.0; x.numel()];
    walk_strided(&oshape, &ost, |i, o| out[i] = x.data()[o]);
    Tensor::new(oshape, out).unwrap()
}

fn channel_sums(g: &Tensor, n: usize, c: usize, plane: usize) -> Tensor {
    let mut s = vec![0.0; c];
    for i in 0..n {
        for (ch, row) in g.data()[i * c * plane..(i + 1) * c * plane].chunks_exact(plane).enumerate() {
            s[ch] += row.iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], s).unwrap()
}

fn check_bias(bias: Option<&Var>, c: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [c] => shape_err(format!("per-channel param {:?} for {c} channels", b.shape())),
        _ => Ok(()),
    }
}
