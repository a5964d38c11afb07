use dr_autograd::Var;

use crate::nn::{Bound, Builder, Conv2d, DepthwiseConv, Init, LayerNorm2d};
use crate::{Error, Result};

/// Kernel sizes of the three depth-wise heads that follow the 1×1 projection.
pub const HEAD_KERNELS: [usize; 3] = [3, 5, 7];

/// Multi-head depth-wise layer attention: attention across channels, so the
/// attention matrix per head is `(c/heads)×(c/heads)` whatever the image size.
#[derive(Clone, Debug)]
pub struct Mdla {
    channels: usize,
    heads: usize,
    qkv: Conv2d,
    depthwise: Vec<DepthwiseConv>,
    fuse: Vec<Conv2d>,
    temperature: String,
    proj: Conv2d,
}

impl Mdla {
    pub fn new(b: &Builder, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            channels,
            heads,
            qkv: Conv2d::no_bias(&b.pp("qkv"), channels, 3 * channels, 1),
            depthwise: HEAD_KERNELS
                .iter()
                .map(|&k| DepthwiseConv::new(&b.pp(format!("dw{k}")), 3 * channels, k, false))
                .collect(),
            fuse: ["q", "k", "v"]
                .iter()
                .map(|n| Conv2d::no_bias(&b.pp(format!("fuse_{n}")), 3 * channels, channels, 1))
                .collect(),
            temperature: b.param("temperature", &[heads], Init::Ones),
            proj: Conv2d::no_bias(&b.pp("proj"), channels, channels, 1),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn check(&self, x: &Var) -> Result<(usize, usize, usize)> {
        match *x.shape() {
            [n, c, h, w] if c == self.channels => Ok((n, h, w)),
            _ => Err(Error::Config(format!("attention over {} channels got input {:?}", self.channels, x.shape()))),
        }
    }

    /// Q, K, V as `[N·heads, c/heads, H·W]`. Each projection is computed
    /// from its own weight slices, which equals slicing the full activations.
    fn qkv(&self, p: &Bound, x: &Var) -> Result<[Var; 3]> {
        let (n, h, w) = self.check(x)?;
        let c = self.channels;
        let mut out = Vec::with_capacity(3);
        for (i, fuse) in self.fuse.iter().enumerate() {
            let rows = i * c..(i + 1) * c;
            let base = self.qkv.forward_block(p, x, rows.clone(), 0..c)?;
            let mut fused: Option<Var> = None;
            for (j, dw) in self.depthwise.iter().enumerate() {
                let part =
                    fuse.forward_block(p, &dw.forward_channels(p, &base, rows.clone())?, 0..c, j * c..(j + 1) * c)?;
                fused = Some(match fused {
                    Some(acc) => acc.add(&part)?,
                    None => part,
                });
            }
            out.push(fused.expect("three kernels").reshape(&[n * self.heads, c / self.heads, h * w])?);
        }
        Ok(out.try_into().expect("three projections"))
    }

    fn attention_from(&self, p: &Bound, q: &Var, k: &Var, n: usize) -> Result<Var> {
        let d = self.channels / self.heads;
        let q = q.l2_normalize_last(1e-12);
        let k = k.l2_normalize_last(1e-12);
        let logits = q.matmul_t(&k, false, true)?.reshape(&[n, self.heads, d, d])?;
        let tau = p.get(&self.temperature)?.reshape(&[1, self.heads, 1, 1])?;
        Ok(logits.mul_bcast(&tau)?.softmax_last())
    }

    /// Per-head attention matrices, `[N, heads, c/heads, c/heads]`.
    pub fn attention_map(&self, p: &Bound, x: &Var) -> Result<Var> {
        let (n, _, _) = self.check(x)?;
        let [q, k, _] = self.qkv(p, x)?;
        self.attention_from(p, &q, &k, n)
    }

    /// The attention branch alone, without the residual.
    pub fn branch(&self, p: &Bound, x: &Var) -> Result<Var> {
        let (n, h, w) = self.check(x)?;
        let d = self.channels / self.heads;
        let [q, k, v] = self.qkv(p, x)?;
        let a = self.attention_from(p, &q, &k, n)?.reshape(&[n * self.heads, d, d])?;
        let mixed = a.matmul(&v)?.reshape(&[n, self.channels, h, w])?;
        self.proj.forward(p, &mixed)
    }

    /// `branch(x) + x`.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(self.branch(p, x)?.add(x)?)
    }
}

/// Depth-wise feed-forward: depth-wise 3×3, point-wise expansion to a gated
/// GELU pair, depth-wise 3×3.
#[derive(Clone, Debug)]
pub struct DepthwiseFfn {
    channels: usize,
    dw_in: DepthwiseConv,
    pw: Conv2d,
    dw_out: DepthwiseConv,
}

impl DepthwiseFfn {
    pub fn new(b: &Builder, channels: usize) -> Self {
        Self {
            channels,
            dw_in: DepthwiseConv::new(&b.pp("dw_in"), channels, 3, false),
            pw: Conv2d::no_bias(&b.pp("pw"), channels, 2 * channels, 1),
            dw_out: DepthwiseConv::new(&b.pp("dw_out"), channels, 3, false),
        }
    }

    pub fn branch(&self, p: &Bound, x: &Var) -> Result<Var> {
        if x.shape().get(1) != Some(&self.channels) || x.shape().len() != 4 {
            return Err(Error::Config(format!(
                "feed-forward over {} channels got input {:?}",
                self.channels,
                x.shape()
            )));
        }
        let h = self.pw.forward(p, &self.dw_in.forward(p, x)?)?;
        let halves = h.chunk(2, 1)?;
        let gated = halves[0].gelu().mul(&halves[1])?;
        self.dw_out.forward(p, &gated)
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(self.branch(p, x)?.add(x)?)
    }
}

/// Per-sample `(scale, shift)` pairs, each `[N, C, 1, 1]`, applied after the
/// two normalizations of a block as `x·(1 + scale) + shift`.
pub struct Modulation {
    pub attn: (Var, Var),
    pub ffn: (Var, Var),
}

fn modulate(x: Var, m: Option<&(Var, Var)>) -> Result<Var> {
    let Some((scale, shift)) = m else { return Ok(x) };
    Ok(x.mul_bcast(&scale.affine(1.0, 1.0))?.add_bcast(shift)?)
}

/// `F̂ = Atten(Norm(F)) + F`, then `F' = FFN(Norm(F̂)) + F̂`.
#[derive(Clone, Debug)]
pub struct TdnBlock {
    norm1: LayerNorm2d,
    attn: Mdla,
    norm2: LayerNorm2d,
    ffn: DepthwiseFfn,
}

impl TdnBlock {
    pub fn new(b: &Builder, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm2d::new(&b.pp("norm1"), channels),
            attn: Mdla::new(&b.pp("attn"), channels, heads)?,
            norm2: LayerNorm2d::new(&b.pp("norm2"), channels),
            ffn: DepthwiseFfn::new(&b.pp("ffn"), channels),
        })
    }

    pub fn attention(&self) -> &Mdla {
        &self.attn
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        self.forward_modulated(p, x, None)
    }

    pub fn forward_modulated(&self, p: &Bound, x: &Var, m: Option<&Modulation>) -> Result<Var> {
        let a = modulate(self.norm1.forward(p, x)?, m.map(|m| &m.attn))?;
        let f_hat = self.attn.branch(p, &a)?.add(x)?;
        let b = modulate(self.norm2.forward(p, &f_hat)?, m.map(|m| &m.ffn))?;
        Ok(self.ffn.branch(p, &b)?.add(&f_hat)?)
    }
}
