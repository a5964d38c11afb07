use dr_autograd::Var;
use serde::{Deserialize, Serialize};

use super::time::TimeMlp;
use crate::nn::{Bound, Builder, Conv2d, Linear};
use crate::tdn::{Modulation, TdnBlock};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerDescriptor {
    pub target_channels: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub time_dim: usize,
}

impl RefinerDescriptor {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.target_channels, 1 | 3) || self.channels == 0 || self.blocks == 0 {
            return Err(Error::Config(format!("invalid refiner descriptor {self:?}")));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }
}

/// Channel-attention blocks whose normalized features receive a per-step
/// `x·(1 + scale) + shift`, with a zero-initialized output added to the input.
pub struct ChannelAttentionRefiner {
    target: usize,
    channels: usize,
    time: TimeMlp,
    embed: Conv2d,
    blocks: Vec<(Linear, TdnBlock)>,
    out: Conv2d,
}

impl ChannelAttentionRefiner {
    pub fn new(d: &RefinerDescriptor, b: &Builder) -> Result<Self> {
        d.validate()?;
        let c = d.channels;
        let tdim = 4 * c;
        let blocks = (0..d.blocks)
            .map(|i| {
                let bb = b.pp(format!("block{i}"));
                Ok((Linear::new(&bb.pp("affine"), tdim, 4 * c), TdnBlock::new(&bb, c, d.heads)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            target: d.target_channels,
            channels: c,
            time: TimeMlp::new(&b.pp("time"), d.time_dim, tdim),
            embed: Conv2d::new(&b.pp("embed"), d.target_channels, c, 3, 1),
            blocks,
            out: Conv2d::zeroed(&b.pp("out"), c, d.target_channels, 3),
        })
    }

    pub fn forward(&self, p: &Bound, x0: &Var, t: &[usize]) -> Result<Var> {
        let n = match *x0.shape() {
            [n, c, _, _] if c == self.target && n == t.len() => n,
            _ => {
                return Err(Error::Config(format!(
                    "refiner expects [{}, {}, H, W], got {:?}",
                    t.len(),
                    self.target,
                    x0.shape()
                )))
            }
        };
        let temb = self.time.forward(p, t)?.silu();
        let mut f = self.embed.forward(p, x0)?;
        for (affine, block) in &self.blocks {
            let m = affine.forward(p, &temb)?.reshape(&[n, 4 * self.channels, 1, 1])?.chunk(4, 1)?;
            let modulation = Modulation { attn: (m[0].clone(), m[1].clone()), ffn: (m[2].clone(), m[3].clone()) };
            f = block.forward_modulated(p, &f, Some(&modulation))?;
        }
        Ok(self.out.forward(p, &f)?.add(x0)?)
    }
}
