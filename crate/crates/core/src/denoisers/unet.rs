use dr_autograd::{cat, Var};
use serde::{Deserialize, Serialize};

use super::time::TimeMlp;
use crate::nn::{Bound, Builder, Conv2d, GroupNorm, Linear};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetDescriptor {
    /// Channels of the sample being denoised (3 for reflectance, 1 for illumination).
    pub target_channels: usize,
    /// Channels of the guidance image concatenated to the input; 0 for none.
    pub condition_channels: usize,
    pub base_channels: usize,
    /// Width multiplier per resolution level; each level after the first halves the resolution.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Spatial self-attention in the middle block (lowest resolution).
    pub attention_lowest: bool,
    /// Upper bound on group-norm groups.
    pub groups: usize,
    pub time_dim: usize,
}

impl UNetDescriptor {
    /// Conditional noise predictor with the desk-scale layout.
    pub fn denoiser(target_channels: usize, base_channels: usize) -> Self {
        Self {
            target_channels,
            condition_channels: target_channels,
            base_channels,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            attention_lowest: true,
            groups: 8,
            time_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.target_channels, 1 | 3) {
            return Err(Error::Config(format!("target channels must be 1 or 3, got {}", self.target_channels)));
        }
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config("U-Net widths must be positive".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) || self.groups == 0 {
            return Err(Error::Config("time_dim must be even and groups positive".into()));
        }
        Ok(())
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

impl ResBlock {
    fn new(b: &Builder, cin: usize, cout: usize, tdim: usize, groups: usize) -> Self {
        Self {
            norm1: GroupNorm::new(&b.pp("norm1"), cin, groups),
            conv1: Conv2d::new(&b.pp("conv1"), cin, cout, 3, 1),
            time: Linear::new(&b.pp("time"), tdim, cout),
            norm2: GroupNorm::new(&b.pp("norm2"), cout, groups),
            conv2: Conv2d::new(&b.pp("conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(&b.pp("skip"), cin, cout, 1, 1)),
            cout,
        }
    }

    fn forward(&self, p: &Bound, x: &Var, temb: &Var) -> Result<Var> {
        let h = self.conv1.forward(p, &self.norm1.forward(p, x)?.silu())?;
        let n = temb.shape()[0];
        let tb = self.time.forward(p, &temb.silu())?.reshape(&[n, self.cout, 1, 1])?;
        let h = h.add_bcast(&tb)?;
        let h = self.conv2.forward(p, &self.norm2.forward(p, &h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(p, x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?)
    }
}

/// Single-head spatial self-attention with a residual.
#[derive(Clone, Debug)]
struct SpatialAttention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl SpatialAttention {
    fn new(b: &Builder, channels: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(&b.pp("norm"), channels, groups),
            qkv: Conv2d::new(&b.pp("qkv"), channels, 3 * channels, 1, 1),
            proj: Conv2d::new(&b.pp("proj"), channels, channels, 1, 1),
            channels,
        }
    }

    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let [n, c, h, w] = *x.shape() else { unreachable!("checked by the U-Net") };
        let qkv = self.qkv.forward(p, &self.norm.forward(p, x)?)?.chunk(3, 1)?;
        let flat = |v: &Var| v.reshape(&[n, c, h * w]);
        let (q, k, v) = (flat(&qkv[0])?, flat(&qkv[1])?, flat(&qkv[2])?);
        // [N, HW, HW]: rows index queries
        let a = q.matmul_t(&k, true, false)?.scale(1.0 / (self.channels as f64).sqrt()).softmax_last();
        let out = v.matmul_t(&a, false, true)?.reshape(&[n, c, h, w])?;
        Ok(self.proj.forward(p, &out)?.add(x)?)
    }
}

enum Stage {
    Res(ResBlock),
    Down(Conv2d),
}

/// SR3-style U-Net over `[x_t ‖ condition]` with a time embedding added in
/// every residual block.
pub struct UNet {
    desc: UNetDescriptor,
    time: TimeMlp,
    conv_in: Conv2d,
    down: Vec<Stage>,
    mid1: ResBlock,
    mid_attn: Option<SpatialAttention>,
    mid2: ResBlock,
    up: Vec<(Vec<ResBlock>, Option<Conv2d>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(desc: &UNetDescriptor, b: &Builder) -> Result<Self> {
        desc.validate()?;
        let base = desc.base_channels;
        let tdim = 4 * base;
        let g = desc.groups;
        let time = TimeMlp::new(&b.pp("time"), desc.time_dim, tdim);
        let conv_in = Conv2d::new(&b.pp("conv_in"), desc.target_channels + desc.condition_channels, base, 3, 1);

        let mut skip_channels = vec![base];
        let mut ch = base;
        let mut down = Vec::new();
        let levels = desc.channel_mults.len();
        for (l, &mult) in desc.channel_mults.iter().enumerate() {
            let out = base * mult;
            for r in 0..desc.res_blocks {
                down.push(Stage::Res(ResBlock::new(&b.pp(format!("down{l}.res{r}")), ch, out, tdim, g)));
                ch = out;
                skip_channels.push(ch);
            }
            if l + 1 < levels {
                down.push(Stage::Down(Conv2d::new(&b.pp(format!("down{l}.downsample")), ch, ch, 3, 2)));
                skip_channels.push(ch);
            }
        }
        let mid1 = ResBlock::new(&b.pp("mid.res0"), ch, ch, tdim, g);
        let mid_attn = desc.attention_lowest.then(|| SpatialAttention::new(&b.pp("mid.attn"), ch, g));
        let mid2 = ResBlock::new(&b.pp("mid.res1"), ch, ch, tdim, g);

        let mut up = Vec::new();
        for (l, &mult) in desc.channel_mults.iter().enumerate().rev() {
            let out = base * mult;
            let mut blocks = Vec::new();
            for r in 0..=desc.res_blocks {
                let skip = skip_channels.pop().expect("one skip per block");
                blocks.push(ResBlock::new(&b.pp(format!("up{l}.res{r}")), ch + skip, out, tdim, g));
                ch = out;
            }
            let upsample = (l > 0).then(|| Conv2d::new(&b.pp(format!("up{l}.upsample")), ch, ch, 3, 1));
            up.push((blocks, upsample));
        }
        Ok(Self {
            desc: desc.clone(),
            time,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out: GroupNorm::new(&b.pp("norm_out"), ch, g),
            conv_out: Conv2d::zeroed(&b.pp("conv_out"), ch, desc.target_channels, 3),
        })
    }

    /// `x_t`: `[N, target, H, W]`; `condition`: `[N, condition_channels, H, W]`
    /// (ignored when the descriptor has no condition).
    pub fn forward(&self, p: &Bound, x_t: &Var, condition: Option<&Var>, t: &[usize]) -> Result<Var> {
        let d = &self.desc;
        let f = d.downsampling_factor();
        let (n, h, w) = match *x_t.shape() {
            [n, c, h, w] if c == d.target_channels => (n, h, w),
            _ => {
                return Err(Error::Config(format!(
                    "U-Net expects [N, {}, H, W], got {:?}",
                    d.target_channels,
                    x_t.shape()
                )))
            }
        };
        if h % f != 0 || w % f != 0 {
            return Err(Error::Input(format!("U-Net input sides must be multiples of {f}, got {h}x{w}")));
        }
        if t.len() != n {
            return Err(Error::Input(format!("{} steps for a batch of {n}", t.len())));
        }
        let input = match (d.condition_channels, condition) {
            (0, _) => x_t.clone(),
            (cc, Some(c)) if c.shape() == [n, cc, h, w] => cat(&[x_t, c], 1)?,
            (cc, c) => {
                return Err(Error::Config(format!(
                    "U-Net expects a [{n}, {cc}, {h}, {w}] condition, got {:?}",
                    c.map(|c| c.shape().to_vec())
                )))
            }
        };
        let temb = self.time.forward(p, t)?;
        let mut hcur = self.conv_in.forward(p, &input)?;
        let mut skips = vec![hcur.clone()];
        for stage in &self.down {
            hcur = match stage {
                Stage::Res(r) => r.forward(p, &hcur, &temb)?,
                Stage::Down(c) => c.forward(p, &hcur)?,
            };
            skips.push(hcur.clone());
        }
        hcur = self.mid1.forward(p, &hcur, &temb)?;
        if let Some(a) = &self.mid_attn {
            hcur = a.forward(p, &hcur)?;
        }
        hcur = self.mid2.forward(p, &hcur, &temb)?;
        for (blocks, upsample) in &self.up {
            for r in blocks {
                let skip = skips.pop().expect("one skip per block");
                hcur = r.forward(p, &cat(&[&hcur, &skip], 1)?, &temb)?;
            }
            if let Some(c) = upsample {
                hcur = c.forward(p, &hcur.upsample_nearest2x()?)?;
            }
        }
        self.conv_out.forward(p, &self.norm_out.forward(p, &hcur)?.silu())
    }
}
