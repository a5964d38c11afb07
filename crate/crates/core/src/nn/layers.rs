use std::ops::Range;

use dr_autograd::Var;

use super::{Bound, Builder, Init};
use crate::Result;

const NORM_EPS: f64 = 1e-5;

/// `k×k` convolution with "same" padding for stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(b: &Builder, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = cin * k * k;
        Self {
            weight: b.param("weight", &[cout, cin, k, k], Init::FanIn(fan_in)),
            bias: Some(b.param("bias", &[cout], Init::FanIn(fan_in))),
            stride,
            pad: k / 2,
        }
    }

    /// Same layout, initialized to zero.
    pub fn zeroed(b: &Builder, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: b.param("weight", &[cout, cin, k, k], Init::Zeros),
            bias: Some(b.param("bias", &[cout], Init::Zeros)),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn no_bias(b: &Builder, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: b.param("weight", &[cout, cin, k, k], Init::FanIn(cin * k * k)),
            bias: None,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let bias = self.bias.as_deref().map(|n| p.get(n)).transpose()?;
        Ok(x.conv2d(p.get(&self.weight)?, bias, self.stride, self.pad)?)
    }

    /// The part of the convolution mapping input channels `inputs` to output
    /// channels `outputs`; `x` holds only the `inputs` channels.
    pub fn forward_block(&self, p: &Bound, x: &Var, outputs: Range<usize>, inputs: Range<usize>) -> Result<Var> {
        let w = p.get(&self.weight)?.narrow(0, outputs.start, outputs.len())?.narrow(1, inputs.start, inputs.len())?;
        let bias = match self.bias.as_deref() {
            Some(n) => Some(p.get(n)?.narrow(0, outputs.start, outputs.len())?),
            None => None,
        };
        Ok(x.conv2d(&w, bias.as_ref(), self.stride, self.pad)?)
    }
}

/// Per-channel `k×k` convolution, "same" padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    weight: String,
    bias: Option<String>,
}

impl DepthwiseConv {
    pub fn new(b: &Builder, channels: usize, k: usize, bias: bool) -> Self {
        Self {
            weight: b.param("weight", &[channels, 1, k, k], Init::FanIn(k * k)),
            bias: bias.then(|| b.param("bias", &[channels], Init::FanIn(k * k))),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let bias = self.bias.as_deref().map(|n| p.get(n)).transpose()?;
        Ok(x.depthwise_conv2d(p.get(&self.weight)?, bias)?)
    }

    /// The filters of `channels` only; `x` holds just those channels.
    pub fn forward_channels(&self, p: &Bound, x: &Var, channels: Range<usize>) -> Result<Var> {
        let w = p.get(&self.weight)?.narrow(0, channels.start, channels.len())?;
        let bias = match self.bias.as_deref() {
            Some(n) => Some(p.get(n)?.narrow(0, channels.start, channels.len())?),
            None => None,
        };
        Ok(x.depthwise_conv2d(&w, bias.as_ref())?)
    }
}

/// 2× upsampling by a stride-2 `2×2` transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    weight: String,
    bias: String,
}

impl ConvTranspose2x2 {
    pub fn new(b: &Builder, cin: usize, cout: usize) -> Self {
        Self {
            weight: b.param("weight", &[cin, cout, 2, 2], Init::FanIn(cin)),
            bias: b.param("bias", &[cout], Init::FanIn(cin)),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(x.conv_transpose2x2(p.get(&self.weight)?, Some(p.get(&self.bias)?))?)
    }
}

/// Normalization over the channel axis at every pixel.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    gamma: String,
    beta: String,
}

impl LayerNorm2d {
    pub fn new(b: &Builder, channels: usize) -> Self {
        Self { gamma: b.param("gamma", &[channels], Init::Ones), beta: b.param("beta", &[channels], Init::Zeros) }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(x.channel_layer_norm(p.get(&self.gamma)?, p.get(&self.beta)?, NORM_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    groups: usize,
}

impl GroupNorm {
    /// Uses the largest group count `≤ groups` that divides `channels`.
    pub fn new(b: &Builder, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.min(channels)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        Self {
            gamma: b.param("gamma", &[channels], Init::Ones),
            beta: b.param("beta", &[channels], Init::Zeros),
            groups,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        Ok(x.group_norm(self.groups, p.get(&self.gamma)?, p.get(&self.beta)?, NORM_EPS)?)
    }
}

/// `y = x·Wᵀ + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    out: usize,
}

impl Linear {
    pub fn new(b: &Builder, din: usize, dout: usize) -> Self {
        Self {
            weight: b.param("weight", &[dout, din], Init::FanIn(din)),
            bias: b.param("bias", &[dout], Init::FanIn(din)),
            out: dout,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let y = x.matmul_t(p.get(&self.weight)?, false, true)?;
        Ok(y.add_bcast(&p.get(&self.bias)?.reshape(&[1, self.out])?)?)
    }
}
