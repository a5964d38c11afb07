use dr_autograd::{Tensor, Var};

use crate::nn::{Bound, Builder, Linear};
use crate::Result;

/// `[sin(t·f₀), …, sin(t·f_{d/2−1}), cos(t·f₀), …]` with `f_i = 10000^{−i/(d/2)}`;
/// one row per step.
pub fn sinusoidal_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row_start = data.len();
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((step as f64 * f).sin());
        }
        for i in 0..half {
            let f = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((step as f64 * f).cos());
        }
        data.resize(row_start + dim, 0.0);
    }
    Tensor::new(vec![t.len(), dim], data).expect("sized above")
}

/// Sinusoidal features followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeMlp {
    pub fn new(b: &Builder, dim: usize, out: usize) -> Self {
        Self { dim, fc1: Linear::new(&b.pp("fc1"), dim, out), fc2: Linear::new(&b.pp("fc2"), out, out) }
    }

    pub fn forward(&self, p: &Bound, t: &[usize]) -> Result<Var> {
        let e = Var::constant(sinusoidal_embedding(t, self.dim));
        self.fc2.forward(p, &self.fc1.forward(p, &e)?.silu())
    }
}
