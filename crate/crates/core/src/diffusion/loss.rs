use std::sync::{Arc, LazyLock};

use dr_autograd::Var;

use crate::registry::Registry;
use crate::{Error, Result};

/// Elementwise penalty averaged over all elements.
pub trait NoiseLossNorm: Send + Sync {
    fn apply(&self, diff: &Var) -> Var;
}

struct L1;
struct L2;

impl NoiseLossNorm for L1 {
    fn apply(&self, diff: &Var) -> Var {
        diff.abs().mean()
    }
}

impl NoiseLossNorm for L2 {
    fn apply(&self, diff: &Var) -> Var {
        diff.square().mean()
    }
}

pub fn noise_loss_norms() -> &'static Registry<dyn NoiseLossNorm> {
    static R: LazyLock<Registry<dyn NoiseLossNorm>> = LazyLock::new(|| {
        let mut r: Registry<dyn NoiseLossNorm> = Registry::new("noise-loss norm");
        r.register("l1", Arc::new(L1));
        r.register("l2", Arc::new(L2));
        r
    });
    &R
}

fn diff(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?)
}

pub fn diffusion_loss_with(norm: &dyn NoiseLossNorm, eps: &Var, eps_hat: &Var) -> Result<Var> {
    Ok(norm.apply(&diff(eps, eps_hat)?))
}

/// Mean absolute error between true and predicted noise.
pub fn diffusion_loss(eps: &Var, eps_hat: &Var) -> Result<Var> {
    diffusion_loss_with(&L1, eps, eps_hat)
}

/// Mean absolute error between the clean target and the refined estimate.
pub fn content_loss(x0: &Var, x0_refined: &Var) -> Result<Var> {
    Ok(diff(x0, x0_refined)?.abs().mean())
}

pub fn total_diffusion_loss(l_diff: &Var, l_content: &Var, gamma_ct: f64) -> Result<Var> {
    Ok(l_diff.add(&l_content.scale(gamma_ct))?)
}
