use std::sync::{Arc, LazyLock};

use dr_autograd::{Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::NoiseSchedule;
use crate::registry::Registry;
use crate::{Error, Result};

/// Unit-Gaussian tensor drawn element by element in storage order.
pub fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

fn check_batch(x: &Tensor, other: &Tensor, t: &[usize], s: &NoiseSchedule) -> Result<usize> {
    if x.shape() != other.shape() {
        return Err(Error::Input(format!("shape mismatch {:?} vs {:?}", x.shape(), other.shape())));
    }
    let n = *x.shape().first().ok_or_else(|| Error::Input("scalar given where a batch was expected".into()))?;
    if t.len() != n {
        return Err(Error::Input(format!("{} steps given for a batch of {n}", t.len())));
    }
    for &ti in t {
        s.check_step(ti)?;
    }
    Ok(x.numel() / n.max(1))
}

/// Applies `a(t)·x + b(t)·y` per batch element.
fn per_sample(
    x: &Tensor,
    y: &Tensor,
    t: &[usize],
    s: &NoiseSchedule,
    coef: impl Fn(usize) -> (f64, f64),
) -> Result<Tensor> {
    let per = check_batch(x, y, t, s)?;
    let mut out = x.clone();
    for ((o, yv), &ti) in out.data_mut().chunks_mut(per).zip(y.data().chunks(per)).zip(t) {
        let (a, b) = coef(ti);
        for (ov, yv) in o.iter_mut().zip(yv) {
            *ov = a * *ov + b * yv;
        }
    }
    Ok(out)
}

/// Closed-form corruption `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`, one step per batch element.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    per_sample(x0, eps, t, s, |t| (s.alpha_bar()[t].sqrt(), (1.0 - s.alpha_bar()[t]).sqrt()))
}

/// One forward step `√α_t·x + √(1−α_t)·ε`.
pub fn q_sample_step(x_prev: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    per_sample(x_prev, eps, t, s, |t| (s.alpha()[t].sqrt(), (1.0 - s.alpha()[t]).sqrt()))
}

/// `(x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, differentiable in both inputs.
pub fn estimate_x0(x_t: &Var, eps_hat: &Var, t: &[usize], s: &NoiseSchedule) -> Result<Var> {
    check_batch(x_t.value(), eps_hat.value(), t, s)?;
    let n = t.len();
    let mut shape = vec![1; x_t.shape().len()];
    shape[0] = n;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for &ti in t {
        let ab = s.alpha_bar()[ti];
        let inv = 1.0 / ab.sqrt();
        if !(ab >= f64::MIN_POSITIVE) || !inv.is_finite() {
            return Err(Error::Numeric(format!("alpha_bar[{ti}] = {ab:e} underflows; x0 cannot be estimated")));
        }
        a.push(inv);
        b.push(-(1.0 - ab).sqrt() * inv);
    }
    let a = Var::constant(Tensor::new(shape.clone(), a)?);
    let b = Var::constant(Tensor::new(shape, b)?);
    Ok(x_t.mul_bcast(&a)?.add(&eps_hat.mul_bcast(&b)?)?)
}

/// Reverse-step mean of `x_{t−1}` given `x_t` and the predicted noise.
pub trait PosteriorMeanRule: Send + Sync {
    /// Coefficient on `ε̂` inside `(x_t − c_t·ε̂)/√α_t`.
    fn eps_coefficient(&self, s: &NoiseSchedule, t: usize) -> f64;

    fn mean(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
        let c = self.eps_coefficient(s, t);
        let inv = 1.0 / s.alpha()[t].sqrt();
        Ok(x_t.zip_map(eps_hat, |x, e| (x - c * e) * inv)?)
    }
}

/// `β_t/√(1−ᾱ_t)`; the only form consistent with [`estimate_x0`].
pub struct StandardMean;

impl PosteriorMeanRule for StandardMean {
    fn eps_coefficient(&self, s: &NoiseSchedule, t: usize) -> f64 {
        s.beta()[t] / (1.0 - s.alpha_bar()[t]).sqrt()
    }
}

/// `β_t/(1−ᾱ_t)`, without the square root.
pub struct PrintedMean;

impl PosteriorMeanRule for PrintedMean {
    fn eps_coefficient(&self, s: &NoiseSchedule, t: usize) -> f64 {
        s.beta()[t] / (1.0 - s.alpha_bar()[t])
    }
}

/// The standard mean written through the clean-sample estimate, with that
/// estimate clamped to `[−1, 1]`:
/// `√ᾱ_{t−1}·β_t/(1−ᾱ_t)·x̂0 + √α_t·(1−ᾱ_{t−1})/(1−ᾱ_t)·x_t`.
/// Identical to [`StandardMean`] whenever no clamping occurs.
pub struct ClippedMean;

impl PosteriorMeanRule for ClippedMean {
    fn eps_coefficient(&self, s: &NoiseSchedule, t: usize) -> f64 {
        StandardMean.eps_coefficient(s, t)
    }

    fn mean(&self, x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
        let ab = s.alpha_bar()[t];
        if ab < f64::MIN_POSITIVE {
            return StandardMean.mean(x_t, eps_hat, t, s);
        }
        let ab_prev = if t == 0 { 1.0 } else { s.alpha_bar()[t - 1] };
        let (a, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt());
        let c0 = ab_prev.sqrt() * s.beta()[t] / (1.0 - ab);
        let ct = s.alpha()[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok(x_t.zip_map(eps_hat, |x, e| c0 * (a * x - b * e).clamp(-1.0, 1.0) + ct * x)?)
    }
}

pub fn posterior_mean_rules() -> &'static Registry<dyn PosteriorMeanRule> {
    static R: LazyLock<Registry<dyn PosteriorMeanRule>> = LazyLock::new(|| {
        let mut r: Registry<dyn PosteriorMeanRule> = Registry::new("posterior-mean rule");
        r.register("standard", Arc::new(StandardMean));
        r.register("printed", Arc::new(PrintedMean));
        r.register("clipped", Arc::new(ClippedMean));
        r
    });
    &R
}

/// Reverse-step mean at a single step `t` for the whole batch.
pub fn posterior_mean_with(
    rule: &dyn PosteriorMeanRule,
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.check_step(t)?;
    rule.mean(x_t, eps_hat, t, s)
}

pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    posterior_mean_with(&StandardMean, x_t, eps_hat, t, s)
}

/// The state of a reverse chain: current sample, its step and the guidance.
#[derive(Clone, Debug)]
pub struct DiffusionState {
    pub x_t: Tensor,
    pub t: usize,
    pub condition: Tensor,
}

/// `μ + σ_t·z`; at `t = 0` the noise term is dropped.
pub fn p_sample(
    rule: &dyn PosteriorMeanRule,
    state: &DiffusionState,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    let mu = posterior_mean_with(rule, &state.x_t, eps_hat, state.t, s)?;
    if state.t == 0 {
        return Ok(mu);
    }
    let sigma = s.sigma2()[state.t].sqrt();
    Ok(mu.zip_map(z, |m, z| m + sigma * z)?)
}

/// A network estimating the noise in `x_t` given the guidance image.
pub trait NoisePredictor {
    fn target_channels(&self) -> usize;
    fn predict(&self, x_t: &Tensor, condition: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// Runs the reverse chain from pure noise at `T−1` down to 0 and clamps the
/// result to `[−1, 1]`. `condition` is `[N, C, H, W]`; the output has the
/// predictor's target channel count.
pub fn sample_loop(
    condition: &Tensor,
    denoiser: &dyn NoisePredictor,
    s: &NoiseSchedule,
    rule: &dyn PosteriorMeanRule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (n, _, h, w) = condition.dims4().map_err(|e| Error::Input(e.to_string()))?;
    let shape = [n, denoiser.target_channels(), h, w];
    let mut state = DiffusionState { x_t: gaussian(&shape, rng), t: 0, condition: condition.clone() };
    for t in (0..s.steps()).rev() {
        state.t = t;
        let eps_hat = denoiser.predict(&state.x_t, &state.condition, &vec![t; n])?;
        if eps_hat.shape() != shape {
            return Err(Error::Config(format!(
                "denoiser returned {:?} for a sample of shape {shape:?}",
                eps_hat.shape()
            )));
        }
        let z = if t > 0 { gaussian(&shape, rng) } else { Tensor::zeros(shape.to_vec()) };
        state.x_t = p_sample(rule, &state, &eps_hat, s, &z)?;
    }
    Ok(state.x_t.map(|v| v.clamp(-1.0, 1.0)))
}

/// `n` steps drawn uniformly from `0..steps`.
pub fn sample_timesteps(n: usize, steps: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..steps)).collect()
}
