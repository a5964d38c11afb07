//! Decomposition losses. Every `‖·‖₁` is a mean absolute value over all
//! elements, and `R·L` broadcasts the 1-channel `L` over `R`'s channels.

use dr_autograd::Var;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionLossWeights {
    pub gamma_rc: f64,
    pub gamma_sm: f64,
    pub alpha_rec: f64,
    pub crs_weight: f64,
    pub smooth_c: f64,
}

impl Default for DecompositionLossWeights {
    fn default() -> Self {
        Self { gamma_rc: 0.1, gamma_sm: 0.1, alpha_rec: 0.3, crs_weight: 0.1, smooth_c: 10.0 }
    }
}

impl DecompositionLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma_rc, self.gamma_sm, self.alpha_rec, self.crs_weight, self.smooth_c];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Reflectance `[N,3,H,W]` and illumination `[N,1,H,W]` as autograd values.
#[derive(Clone, Debug)]
pub struct DecompVars {
    pub reflectance: Var,
    pub illumination: Var,
}

impl DecompVars {
    fn recompose(&self) -> Result<Var> {
        Ok(self.reflectance.mul_bcast(&self.illumination)?)
    }
}

fn same_shape(a: &Var, b: &Var, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Input(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_pair(d: &DecompVars, i: &Var) -> Result<()> {
    same_shape(&d.reflectance, i, "reflectance vs image")?;
    match (d.illumination.shape(), i.shape()) {
        ([n, 1, h, w], [n2, _, h2, w2]) if (n, h, w) == (n2, h2, w2) => Ok(()),
        (l, i) => Err(Error::Input(format!("illumination {l:?} does not match image {i:?}"))),
    }
}

fn l1(a: &Var, b: &Var) -> Result<Var> {
    Ok(a.sub(b)?.abs().mean())
}

/// `‖RₙLₙ − Iₙ‖₁ + α_rec‖RₗLₗ − Iₗ‖₁ + crs·(‖RₙLₗ − Iₗ‖₁ + ‖RₗLₙ − Iₙ‖₁)`.
pub fn reconstruction_loss(
    low: &DecompVars,
    normal: &DecompVars,
    i_low: &Var,
    i_normal: &Var,
    w: &DecompositionLossWeights,
) -> Result<Var> {
    check_pair(low, i_low)?;
    check_pair(normal, i_normal)?;
    same_shape(i_low, i_normal, "low vs normal image")?;
    let normal_term = l1(&normal.recompose()?, i_normal)?;
    let low_term = l1(&low.recompose()?, i_low)?;
    let cross_low = l1(&normal.reflectance.mul_bcast(&low.illumination)?, i_low)?;
    let cross_normal = l1(&low.reflectance.mul_bcast(&normal.illumination)?, i_normal)?;
    let crs = cross_low.add(&cross_normal)?.scale(w.crs_weight);
    Ok(normal_term.add(&low_term.scale(w.alpha_rec))?.add(&crs)?)
}

/// `‖Rₙ − Rₗ‖₁`.
pub fn reflectance_consistency_loss(r_low: &Var, r_normal: &Var) -> Result<Var> {
    same_shape(r_low, r_normal, "reflectance consistency")?;
    l1(r_normal, r_low)
}

fn luminance(i: &Var) -> Result<Var> {
    let c = i.shape()[1];
    if c == 1 {
        return Ok(i.clone());
    }
    let mut acc = i.narrow(1, 0, 1)?;
    for ch in 1..c {
        acc = acc.add(&i.narrow(1, ch, 1)?)?;
    }
    Ok(acc.scale(1.0 / c as f64))
}

fn smoothness_one(l: &Var, i: &Var, c: f64) -> Result<Var> {
    if l.shape().len() != 4 || l.shape()[1] != 1 {
        return Err(Error::Input(format!("illumination must be [N,1,H,W], got {:?}", l.shape())));
    }
    let lum = luminance(i)?;
    same_shape(l, &lum, "illumination vs guidance")?;
    let mut total: Option<Var> = None;
    for axis in [2, 3] {
        let weight = lum.forward_diff(axis)?.abs().scale(-c).exp();
        let term = weight.mul(&l.forward_diff(axis)?.abs())?.mean();
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("two axes"))
}

/// Gradient of `L` weighted by `exp(−c·|∇I|)` of the channel-mean guidance,
/// over both axes and both exposures.
pub fn illumination_smoothness_loss(l_low: &Var, l_normal: &Var, i_low: &Var, i_normal: &Var, c: f64) -> Result<Var> {
    Ok(smoothness_one(l_low, i_low, c)?.add(&smoothness_one(l_normal, i_normal, c)?)?)
}

pub struct DecompositionLosses {
    pub reconstruction: Var,
    pub consistency: Var,
    pub smoothness: Var,
    pub total: Var,
}

/// `L_rec + γ_rc·L_rc + γ_sm·L_smooth`.
pub fn total_decomposition_loss(
    low: &DecompVars,
    normal: &DecompVars,
    i_low: &Var,
    i_normal: &Var,
    w: &DecompositionLossWeights,
) -> Result<DecompositionLosses> {
    let reconstruction = reconstruction_loss(low, normal, i_low, i_normal, w)?;
    let consistency = reflectance_consistency_loss(&low.reflectance, &normal.reflectance)?;
    let smoothness =
        illumination_smoothness_loss(&low.illumination, &normal.illumination, i_low, i_normal, w.smooth_c)?;
    let total = reconstruction.add(&consistency.scale(w.gamma_rc))?.add(&smoothness.scale(w.gamma_sm))?;
    Ok(DecompositionLosses { reconstruction, consistency, smoothness, total })
}
