use std::sync::{Arc, LazyLock};

use serde::{Deserialize, Serialize};

use crate::registry::Registry;
use crate::{Error, Result};

/// Per-step tables of a variance-preserving forward process.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma2: Vec<f64>,
}

impl NoiseSchedule {
    /// Derives every table from `beta`; each entry must lie in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("a schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta values must lie in (0, 1), got {b}")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma2 = (0..beta.len())
            .map(|t| {
                let prev = if t == 0 { 1.0 } else { alpha_bar[t - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[t]) * beta[t]
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar, sigma2 })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Input(format!("step {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// `T` linearly spaced betas from `beta_start` to `beta_end`.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "linear schedule needs T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let beta =
        (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
    NoiseSchedule::from_betas(beta)
}

/// How a schedule is described in configs and archives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: String,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        Self { kind: "linear".into(), steps, beta_start, beta_end }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        schedules().get(&self.kind)?.build(self.steps, self.beta_start, self.beta_end)
    }
}

pub trait ScheduleFamily: Send + Sync {
    fn build(&self, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule>;
}

struct Linear;

impl ScheduleFamily for Linear {
    fn build(&self, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        make_linear_schedule(steps, beta_start, beta_end)
    }
}

/// Schedule families by name.
pub fn schedules() -> &'static Registry<dyn ScheduleFamily> {
    static R: LazyLock<Registry<dyn ScheduleFamily>> = LazyLock::new(|| {
        let mut r: Registry<dyn ScheduleFamily> = Registry::new("noise schedule");
        r.register("linear", Arc::new(Linear));
        r
    });
    &R
}
