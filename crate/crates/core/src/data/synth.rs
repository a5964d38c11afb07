use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, PairedSample};
use crate::tdn::RetinexDecomposition;
use crate::{Error, ImageTensor, Result};

/// Synthetic pair generator settings. Ranges are inclusive `[lo, hi]`;
/// `lo == hi` pins the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patch_size: usize,
    /// Lattice spacing of the illumination field in pixels.
    pub illumination_scale: f64,
    /// Exponent applied to the normal-light illumination.
    pub gamma_range: [f64; 2],
    /// Gain applied after the exponent.
    pub gain_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub texture_octaves: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patch_size: 48,
            illumination_scale: 24.0,
            gamma_range: [1.5, 2.5],
            gain_range: [0.15, 0.3],
            noise_sigma_range: [0.0, 0.02],
            texture_octaves: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, [lo, hi]: [f64; 2], min: f64, max: f64| {
            if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] must lie within [{min}, {max}] with lo <= hi")));
            }
            Ok(())
        };
        range("gamma_range", self.gamma_range, 1e-3, 10.0)?;
        range("gain_range", self.gain_range, 1e-3, 1.0)?;
        range("noise_sigma_range", self.noise_sigma_range, 0.0, 1.0)?;
        if self.patch_size < 2 {
            return Err(Error::Config(format!("patch_size {} must be at least 2", self.patch_size)));
        }
        if self.texture_octaves == 0 {
            return Err(Error::Config("texture_octaves must be positive".into()));
        }
        if !(self.illumination_scale.is_finite() && self.illumination_scale >= 1.0) {
            return Err(Error::Config(format!("illumination_scale {} must be >= 1", self.illumination_scale)));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Random lattice with `cell`-pixel spacing, smoothstep-interpolated to
/// `size × size`. Values in `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: f64) -> Vec<f64> {
    let n = (size as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Octave sum with halving amplitude, normalised back to `[0, 1]`.
fn texture(rng: &mut ChaCha8Rng, size: usize, octaves: usize) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let mut total = 0.0;
    for o in 0..octaves {
        let amp = 0.5f64.powi(o as i32);
        let cell = (size as f64 / 2f64.powi(o as i32 + 1)).max(1.0);
        for (a, v) in acc.iter_mut().zip(value_noise(rng, size, cell)) {
            *a += amp * v;
        }
        total += amp;
    }
    acc.iter().map(|a| (a / total).clamp(0.0, 1.0)).collect()
}

fn sample(config: &SynthConfig, index: u64) -> Result<PairedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let s = config.patch_size;

    let channels: Vec<Vec<f64>> = (0..3).map(|_| texture(&mut rng, s, config.texture_octaves)).collect();
    let r = ImageTensor::from_fn(s, s, 3, |y, x, c| 0.1 + 0.9 * channels[c][y * s + x])?;
    let field = value_noise(&mut rng, s, config.illumination_scale);
    let l_n = ImageTensor::new(s, s, 1, field.iter().map(|v| 0.5 + 0.5 * v).collect())?;

    let gamma = draw(&mut rng, config.gamma_range);
    let gain = draw(&mut rng, config.gain_range);
    let sigma = draw(&mut rng, config.noise_sigma_range);
    let l_l = l_n.map(|v| gain * v.powf(gamma));

    let normal = r.mul_broadcast(&l_n)?.map(|v| v.clamp(0.0, 1.0));
    let dark = r.mul_broadcast(&l_l)?;
    let low_data = dark
        .data()
        .iter()
        .map(|&v| {
            let n = if sigma == 0.0 { 0.0 } else { rng.sample::<f64, _>(StandardNormal) * sigma };
            (v + n).clamp(0.0, 1.0)
        })
        .collect();
    let low = ImageTensor::new(s, s, 3, low_data)?;
    PairedSample::new(format!("{index:05}"), low, normal)?.with_ground_truth(GroundTruth {
        low: RetinexDecomposition::new(r.clone(), l_l)?,
        normal: RetinexDecomposition::new(r, l_n)?,
    })
}

/// `n` synthetic pairs. Sample `i` depends only on the seed and `i`.
pub fn generate_synthetic(config: &SynthConfig, n: usize) -> Result<Vec<PairedSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("generate_synthetic needs n >= 1".into()));
    }
    (0..n as u64).map(|i| sample(config, i)).collect()
}
