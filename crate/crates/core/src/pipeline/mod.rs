//! Inference: decompose, adjust both maps by conditional sampling, recompose.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{from_model_range, to_model_range, write_png};
use crate::denoisers::{Denoiser, DenoiserParams};
use crate::diffusion::{sample_loop, NoiseSchedule, PosteriorMeanRule, StandardMean};
use crate::tdn::{decompose, RetinexDecomposition, TdnParams};
use crate::{Error, ImageTensor, Result};

/// RNG stream of the reflectance sampler.
pub const RDA_STREAM: u64 = 1;
/// RNG stream of the illumination sampler.
pub const IDA_STREAM: u64 = 2;
/// Lower bound of an adjusted illumination map.
pub const MIN_ILLUMINATION: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct EnhanceResult {
    pub enhanced: ImageTensor,
    pub adjusted_reflectance: ImageTensor,
    pub adjusted_illumination: ImageTensor,
    /// The decomposition used as guidance.
    pub decomposition: RetinexDecomposition,
    pub seed: u64,
}

/// Samples a map conditioned on `map`, padding to the denoiser's
/// downsampling factor. Works in `[0, 1]` on both ends.
fn adjust(
    map: &ImageTensor,
    denoiser: &DenoiserParams,
    s: &NoiseSchedule,
    rule: &dyn PosteriorMeanRule,
    seed: u64,
    stream: u64,
) -> Result<ImageTensor> {
    let c = denoiser.descriptor().target_channels;
    if map.channels() != c {
        return Err(Error::Input(format!("denoiser expects {c}-channel maps, got {}", map.channels())));
    }
    let (h, w, _) = map.dims();
    let f = denoiser.descriptor().downsampling_factor();
    let (ph, pw) = ((f - h % f) % f, (f - w % f) % f);
    let cond = to_model_range(&if ph + pw == 0 { map.clone() } else { map.reflect_pad(ph, pw)? });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let out = sample_loop(&cond.to_tensor(), &Denoiser::new(denoiser), s, rule, &mut rng)?;
    from_model_range(&ImageTensor::from_tensor(&out)?).crop(0, 0, h, w)
}

/// Reflectance adjustment; output is 3-channel in `[0, 1]`.
pub fn rda_adjust_with(
    r_tdn: &ImageTensor,
    denoiser: &DenoiserParams,
    s: &NoiseSchedule,
    rule: &dyn PosteriorMeanRule,
    seed: u64,
) -> Result<ImageTensor> {
    if r_tdn.channels() != 3 {
        return Err(Error::Input(format!("reflectance must have 3 channels, got {}", r_tdn.channels())));
    }
    adjust(r_tdn, denoiser, s, rule, seed, RDA_STREAM)
}

pub fn rda_adjust(r_tdn: &ImageTensor, denoiser: &DenoiserParams, s: &NoiseSchedule, seed: u64) -> Result<ImageTensor> {
    rda_adjust_with(r_tdn, denoiser, s, &StandardMean, seed)
}

/// Illumination adjustment; output is 1-channel in `[MIN_ILLUMINATION, 1]`.
pub fn ida_adjust_with(
    l_tdn: &ImageTensor,
    denoiser: &DenoiserParams,
    s: &NoiseSchedule,
    rule: &dyn PosteriorMeanRule,
    seed: u64,
) -> Result<ImageTensor> {
    if l_tdn.channels() != 1 {
        return Err(Error::Input(format!("illumination must have 1 channel, got {}", l_tdn.channels())));
    }
    Ok(adjust(l_tdn, denoiser, s, rule, seed, IDA_STREAM)?.map(|v| v.clamp(MIN_ILLUMINATION, 1.0)))
}

pub fn ida_adjust(l_tdn: &ImageTensor, denoiser: &DenoiserParams, s: &NoiseSchedule, seed: u64) -> Result<ImageTensor> {
    ida_adjust_with(l_tdn, denoiser, s, &StandardMean, seed)
}

/// The trained parts of the pipeline.
pub struct Models<'a> {
    pub tdn: &'a TdnParams,
    pub rda: &'a DenoiserParams,
    pub ida: &'a DenoiserParams,
    pub schedule_r: &'a NoiseSchedule,
    pub schedule_i: &'a NoiseSchedule,
    pub rule: &'a dyn PosteriorMeanRule,
}

pub fn enhance_with(low: &ImageTensor, models: &Models<'_>, seed: u64) -> Result<EnhanceResult> {
    if low.channels() != 3 {
        return Err(Error::Input(format!("enhance needs a 3-channel image, got {}", low.channels())));
    }
    let decomposition = decompose(low, models.tdn)?;
    let adjusted_reflectance =
        rda_adjust_with(&decomposition.reflectance, models.rda, models.schedule_r, models.rule, seed)?;
    let adjusted_illumination =
        ida_adjust_with(&decomposition.illumination, models.ida, models.schedule_i, models.rule, seed)?;
    let enhanced = adjusted_reflectance.mul_broadcast(&adjusted_illumination)?.map(|v| v.clamp(0.0, 1.0));
    Ok(EnhanceResult { enhanced, adjusted_reflectance, adjusted_illumination, decomposition, seed })
}

pub fn enhance(
    low: &ImageTensor,
    tdn: &TdnParams,
    rda: &DenoiserParams,
    ida: &DenoiserParams,
    s_r: &NoiseSchedule,
    s_i: &NoiseSchedule,
    seed: u64,
) -> Result<EnhanceResult> {
    let models = Models { tdn, rda, ida, schedule_r: s_r, schedule_i: s_i, rule: &StandardMean };
    enhance_with(low, &models, seed)
}

/// Writes `<stem>_{r_tdn,l_tdn,r_adj,l_adj}.png` into `dir`.
pub fn dump_intermediates(result: &EnhanceResult, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let maps = [
        ("r_tdn", &result.decomposition.reflectance),
        ("l_tdn", &result.decomposition.illumination),
        ("r_adj", &result.adjusted_reflectance),
        ("l_adj", &result.adjusted_illumination),
    ];
    maps.iter()
        .map(|(tag, img)| {
            let path = dir.join(format!("{stem}_{tag}.png"));
            write_png(&path, img)?;
            Ok(path)
        })
        .collect()
}
