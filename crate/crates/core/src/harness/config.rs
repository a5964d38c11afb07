//! Training configuration: a versioned JSON document with desk and paper
//! profiles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::denoisers::{ConsistencyDescriptor, RefinerDescriptor, UNetDescriptor};
use crate::diffusion::{noise_loss_norms, posterior_mean_rules, ScheduleConfig};
use crate::tdn::{DecompositionLossWeights, TdnDescriptor};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable consulted when neither the command line nor the
/// config sets a seed.
pub const SEED_ENV: &str = "DIFFRETINEX_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Tdn,
    Rda,
    Ida,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tdn => "tdn",
            Stage::Rda => "rda",
            Stage::Ida => "ida",
        }
    }

    /// Channels of the map a diffusion stage generates.
    pub fn map_channels(self) -> Option<usize> {
        match self {
            Stage::Tdn => None,
            Stage::Rda => Some(3),
            Stage::Ida => Some(1),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tdn" => Ok(Stage::Tdn),
            "rda" => Ok(Stage::Rda),
            "ida" => Ok(Stage::Ida),
            _ => Err(Error::Config(format!("unknown stage {s:?} (expected tdn, rda or ida)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory; samples `0..train` train, the next `test` evaluate.
    Synthetic { synth: SynthConfig, train: usize, test: usize },
    /// `<root>/low` and `<root>/high`; every pair is used for training.
    PairedDir { root: PathBuf },
}

/// Networks of one diffusion path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionModels {
    pub denoiser: UNetDescriptor,
    pub consistency: ConsistencyDescriptor,
}

impl DiffusionModels {
    pub fn rda(base_channels: usize) -> Self {
        Self {
            denoiser: UNetDescriptor::denoiser(3, base_channels),
            consistency: ConsistencyDescriptor::ChannelAttention(RefinerDescriptor {
                target_channels: 3,
                channels: base_channels,
                blocks: 2,
                heads: 1,
                time_dim: 64,
            }),
        }
    }

    pub fn ida(base_channels: usize) -> Self {
        let mut consistency = UNetDescriptor::denoiser(1, base_channels / 2);
        consistency.condition_channels = 0;
        consistency.attention_lowest = false;
        Self {
            denoiser: UNetDescriptor::denoiser(1, base_channels),
            consistency: ConsistencyDescriptor::Unet(consistency),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub stage: Stage,
    pub seed: Option<u64>,
    pub data: DataSource,
    pub tdn: TdnDescriptor,
    pub loss_weights: DecompositionLossWeights,
    pub rda: DiffusionModels,
    pub ida: DiffusionModels,
    pub schedule: ScheduleConfig,
    /// Name in the posterior-mean registry.
    pub posterior_mean: String,
    /// Name in the noise-loss registry.
    pub noise_loss: String,
    pub gamma_ct: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub iterations: usize,
    /// Save an intermediate checkpoint every this many iterations; 0 saves
    /// only the final one.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub output_dir: PathBuf,
    /// Required by the diffusion stages.
    pub tdn_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(Stage::Tdn)
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 48-pixel patches, 5,000 decomposition or 20,000
    /// diffusion iterations, 100 diffusion steps.
    pub fn desk(stage: Stage) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stage,
            seed: None,
            data: DataSource::Synthetic { synth: SynthConfig::default(), train: 500, test: 50 },
            tdn: TdnDescriptor::default(),
            loss_weights: DecompositionLossWeights::default(),
            rda: DiffusionModels::rda(32),
            ida: DiffusionModels::ida(32),
            schedule: ScheduleConfig::linear(100, 1e-3, 0.2),
            // short training leaves noise estimates too rough for the
            // unclamped chain over an aggressive 100-step schedule
            posterior_mean: "clipped".into(),
            noise_loss: "l1".into(),
            gamma_ct: 1.0,
            learning_rate: 1e-4,
            batch_size: 16,
            patch_size: 48,
            iterations: if stage == Stage::Tdn { 5_000 } else { 20_000 },
            checkpoint_every: 0,
            log_every: 100,
            output_dir: PathBuf::from("runs"),
            tdn_checkpoint: None,
        }
    }

    /// Paper-scale settings: 160-pixel patches, 1,000 steps, 800K iterations.
    /// Long-running and not validated at desk scale.
    pub fn paper(stage: Stage) -> Self {
        Self {
            schedule: ScheduleConfig::linear(1000, 1e-4, 0.02),
            rda: DiffusionModels::rda(64),
            ida: DiffusionModels::ida(64),
            tdn: TdnDescriptor { embed_channels: 32, ..TdnDescriptor::default() },
            posterior_mean: "standard".into(),
            patch_size: 160,
            iterations: 800_000,
            checkpoint_every: 10_000,
            data: DataSource::Synthetic {
                synth: SynthConfig { patch_size: 160, illumination_scale: 80.0, ..SynthConfig::default() },
                train: 500,
                test: 50,
            },
            ..Self::desk(stage)
        }
    }

    pub fn profile(name: &str, stage: Stage) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(stage)),
            "paper" => Ok(Self::paper(stage)),
            _ => Err(Error::Config(format!("unknown profile {name:?} (expected desk or paper)"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The seed in force: the command line, then the config, then
    /// `DIFFRETINEX_SEED`, then 0.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        Ok(self.explicit_seed(cli)?.unwrap_or(0))
    }

    /// Like [`TrainConfig::resolve_seed`] without the final default.
    pub fn explicit_seed(&self, cli: Option<u64>) -> Result<Option<u64>> {
        if let Some(s) = cli.or(self.seed) {
            return Ok(Some(s));
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(None),
        }
    }

    pub fn models(&self, stage: Stage) -> Option<&DiffusionModels> {
        match stage {
            Stage::Tdn => None,
            Stage::Rda => Some(&self.rda),
            Stage::Ida => Some(&self.ida),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.patch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return bad("batch_size, patch_size, iterations and log_every must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if let DataSource::Synthetic { synth, train, .. } = &self.data {
            synth.validate()?;
            if *train == 0 {
                return bad("synthetic data needs at least one training sample".into());
            }
            if synth.patch_size < self.patch_size {
                return bad(format!(
                    "patch_size {} exceeds the synthetic sample size {}",
                    self.patch_size, synth.patch_size
                ));
            }
        }
        match self.stage {
            Stage::Tdn => {
                self.tdn.validate()?;
                self.loss_weights.validate()?;
                let f = self.tdn.downsampling_factor();
                if !self.patch_size.is_multiple_of(f) {
                    return bad(format!("patch_size {} must be a multiple of {f}", self.patch_size));
                }
            }
            stage => {
                let models = self.models(stage).expect("diffusion stage");
                let c = stage.map_channels().expect("diffusion stage");
                models.denoiser.validate()?;
                if models.denoiser.target_channels != c || models.consistency.target_channels() != c {
                    return bad(format!("{} networks must produce {c}-channel maps", stage.name()));
                }
                let f = models.denoiser.downsampling_factor().max(models.consistency.downsampling_factor());
                if !self.patch_size.is_multiple_of(f) {
                    return bad(format!("patch_size {} must be a multiple of {f}", self.patch_size));
                }
                if self.tdn_checkpoint.is_none() {
                    return bad(format!("stage {} needs tdn_checkpoint", stage.name()));
                }
                if !(self.gamma_ct.is_finite() && self.gamma_ct >= 0.0) {
                    return bad(format!("gamma_ct {} must be non-negative", self.gamma_ct));
                }
                self.schedule.build()?;
                posterior_mean_rules().get(&self.posterior_mean)?;
                noise_loss_norms().get(&self.noise_loss)?;
            }
        }
        Ok(())
    }
}
