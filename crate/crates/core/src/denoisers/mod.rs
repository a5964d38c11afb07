//! Trainable networks of the diffusion stage: the conditional noise predictor
//! `ε_θ(x_t, I_c, t)` and the consistency network `ε_c(x̃0, t)` that refines
//! the per-step clean estimate.

mod refiner;
mod time;
mod unet;

pub use refiner::{ChannelAttentionRefiner, RefinerDescriptor};
pub use time::{sinusoidal_embedding, TimeMlp};
pub use unet::{UNet, UNetDescriptor};

use dr_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::nn::{Bound, Builder, ParamSpec, ParamStore};
use crate::{Error, Result};

/// Noise-predictor weights and their descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    descriptor: UNetDescriptor,
    store: ParamStore,
}

impl DenoiserParams {
    pub fn specs(desc: &UNetDescriptor) -> Result<Vec<ParamSpec>> {
        let b = Builder::new();
        UNet::new(desc, &b)?;
        Ok(b.specs())
    }

    pub fn init(desc: UNetDescriptor, seed: u64) -> Result<Self> {
        if desc.condition_channels != desc.target_channels {
            return Err(Error::Config(format!(
                "a denoiser is conditioned on a map with its own channel count ({} vs {})",
                desc.condition_channels, desc.target_channels
            )));
        }
        let store = ParamStore::init(&Self::specs(&desc)?, seed);
        Ok(Self { descriptor: desc, store })
    }

    pub fn from_parts(desc: UNetDescriptor, store: ParamStore) -> Result<Self> {
        store.validate(&Self::specs(&desc)?)?;
        Ok(Self { descriptor: desc, store })
    }

    pub fn descriptor(&self) -> &UNetDescriptor {
        &self.descriptor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> UNet {
        UNet::new(&self.descriptor, &Builder::new()).expect("descriptor validated at construction")
    }
}

/// Which consistency network to build, with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsistencyDescriptor {
    ChannelAttention(RefinerDescriptor),
    Unet(UNetDescriptor),
}

impl ConsistencyDescriptor {
    pub fn target_channels(&self) -> usize {
        match self {
            Self::ChannelAttention(d) => d.target_channels,
            Self::Unet(d) => d.target_channels,
        }
    }

    pub fn downsampling_factor(&self) -> usize {
        match self {
            Self::ChannelAttention(_) => 1,
            Self::Unet(d) => d.downsampling_factor(),
        }
    }
}

/// A consistency network: maps a clamped clean estimate and its step to a
/// refined estimate of the same shape.
pub trait ConsistencyNet {
    fn refine(&self, p: &Bound, x0_est: &Var, t: &[usize]) -> Result<Var>;
}

impl ConsistencyNet for ChannelAttentionRefiner {
    fn refine(&self, p: &Bound, x0_est: &Var, t: &[usize]) -> Result<Var> {
        self.forward(p, x0_est, t)
    }
}

/// Unconditioned U-Net used as a residual corrector.
struct UNetRefiner(UNet);

impl ConsistencyNet for UNetRefiner {
    fn refine(&self, p: &Bound, x0_est: &Var, t: &[usize]) -> Result<Var> {
        Ok(self.0.forward(p, x0_est, None, t)?.add(x0_est)?)
    }
}

pub fn build_consistency(desc: &ConsistencyDescriptor, b: &Builder) -> Result<Box<dyn ConsistencyNet>> {
    Ok(match desc {
        ConsistencyDescriptor::ChannelAttention(d) => Box::new(ChannelAttentionRefiner::new(d, b)?),
        ConsistencyDescriptor::Unet(d) => {
            if d.condition_channels != 0 {
                return Err(Error::Config("the U-Net consistency network takes no condition".into()));
            }
            Box::new(UNetRefiner(UNet::new(d, b)?))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyParams {
    descriptor: ConsistencyDescriptor,
    store: ParamStore,
}

impl ConsistencyParams {
    pub fn specs(desc: &ConsistencyDescriptor) -> Result<Vec<ParamSpec>> {
        let b = Builder::new();
        build_consistency(desc, &b)?;
        Ok(b.specs())
    }

    pub fn init(desc: ConsistencyDescriptor, seed: u64) -> Result<Self> {
        let store = ParamStore::init(&Self::specs(&desc)?, seed);
        Ok(Self { descriptor: desc, store })
    }

    pub fn from_parts(desc: ConsistencyDescriptor, store: ParamStore) -> Result<Self> {
        store.validate(&Self::specs(&desc)?)?;
        Ok(Self { descriptor: desc, store })
    }

    pub fn descriptor(&self) -> &ConsistencyDescriptor {
        &self.descriptor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> Box<dyn ConsistencyNet> {
        build_consistency(&self.descriptor, &Builder::new()).expect("descriptor validated at construction")
    }
}

/// `ε_θ(x_t, condition, t)` on `[N, C, H, W]` batches, one step per element.
pub fn predict_noise(x_t: &Tensor, condition: &Tensor, t: &[usize], params: &DenoiserParams) -> Result<Tensor> {
    let out = params.net().forward(
        &params.store.bind(),
        &Var::constant(x_t.clone()),
        Some(&Var::constant(condition.clone())),
        t,
    )?;
    Ok(out.value().clone())
}

/// `ε_c(x̃0, t)` on a `[N, C, H, W]` batch.
pub fn refine_x0(x0_est: &Tensor, t: &[usize], params: &ConsistencyParams) -> Result<Tensor> {
    let out = params.net().refine(&params.store.bind(), &Var::constant(x0_est.clone()), t)?;
    Ok(out.value().clone())
}

/// A trained noise predictor bound once for repeated inference.
pub struct Denoiser {
    net: UNet,
    bound: Bound,
    target: usize,
}

impl Denoiser {
    pub fn new(params: &DenoiserParams) -> Self {
        Self { net: params.net(), bound: params.store.bind(), target: params.descriptor.target_channels }
    }
}

impl NoisePredictor for Denoiser {
    fn target_channels(&self) -> usize {
        self.target
    }

    fn predict(&self, x_t: &Tensor, condition: &Tensor, t: &[usize]) -> Result<Tensor> {
        let out =
            self.net.forward(&self.bound, &Var::constant(x_t.clone()), Some(&Var::constant(condition.clone())), t)?;
        Ok(out.value().clone())
    }
}
