//! Transformer decomposition network: splits an image into a 3-channel
//! reflectance and a 1-channel illumination map, plus the losses that train it.

mod blocks;
pub mod loss;

pub use blocks::{DepthwiseFfn, Mdla, Modulation, TdnBlock, HEAD_KERNELS};
pub use loss::{
    illumination_smoothness_loss, reconstruction_loss, reflectance_consistency_loss, total_decomposition_loss,
    DecompVars, DecompositionLossWeights, DecompositionLosses,
};

use dr_autograd::{cat, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::nn::{Bound, Builder, Conv2d, ConvTranspose2x2, ParamSpec, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdnDescriptor {
    /// Width of the shared embedding and of the first encoder level.
    pub embed_channels: usize,
    /// Encoder (and decoder) levels; each halves the resolution and doubles the width.
    pub stages: usize,
    pub blocks_per_stage: usize,
    /// Attention heads per level, `stages + 1` entries (the last is the bottleneck).
    pub heads: Vec<usize>,
}

impl Default for TdnDescriptor {
    fn default() -> Self {
        Self { embed_channels: 16, stages: 3, blocks_per_stage: 2, heads: vec![1, 2, 4, 8] }
    }
}

impl TdnDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.embed_channels == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("TDN widths and block counts must be positive".into()));
        }
        if self.heads.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "TDN with {} stages needs {} head counts, got {}",
                self.stages,
                self.stages + 1,
                self.heads.len()
            )));
        }
        for (level, &h) in self.heads.iter().enumerate() {
            let c = self.channels_at(level);
            if h == 0 || !c.is_multiple_of(h) {
                return Err(Error::Config(format!("level {level}: {c} channels not divisible by {h} heads")));
            }
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.embed_channels << level
    }

    /// Input sides must be multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << self.stages
    }
}

/// Layer structure derived from a descriptor.
pub struct TdnNet {
    embed: Conv2d,
    encoders: Vec<Vec<TdnBlock>>,
    downs: Vec<Conv2d>,
    bottleneck: Vec<TdnBlock>,
    ups: Vec<ConvTranspose2x2>,
    reduces: Vec<Conv2d>,
    decoders: Vec<Vec<TdnBlock>>,
    to_reflectance: Conv2d,
    illumination: Vec<Conv2d>,
    factor: usize,
}

impl TdnNet {
    pub fn new(desc: &TdnDescriptor, b: &Builder) -> Result<Self> {
        desc.validate()?;
        let c = desc.embed_channels;
        let blocks = |b: &Builder, level: usize| -> Result<Vec<TdnBlock>> {
            (0..desc.blocks_per_stage)
                .map(|i| TdnBlock::new(&b.pp(i), desc.channels_at(level), desc.heads[level]))
                .collect()
        };
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for l in 0..desc.stages {
            let ch = desc.channels_at(l);
            encoders.push(blocks(&b.pp(format!("enc{l}")), l)?);
            downs.push(Conv2d::new(&b.pp(format!("down{l}")), ch, 2 * ch, 3, 2));
            ups.push(ConvTranspose2x2::new(&b.pp(format!("up{l}")), 2 * ch, ch));
            reduces.push(Conv2d::new(&b.pp(format!("reduce{l}")), 2 * ch, ch, 1, 1));
            decoders.push(blocks(&b.pp(format!("dec{l}")), l)?);
        }
        let ib = b.pp("illum");
        Ok(Self {
            embed: Conv2d::new(&b.pp("embed"), 3, c, 3, 1),
            encoders,
            downs,
            bottleneck: blocks(&b.pp("bottleneck"), desc.stages)?,
            ups,
            reduces,
            decoders,
            to_reflectance: Conv2d::new(&b.pp("to_reflectance"), c, 3, 3, 1),
            illumination: vec![
                Conv2d::new(&ib.pp(0), c, c, 3, 1),
                Conv2d::new(&ib.pp(1), c, c, 3, 1),
                Conv2d::new(&ib.pp(2), c, 1, 3, 1),
            ],
            factor: desc.downsampling_factor(),
        })
    }

    /// `x`: `[N, 3, H, W]` with `H`, `W` multiples of the downsampling factor.
    /// Returns `(reflectance [N,3,H,W], illumination [N,1,H,W])`.
    pub fn forward(&self, p: &Bound, x: &Var) -> Result<(Var, Var)> {
        match *x.shape() {
            [_, 3, h, w] if h % self.factor == 0 && w % self.factor == 0 => {}
            [_, 3, _, _] => {
                return Err(Error::Input(format!(
                    "TDN input sides must be multiples of {}, got {:?}",
                    self.factor,
                    x.shape()
                )))
            }
            _ => return Err(Error::Input(format!("TDN expects [N, 3, H, W], got {:?}", x.shape()))),
        }
        let f0 = self.embed.forward(p, x)?;

        let mut skips = Vec::new();
        let mut f = f0.clone();
        for (blocks, down) in self.encoders.iter().zip(&self.downs) {
            for blk in blocks {
                f = blk.forward(p, &f)?;
            }
            skips.push(f.clone());
            f = down.forward(p, &f)?;
        }
        for blk in &self.bottleneck {
            f = blk.forward(p, &f)?;
        }
        for l in (0..self.decoders.len()).rev() {
            let up = self.ups[l].forward(p, &f)?;
            f = self.reduces[l].forward(p, &cat(&[&up, &skips[l]], 1)?)?;
            for blk in &self.decoders[l] {
                f = blk.forward(p, &f)?;
            }
        }
        let reflectance = self.to_reflectance.forward(p, &f)?.sigmoid();

        let mut g = f0;
        let last = self.illumination.len() - 1;
        for (i, conv) in self.illumination.iter().enumerate() {
            g = conv.forward(p, &g)?;
            if i < last {
                g = g.gelu();
            }
        }
        Ok((reflectance, g.sigmoid()))
    }
}

/// Trainable TDN weights together with the descriptor that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct TdnParams {
    descriptor: TdnDescriptor,
    store: ParamStore,
}

impl TdnParams {
    pub fn specs(desc: &TdnDescriptor) -> Result<Vec<ParamSpec>> {
        let b = Builder::new();
        TdnNet::new(desc, &b)?;
        Ok(b.specs())
    }

    pub fn init(desc: TdnDescriptor, seed: u64) -> Result<Self> {
        let store = ParamStore::init(&Self::specs(&desc)?, seed);
        Ok(Self { descriptor: desc, store })
    }

    pub fn from_parts(desc: TdnDescriptor, store: ParamStore) -> Result<Self> {
        store.validate(&Self::specs(&desc)?)?;
        Ok(Self { descriptor: desc, store })
    }

    pub fn descriptor(&self) -> &TdnDescriptor {
        &self.descriptor
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> TdnNet {
        TdnNet::new(&self.descriptor, &Builder::new()).expect("descriptor validated at construction")
    }
}

/// Reflectance and illumination of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RetinexDecomposition {
    pub reflectance: ImageTensor,
    pub illumination: ImageTensor,
}

impl RetinexDecomposition {
    pub fn new(reflectance: ImageTensor, illumination: ImageTensor) -> Result<Self> {
        if reflectance.channels() != 3 || illumination.channels() != 1 || !reflectance.same_size(&illumination) {
            return Err(Error::Input(format!(
                "decomposition needs HxWx3 reflectance and HxWx1 illumination, got {:?} and {:?}",
                reflectance.dims(),
                illumination.dims()
            )));
        }
        Ok(Self { reflectance, illumination })
    }

    /// `R · L` with `L` broadcast over the colour channels.
    pub fn recompose(&self) -> ImageTensor {
        self.reflectance.mul_broadcast(&self.illumination).expect("validated shapes")
    }

    pub fn to_vars(&self) -> DecompVars {
        DecompVars { reflectance: self.reflectance.to_var(), illumination: self.illumination.to_var() }
    }
}

/// Decomposes an `[N, 3, H, W]` batch of any size, reflect-padding to the
/// downsampling factor and cropping back.
pub fn decompose_batch(x: &Tensor, params: &TdnParams) -> Result<(Tensor, Tensor)> {
    let images = ImageTensor::unstack(x)?;
    let mut rs = Vec::with_capacity(images.len());
    let mut ls = Vec::with_capacity(images.len());
    let (h, w, _) = images.first().ok_or_else(|| Error::Input("empty batch".into()))?.dims();
    let f = params.descriptor.downsampling_factor();
    let (ph, pw) = ((f - h % f) % f, (f - w % f) % f);
    let padded: Vec<ImageTensor> =
        if ph + pw == 0 { images } else { images.iter().map(|i| i.reflect_pad(ph, pw)).collect::<Result<_>>()? };
    let (r, l) = params.net().forward(&params.store.bind(), &Var::constant(ImageTensor::stack(&padded)?))?;
    for (r, l) in ImageTensor::unstack(r.value())?.into_iter().zip(ImageTensor::unstack(l.value())?) {
        rs.push(r.crop(0, 0, h, w)?);
        ls.push(l.crop(0, 0, h, w)?);
    }
    Ok((ImageTensor::stack(&rs)?, ImageTensor::stack(&ls)?))
}

pub fn decompose(image: &ImageTensor, params: &TdnParams) -> Result<RetinexDecomposition> {
    if image.channels() != 3 {
        return Err(Error::Input(format!("decompose needs a 3-channel image, got {}", image.channels())));
    }
    let (r, l) = decompose_batch(&image.to_tensor(), params)?;
    RetinexDecomposition::new(ImageTensor::from_tensor(&r)?, ImageTensor::from_tensor(&l)?)
}
