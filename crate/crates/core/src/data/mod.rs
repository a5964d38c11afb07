//! Paired low/normal-light data: PNG I/O, directory loading, the DDPM value
//! range convention and a synthetic generator with known decompositions.

mod io;
mod synth;

pub use io::{load_paired_dir, read_png, write_paired_dir, write_png};
pub use synth::{generate_synthetic, SynthConfig};

use crate::tdn::RetinexDecomposition;
use crate::{Error, ImageTensor, Result};

/// Known decompositions of both images of a synthetic pair. They share the
/// reflectance.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub low: RetinexDecomposition,
    pub normal: RetinexDecomposition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub low: ImageTensor,
    pub normal: ImageTensor,
    pub ground_truth: Option<GroundTruth>,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, low: ImageTensor, normal: ImageTensor) -> Result<Self> {
        let id = id.into();
        if low.dims() != normal.dims() {
            return Err(Error::Input(format!(
                "pair {id}: low {:?} and normal {:?} differ in shape",
                low.dims(),
                normal.dims()
            )));
        }
        Ok(Self { id, low, normal, ground_truth: None })
    }

    pub fn with_ground_truth(mut self, gt: GroundTruth) -> Result<Self> {
        if !gt.low.reflectance.same_size(&self.low) || !gt.normal.reflectance.same_size(&self.normal) {
            return Err(Error::Input(format!("pair {}: ground truth does not match the image size", self.id)));
        }
        self.ground_truth = Some(gt);
        Ok(self)
    }
}

/// `[0, 1] → [−1, 1]`.
pub fn to_model_range(x: &ImageTensor) -> ImageTensor {
    x.map(|v| 2.0 * v - 1.0)
}

/// `[−1, 1] → [0, 1]`.
pub fn from_model_range(x: &ImageTensor) -> ImageTensor {
    x.map(|v| (v + 1.0) * 0.5)
}
