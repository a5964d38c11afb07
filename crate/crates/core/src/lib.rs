//! Diff-Retinex: low-light enhancement by Retinex decomposition followed by
//! conditional diffusion adjustment of the reflectance and illumination maps.
//!
//! The pipeline has three detachable stages: [`tdn`] decomposes an image into
//! reflectance and illumination, then two conditional diffusion models
//! ([`diffusion`] with the networks in [`denoisers`]) regenerate normal-light
//! versions of each map, and [`pipeline`] recomposes them.

pub mod data;
pub mod denoisers;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod registry;
pub mod tdn;

pub use error::{Error, Result};
pub use image::ImageTensor;
