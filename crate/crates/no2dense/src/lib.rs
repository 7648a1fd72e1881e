//! Dense ground-level NO2 estimation from multi-band satellite raster
//! stacks with sparse point annotations.
//!
//! The toolkit trains dual-head convolutional models (a UNet and a
//! skip-free autoencoder variant) on 128x128 windows cut from 200x200
//! scenes with uniformly random offsets, so the single annotated pixel per
//! scene is spread evenly over a central PxP prediction area. Trained
//! models run tiled dense inference over large rasters, emitting a PxP
//! patch per forward pass, with a point-wise per-pixel baseline for
//! comparison.

pub mod datamodel;
pub mod error;
pub mod evaluator;
pub mod loss;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
