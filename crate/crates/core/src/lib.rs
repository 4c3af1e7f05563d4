//! Differentiable color + language Gaussian splatting.
//!
//! A scene is a cloud of anisotropic 3D Gaussians carrying an RGB color, a
//! language feature vector, a color opacity and a separate semantic
//! indicator. The rasterizer composites the two modalities in one pass with
//! independent transmittance chains, after a per-Gaussian attention layer
//! fuses color and language channels. Training adds a camera-view blending
//! regularizer that renders interpolated poses against mixed ground truth.

pub mod augment;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod projection;
pub mod query;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod testing;
pub mod train;

pub use error::{Error, Result};
