//! Analysis-by-synthesis fitting of a linear morphable face model with
//! spherical-harmonics lighting, plus de-lighting, de-makeup by appearance
//! subspace projection, UV unwarping and image quality metrics.
//!
//! Pixel and texel math is done in linear intensity throughout. PNG bytes
//! map to values by a plain `/255` with no transfer curve.

// `!(x <= tol)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the per-channel and per-basis formulas.
#![allow(clippy::needless_range_loop)]

pub mod bare_skin;
pub mod error;
pub mod fitting;
pub mod image;
pub mod metrics;
pub mod model_io;
pub mod morphable_model;
pub mod pipeline;
pub mod rasterizer;
pub mod shading;
pub mod synth;
pub mod uv;

pub use error::{Error, Result};
pub use fitting::{FitConfig, FitResult, LossToggles, MaskMode};
pub use image::{Grid, Image, Mask};
pub use morphable_model::{CoefficientVector, MeshTopology, MorphableModel};
pub use rasterizer::{Camera, RenderOutput, Scene};
pub use shading::LightingCoefficients;
pub use uv::UvTexture;

/// Three-component vector used for positions, normals and RGB values.
pub type Vec3 = nalgebra::Vector3<f64>;
