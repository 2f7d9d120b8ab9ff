//! Theme-aware 3D-to-3D generation.
//!
//! A theme-driven diffusion model produces concept images from a handful of
//! exemplar meshes (Stage I); a voxel radiance field initialised from a concept
//! image is then refined by dual score distillation, which applies a concept
//! prior at high noise levels and a reference prior at low noise levels
//! (Stage II).
//!
//! Module map:
//! - [`geometry`]: meshes, voxel radiance fields, cameras, isosurface export.
//! - [`render`]: mesh rasterizer and the differentiable volume renderer.
//! - [`diffusion`]: schedules, denoiser backends, fine-tuning and sampling.
//! - [`distill`]: SDS / VSD / concept / reference / DSD gradient estimators.
//! - [`pipeline`]: Stage I and Stage II orchestration with regularizers.
//! - [`metrics`]: evaluation metrics with pluggable learned components.

// Index loops mirror the tensor algebra; `!(x > 0.0)` style checks are
// deliberate so that NaN fails validation.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod image;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod rng;

pub use error::{Error, Result};
pub use image::Image;
pub use math::Vec3;
