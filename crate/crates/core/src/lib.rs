//! Uncertainty-aware differentiable volume rendering.
//!
//! The scene is an explicit voxel grid of Gaussian parameters ([`field`]).
//! Rays are stratified and alpha-composited ([`render`]); the per-sample
//! Gaussians are pushed through the compositing as (mean, variance) pairs and
//! scored with heteroscedastic negative log-likelihoods ([`uncertainty`]).
//! [`optim`] trains the grid with Adam, [`oracle`] holds the Monte Carlo and
//! finite-difference checks, [`data`] builds procedural scenes and camera rigs
//! and [`metrics`] scores rendered views.

pub mod data;
pub mod error;
pub mod field;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod render;
pub mod uncertainty;

pub use error::{Error, Result};
pub use field::{FieldSample, FieldSampleGrad, UncertainField, SIGMA_FLOOR};
pub use render::{Camera, Ray, RaySampleBatch, RenderOutput};
pub use uncertainty::{GaussianMoment, LossMode};
