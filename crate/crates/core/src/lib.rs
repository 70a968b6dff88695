//! Winding clearness error of point clouds, its analytic gradient with
//! respect to point coordinates, and gradient-based denoising built on it.
//!
//! The pipeline is:
//!
//! 1. [`system::assemble`] builds the dense winding system for a cloud and a
//!    fixed set of bounding-box samples,
//! 2. [`system::solve_surfels`] solves it for the surfels,
//! 3. [`system::winding_clearness`] reports the minimum objective value,
//! 4. [`grad::grad_wce`] differentiates that value with respect to the points,
//! 5. [`optimize::denoise`] runs Adam on the penalized loss.

pub mod cloud;
pub mod config;
pub mod error;
pub mod grad;
pub mod io;
pub mod kernel;
pub mod metrics;
pub mod optimize;
pub mod rng;
pub mod system;

pub use cloud::{
    add_gaussian_noise, normalize_cloud, sample_bounding_box, sample_circle, sample_rectangle,
    sample_sphere, BoxSamples, NormalizeTransform, PointCloud,
};
pub use config::WindingConfig;
pub use metrics::MetricsReport;
pub use optimize::{denoise, denoise_batched, DenoiseConfig, DenoiseOutput, DenoiseTrace};
pub use error::{Error, Result};
pub use rng::RngStream;
pub use system::{
    assemble, field_grid, sample_box_for, set_threads, solve_surfels, winding_clearness, winding_field,
    AssembledSystem, FieldGrid, Surfels, WceReport,
};
