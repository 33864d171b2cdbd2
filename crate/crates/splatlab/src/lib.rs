//! Desk-scale differentiable 3D Gaussian splatting with teacher-student
//! training, an extrapolator-composed photometric loss, and a synthetic
//! scene harness with exact ground truth.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rasterizer;
pub mod scenes;
pub mod splat;
pub mod trainer;

pub use error::{Result, SplatError};
