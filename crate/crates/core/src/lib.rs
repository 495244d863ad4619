//! Desk-scale building blocks for sign language pose translation experiments:
//! a small differentiable tensor engine, a text-to-pose transformer with
//! counter-based termination, pose sequence tooling (lifting, cleaning,
//! normalisation), DTW evaluation, frame conditioning filters, a miniature
//! conditional diffusion model and image metrics.
//!
//! Everything is deterministic given an explicit seed and runs on CPU with
//! no external runtime dependencies.

pub mod compute;
pub mod dataprep;
pub mod diffusion;
pub mod dtw;
pub mod error;
pub mod frnet;
pub mod lifting;
pub mod metrics;
pub mod rng;
pub mod skeleton;
pub mod translator;

pub use error::{Error, Result};
