//! Normative conditional latent diffusion for unsupervised anomaly detection
//! in 3D volumes.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] holds the array type, layer primitives with hand-derived
//!   backward passes, the Adam optimizer, a counter-based RNG and a
//!   finite-difference gradient checker.
//! * [`phantom`] generates synthetic covariate-dependent volumes, injects
//!   ground-truth lesions and reads/writes the on-disk formats.
//! * [`autoencoder`] is the KL-regularised first stage that maps volumes to
//!   the latent space.
//! * [`diffusion`] contains the DDPM schedule, forward/posterior/reverse
//!   steps and the per-element KL map.
//! * [`backbone`] is the conditional noise predictor: a factorised 3D token
//!   transformer with shared adaptive layer-norm modulation.
//! * [`restoration`] calibrates validation KL thresholds and runs the masked
//!   blend-and-average restoration plus the plain baseline.
//! * [`scoring`] computes image-quality metrics, z-scores, extreme-value
//!   indices and cohort statistics.
//! * [`pipeline`] ties everything into the command-level workflow used by the
//!   CLI.

pub mod autoencoder;
pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod phantom;
pub mod pipeline;
pub mod restoration;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Array, ParamSet, RngStream};
pub use phantom::{Cohort, Covariates};
