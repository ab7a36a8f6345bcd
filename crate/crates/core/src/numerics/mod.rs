//! Deterministic numerical substrate: dense arrays, layer primitives with
//! backward passes, Adam and a gradient checker.

mod adam;
mod array;
pub mod conv;
mod gradcheck;
pub mod nn;
mod params;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{attention, layer_norm, linear};
pub use params::ParamSet;
pub use rng::{label_key, stream_id, RngStream};
