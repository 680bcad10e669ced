//! Adversarial meta-adaptation for blended-target domain adaptation.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod kmeans;
pub mod losses;
pub mod meta;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
