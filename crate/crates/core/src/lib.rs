//! Heteroscedastic label-noise modelling with low-rank Gaussian utilities.

pub mod analysis;
pub mod checkpoint;
pub mod datagen;
pub mod dataset_file;
pub mod error;
pub mod head;
pub mod noise;
pub mod rng;
pub mod taylor;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{HeadConfig, HeadParameters, Link, Variant};
pub use noise::{Factor, NoiseModel};
pub use rng::RandomSource;
