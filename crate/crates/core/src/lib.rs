pub mod checkpoint;
pub mod dataset;
pub mod discriminators;
pub mod error;
pub mod graph;
pub mod image;
pub mod latent_lab;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod perceptual;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
