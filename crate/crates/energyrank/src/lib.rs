pub mod autodiff;
pub mod error;
pub mod gradcheck;

pub mod featurizer;
pub mod losses;
pub mod dataset;
pub mod datagen;
pub mod evaluator;
pub mod baseline;
pub mod checkpoint;
pub mod msdae;
pub mod pipeline;
pub mod ranker;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
