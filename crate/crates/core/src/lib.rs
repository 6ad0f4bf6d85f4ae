pub mod cli;
pub mod data;
pub mod embednet;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod numerics;
pub mod protocore;
pub mod registry;
pub mod spsa;
pub mod trainer;
pub mod weighting;

pub use error::{Error, Result};
