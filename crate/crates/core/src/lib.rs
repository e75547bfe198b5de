//! Segmentation-robust direct speech translation at desk scale.

pub mod audio;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod reseg;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod train;
pub mod vad;

pub use error::{Error, Result};
