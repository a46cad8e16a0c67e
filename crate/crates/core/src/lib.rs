pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod features;
pub mod lm;
pub mod model;
pub mod recipe;
pub mod rng;
pub mod slimipl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
