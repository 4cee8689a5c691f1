pub mod artifact;
pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod grouping;
pub mod harness;
pub mod importance;
pub mod model;
pub mod pruning;
pub mod resources;
pub mod tensor;

pub use error::{Error, Result, StageExt};
