//! Multi-granularity mutual refinement network for zero-shot learning.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod binio;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod export;
pub mod model;
pub mod mrm;
pub mod numerics;
pub mod objective;
pub mod params;
pub mod rfm;
pub mod tensor;
pub mod trainer;
pub mod vsd;

pub use error::{Error, Result};
pub use tensor::Tensor;
