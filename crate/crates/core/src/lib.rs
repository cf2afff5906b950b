//! Hierarchical mixture-of-experts conditioning for a desk-scale
//! rectified-flow diffusion transformer.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod degradation;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod routing;
pub mod tensor;

pub use error::{MimError, Result};
pub use tensor::Tensor;
