pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
pub mod nn;
pub mod dataset;
pub mod brain;
pub mod caption;
pub mod encoders;
pub mod metrics;
pub mod pipeline;
