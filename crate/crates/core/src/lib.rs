pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fie;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod run_config;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Variant};
pub use model::{ParamCounts, TransCC};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
