pub mod bio;
pub mod cgcn;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod crf;
pub mod dgcn;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scope;
pub mod tensor;
pub mod toy;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
