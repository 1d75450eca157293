pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod math;
pub mod model;
pub mod pretrain;

pub use error::{Error, Result};
