pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod infomax;
pub mod nn;
pub mod pretrain;
pub mod viz;

pub use error::{Error, Result};
