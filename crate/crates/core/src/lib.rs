pub mod augment;
pub mod cli;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
mod par;
pub mod rdb;
pub mod rng;
pub mod tpl;

pub use error::{Error, Result};
