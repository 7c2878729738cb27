pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod kap;
pub mod lifelong;
pub mod losses;
pub mod optim;
pub mod prompts;
pub mod rng;

pub use error::{Error, ErrorClass, Result};
