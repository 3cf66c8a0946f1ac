pub mod blocks;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod segnet;
pub mod seqmix;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
