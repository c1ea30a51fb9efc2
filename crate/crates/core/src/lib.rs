pub mod ablation;
pub mod bert;
pub mod error;
pub mod evaluation;
pub mod example;
pub mod gpt;
pub mod labelgen;
pub mod nn;
pub mod pipeline;
pub mod ranking_loss;
pub mod seeds;
pub mod synthetic;
pub mod text;
pub mod training;

pub use error::{Error, Result};
