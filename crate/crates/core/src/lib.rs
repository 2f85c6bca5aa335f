pub mod autodiff;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod gradsuite;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod quantizers;
pub mod selftest;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
