pub mod augment;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod retrieve;
pub mod synth;
pub mod tokenizer;
pub mod util;

pub use error::{Error, Result};
