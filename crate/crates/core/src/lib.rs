//! Motion retargeting between characters through per-character motion
//! tokenizers and a condition-guided flow-matching model over their codebooks.

pub mod artifact;
pub mod config;
pub mod error;
pub mod features;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod rng;
pub mod sampler;
pub mod skeleton;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
