//! Slow-fast context compression: distant tokens are rendered to images and
//! read through a small vision encoder and resampler, near tokens go through
//! a causal decoder that cross-attends to the resulting visual tokens.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vision;
