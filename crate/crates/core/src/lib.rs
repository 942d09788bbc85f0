//! Dual-prompt collaboration over toy frozen dual encoders.
//!
//! Stage 1 tunes a single prompt with cross-entropy on the base few-shot
//! split. Stage 2 freezes it, clones a parallel prompt and trains that clone
//! with a hard-negative contrastive objective. At inference the two prompts
//! are mixed with separate weights for base and new classes.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dhno;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod numerics;
pub mod pipeline;
pub mod prompts;
pub mod rng;

pub use error::{Error, Result};
