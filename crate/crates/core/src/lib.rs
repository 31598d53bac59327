//! Context-aware rotary positional embeddings (CARoPE) and the three
//! classic baselines inside a small decoder-only transformer, plus the
//! training, evaluation and verification harness around it.

pub mod cli;
pub mod data;
pub mod error;
pub mod evalbench;
pub mod kvconf;
pub mod model;
pub mod numcore;
pub mod posenc;
pub mod train;

pub use error::{Error, Result};
