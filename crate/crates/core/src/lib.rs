//! Chaotic dynamics modeled as discrete autoregressive sequences.
//!
//! Trajectories are quantized on a uniform per-dimension grid ([`grid`]),
//! embedded through a tensor-train coding layer ([`ttcoding`]), modeled by a
//! causal transformer with one classification head per dimension
//! ([`seqmodel`]) and trained coarse-to-fine by grid refinement ([`train`]).

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod grid;
pub mod seqmodel;
pub mod train;
pub mod ttcoding;

pub use error::{Error, Result};
