//! Desk-scale sparse-attention engine.
//!
//! Three gated KV branches (block compression, top-n block selection, sliding
//! window) over grouped-query attention, a dense causal oracle they are
//! validated against, and the analysis tooling around them: attention-budget
//! arithmetic, attention-sink detection, gate statistics, and a branch cost
//! profiler.

pub mod analysis;
pub mod branches;
pub mod dense;
pub mod error;
pub mod fixtures;
pub mod gating;
pub mod io;
pub mod parallel;
pub mod rng;
pub mod selfcheck;
pub mod tensor;

pub use error::{Error, Result};
