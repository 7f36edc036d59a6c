//! Implicit video question answering: masked-evidence datasets, action-intent clue
//! refinement, clue-conditioned visual enhancement, prompting, and evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aim;
pub mod checkpoint;
pub mod checks;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod reasoner;
pub mod synth;
pub mod text;
pub mod train;
pub mod vem;

pub use error::{Error, Result};
pub use par::ExecMode;
