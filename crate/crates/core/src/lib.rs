//! Multi-branch identity retrieval under domain shift.
//!
//! A shared trunk feeds `k` cloned branch pathways. Each branch normalizes
//! its blocks with DyMAIN, follows its own PMoC learning-rate schedule, and
//! is pulled toward its siblings by the DCML alignment loss. Branch features
//! are averaged at inference.

// `!(x >= 0.0)` comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod normalization;
pub mod oracles;
pub mod params;
pub mod run;
pub mod schedules;
pub mod selftest;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
