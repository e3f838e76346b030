#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
//! Verification lab for pair-preserving counterfactual training on a
//! Gaussian causal/spurious feature model.

pub mod cli;
pub mod closed_form;
pub mod error;
pub mod feature_model;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod eval;
pub mod rng;
pub mod stats;
pub mod text_ingest;
pub mod theorems;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
