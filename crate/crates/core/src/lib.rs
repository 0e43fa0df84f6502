//! Personalized longitudinal outcome prediction from irregular, partially
//! missing repeated measures.
//!
//! Pipeline: multiple imputation of the training data ([`imputation`]),
//! marginal feature screening ([`selection`]), one GEE fit per imputed set
//! ([`gee`]), parameter pooling ([`ensemble`]), out-of-sample prediction with
//! per-subject day-one fine-tuning ([`prediction`]) and the evaluation
//! harness ([`evaluation`]). [`synthetic`] generates ground-truth data.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod gee;
pub mod imputation;
pub mod linalg;
pub mod pipeline;
pub mod prediction;
pub mod seed;
pub mod selection;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
