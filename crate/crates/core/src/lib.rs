//! Federated semi-supervised domain adaptation on synthetic domain shifts.
//!
//! Devices hold labeled source data and mostly-unlabeled target data. A global
//! source model is trained with FedAvg; a target model imitates its softened
//! predictions while fitting the few target labels, with the balance between
//! the two picked per device by a min-norm rule.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;

pub use error::{Error, Result};
