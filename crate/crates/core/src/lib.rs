//! Prototype-driven semi-supervised domain adaptation on small dense vectors.
//!
//! The crate bundles the numerical pieces (log-domain Sinkhorn, EMA class
//! prototypes, three-way pseudo-labeling, the loss family with hand-written
//! gradients, a small MLP) and a seeded experiment runner that produces
//! metrics, checkpoints and ablation tables.

// NaN-rejecting comparisons and index loops over paired buffers are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod objective;
pub mod ot;
pub mod prototype;
pub mod pseudo_label;
pub mod runner;

pub use error::{Error, Result};
pub use linalg::Matrix;
