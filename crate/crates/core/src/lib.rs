//! Modular multitask in-context regression.
//!
//! A frozen teacher hypernetwork composes `M` weight modules into task
//! networks; transformers see a handful of input/label pairs from one task and
//! must predict the label of a query input. The crate provides the task
//! generator, two learners (a plain transformer and a transformer feeding a
//! learned hypernetwork), the evaluation metrics, a training driver, and an
//! explicit linear-attention construction that executes a hypernetwork
//! forward pass exactly.

pub mod autodiff;
pub mod construction;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod models;
pub mod optim;
pub mod rng;
pub mod taskgen;

pub use error::{Error, Result};
