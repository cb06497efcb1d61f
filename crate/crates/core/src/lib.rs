//! Hierarchical maximal-correlation self-supervised learning for multichannel
//! time series.
//!
//! A shared encoder embeds `T` augmented views of every segment, a projector
//! fuses them into one summary, and training minimizes a log-determinant
//! dependence loss between views and summary plus an optional cross-instance
//! contrastive term. Representations are evaluated with a linear probe on the
//! frozen encoder under leave-one-subject-out splits.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod objective;
pub mod probe;
pub mod training;

pub use error::{Error, Result};
