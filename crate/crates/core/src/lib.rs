//! Contrastive representation learning with soft pseudo-labels over negative
//! peers.
//!
//! Each sample yields two views. A trainable encoder produces queries, its
//! momentum copy produces keys, and each query is scored against its paired
//! key plus a FIFO bank of past keys. The resulting peer probabilities are
//! supervised by the *other* view's pseudo-labels: a fixed mass `ξ` on the
//! positive peer and the remainder spread over the negatives by an
//! entropic transport solve that makes every bank entry equally likely across
//! the batch. Two cross-entropy terms between the views' probability matrices
//! keep negative-pair similarities consistent under the transformation swap.

pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod probability;
pub mod pseudolabel;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Mat;
