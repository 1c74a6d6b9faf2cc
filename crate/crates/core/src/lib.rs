#![allow(clippy::needless_range_loop)]

//! Projection-free constrained convex optimization built around Frank-Wolfe
//! (conditional gradient) networks: a generic FW loop over pluggable
//! linear-minimization oracles, an SVM trainer on the unit simplex, a
//! trace-norm-constrained softmax classifier driven by power iteration, and
//! LSTM controllers meta-learned by backpropagation through the unrolled
//! optimizer.

pub mod baselines;
pub mod datasets;
pub mod domains;
pub mod error;
pub mod fw;
pub mod l2lc;
pub mod linalg;
pub mod rng;
pub mod softmax;
pub mod svm;
pub mod tape;

pub use error::{Error, Result};
