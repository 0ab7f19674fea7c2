//! Neural Bayes: a softmax network `L(x)` read through Bayes' rule as the
//! posterior of a discrete latent, trained either to maximize mutual
//! information with its input (MIM) or to label disjoint manifolds (DML).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod bayes;
pub mod data;
pub mod dml;
pub mod error;
pub mod mim;
pub mod nn;
pub mod objective;
pub mod oracles;
pub mod recipes;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type GradientMap64 = tape::GradientMap<f64>;
pub type Network64 = nn::Network<f64>;
pub type PosteriorBatch64 = bayes::PosteriorBatch<f64>;
pub type PriorEstimate64 = bayes::PriorEstimate<f64>;
pub type AdamState64 = train::AdamState<f64>;
