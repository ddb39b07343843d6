//! Differentiable random hinge forests and ferns embedded in a small
//! backpropagating computation graph, with the layers, optimizers, data
//! loaders and training harness needed to train them end to end.
//!
//! A hinge tree keeps the crisp routing of an ordinary decision tree but
//! scales each leaf's prediction by the smallest decision margin met on the
//! way down. That makes the tree piecewise linear and differentiable almost
//! everywhere while evaluation stays logarithmic in the number of leaves:
//! per example and tree, the forward pass needs `depth` comparisons and the
//! backward pass touches exactly one threshold and one leaf row.
//!
//! The crate is generic over [`real::Real`] (`f32` by default in the
//! training CLI, `f64` in the verification harnesses). See the `book/`
//! directory for a guided tour and `configs/` for ready-made experiments.

pub mod builder;
pub mod config;
pub mod data;
pub mod error;
pub mod forest;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod opt;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
