//! Dense tensors and a small reverse-mode automatic differentiation engine.
//!
//! Enough machinery for a 1D convolutional classifier, the filter-grid
//! similarity penalty, and gradient ascent in input space. Everything runs in
//! `f64` on a single thread.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, DEFAULT_EPSILON};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

use crate::error::Result;

/// Cosine similarity of two equal-length, nonzero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(a.to_vec())?);
    let b = g.constant(Tensor::vector(b.to_vec())?);
    let d = g.cosine_similarity(a, b)?;
    Ok(g.scalar(d))
}
