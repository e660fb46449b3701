//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! then walks the tape in reverse insertion order. The op set is deliberately
//! narrow: what a pre-norm transformer, a margin loss and token cross-entropy
//! need, and nothing more.

mod graph;
pub mod optim;
mod real;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GradError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index {index} out of range 0..{bound}")]
    Index { index: usize, bound: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the forward pass")]
    BackwardTwice,
    #[error("mean over an empty set of positions")]
    EmptyMean,
}

/// Central finite-difference derivative of `f` w.r.t. every entry of `x`.
///
/// Only evaluates `f`; shares nothing with the reverse pass it is used to check.
pub fn numeric_gradient<F: Real>(x: &[F], h: F, mut f: impl FnMut(&[F]) -> F) -> Vec<F> {
    let mut probe = x.to_vec();
    let two = F::lit(2.0);
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (two * h)
        })
        .collect()
}
