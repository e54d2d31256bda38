//! Forward and backward passes for the network's building blocks.
//!
//! Parameterised layers ([`ConvLayer`], [`DenseLayer`]) route their output
//! gradient through a [`GradientGate`](crate::meprop::GradientGate) before
//! computing weight and input gradients, so an attached meProp policy sees
//! every `dy` and both `dW` and `dx` are derived from the sparsified copy.

mod activation;
mod conv;
mod dense;
mod loss;
mod pool;

pub use activation::{relu, relu_backward, Relu};
pub use conv::ConvLayer;
pub use dense::DenseLayer;
pub use loss::{argmax_rows, softmax, softmax_xent};
pub use pool::MaxPool;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Gradients produced by a parameterised layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    /// Same shape as the weight tensor.
    pub dw: Tensor<T>,
    /// Same shape as the bias.
    pub db: Tensor<T>,
    /// Same shape as the layer input.
    pub dx: Tensor<T>,
}

/// He-normal initialisation: `N(0, 2 / fan_in)`. Samples are drawn in `f64`
/// so both precisions start from the same values for a given seed.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Backward FLOPs of a weight layer for `entries` output-gradient entries
/// against an inner dimension of `inner`: one multiply-add each for `dW`
/// and `dx`.
pub fn backward_flops(entries: usize, inner: usize) -> u64 {
    4 * entries as u64 * inner as u64
}
