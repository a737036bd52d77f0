//! Dense attention kernels: the exact reference path used as the oracle,
//! online-softmax block accumulation, and analytic gradients.

mod online;
mod reference;
mod tensor;

use thiserror::Error;

pub use online::{blockwise_backward, row_delta, BlockMask, Finalized, KvGrads, SoftmaxState};
pub use reference::{
    reference_attention, reference_attention_grad, reference_probabilities, AttentionGrads,
};
pub use tensor::{Dims4, Precision, Scalar, Tensor4};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("tensor extents {0} must all be at least 1")]
    EmptyExtent(Dims4),
    #[error("buffer of {len} elements does not fill a {dims} tensor")]
    DataLength { dims: Dims4, len: usize },
    #[error("{q_heads} query heads are not divisible by {kv_heads} kv heads")]
    HeadDivisibility { q_heads: usize, kv_heads: usize },
    #[error("K has {k} tokens but V has {v}")]
    KvSeqMismatch { k: usize, v: usize },
    #[error("row saw no keys (batch {b}, query {i}, head {h})")]
    RowSawNoKeys { b: usize, i: usize, h: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// `1/√hs`.
pub(crate) fn softmax_scale<T: Scalar>(head_size: usize) -> T {
    T::one() / T::from_usize(head_size).expect("head size fits in a float").sqrt()
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn visible(causal: bool, q_position: usize, k_position: usize) -> bool {
    !causal || k_position <= q_position
}
