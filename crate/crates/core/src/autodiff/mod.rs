//! Reverse-mode differentiation over a fixed set of primitives.

pub mod graph;
pub mod loss;

pub use graph::{ComputeGraph, GradientSet, LossSpec, Need, Node, NodeKind, Param, Tape};
pub use loss::{
    cross_entropy, cross_entropy_logits, kl_divergence, kl_logits, kl_to_reference_logits,
    softmax_rows, softmax_temperature, PROB_FLOOR,
};
