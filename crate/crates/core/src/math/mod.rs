//! Dense linear algebra, layer primitives and reverse-mode differentiation.

pub mod matrix;
pub mod ops;
pub mod rng;
pub mod tape;

pub use matrix::Matrix;
pub use ops::{
    batch_norm, cross_entropy, cross_entropy_at, dropout, dropout_mask, he_init, relu, softmax,
    BatchNormParams, Mode,
};
pub use rng::RngStream;
pub use tape::{Gradients, NestLayout, NodeId, Tape};
