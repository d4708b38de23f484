//! Discrete choice modeling with utility-based neural networks.
//!
//! Four model families share one data layout and one training stack:
//! multinomial logit, nested logit, a fully connected DNN whose utilities
//! see every alternative's attributes, and an alternative-specific-utility
//! DNN whose utility for alternative `k` sees only `k`'s attributes and the
//! decision-maker's.

pub mod data;
pub mod error;
pub mod hpo;
pub mod interpret;
pub mod io;
pub mod math;
pub mod models;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
