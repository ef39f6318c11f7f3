//! Trainer and analyzer for differentiable logic gate networks.
//!
//! A network is a stack of equal-width layers of selection nodes. Each node
//! picks among the 16 two-input Boolean gates via logits and reads two wires
//! from the previous layer; a GroupSum readout turns the final layer into
//! class logits. Training supports four discrete-selection estimators
//! (Soft-Mix, Soft-Gumbel, Hard-ST, Gumbel-ST) plus an adaptive backward
//! temperature controller, and the evaluation tooling decomposes the
//! training-inference gap into selection and computation components. Trained
//! networks compile to hard Boolean circuits evaluated with word-packed
//! bitwise operations.

pub mod circuit;
pub mod data;
pub mod error;
pub mod gates;
pub mod metrics;
pub mod network;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
