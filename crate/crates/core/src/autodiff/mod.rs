//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! Scoped to exactly what the models here need: a single-threaded tape,
//! deterministic gradient accumulation, convolution via im2col, and an Adam
//! optimizer whose state serializes into checkpoints.

mod graph;
pub mod nn;
pub mod ops;
mod optim;
mod store;

pub use graph::{BackArgs, Grads, Graph, T};
pub use nn::{Conv2d, Init, Linear, LoraConv2d};
pub use optim::Adam;
pub use store::{ParamId, ParamStore};
