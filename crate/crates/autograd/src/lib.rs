//! Minimal dense-tensor math with tape-based reverse-mode differentiation.
//!
//! Values are `f64` throughout. A [`Graph`] records every operation applied
//! to [`Var`] handles; [`Graph::backward`] returns [`Gradients`] keyed by the
//! [`ParamId`]s of a [`ParamStore`], which [`Adam`] consumes.

mod adam;
mod error;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{BatchStats, Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
