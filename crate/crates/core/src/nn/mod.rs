//! Minimal reverse-mode autodiff and transformer building blocks.

pub mod adam;
pub mod ctc;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod pe;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Mat;
