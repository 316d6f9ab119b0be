//! Minimal reverse-mode differentiable numerics.
//!
//! Everything is `f64` and row-major. A [`Graph`] records the forward pass
//! of one mini-batch; [`Graph::backward`] walks it in reverse and the
//! resulting [`Gradients`] are folded into a [`ParamStore`]. The raw
//! [`kernels`] are shared with the tape-free inference path so both
//! routes run the same arithmetic.

pub mod checkpoint;
mod graph;
pub mod kernels;
pub mod losses;
pub mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::AttnSegment;
pub use optim::{clip_grad_norm, AdamW, CosineSchedule, LearningRates};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
