//! Dense tensors, reverse-mode differentiation, the optimizer and the
//! checkpoint format.

pub mod checkpoint;
pub mod container;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_step, adamw_step_present, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{Binder, ParamStore};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
