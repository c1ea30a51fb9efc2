//! Minimal differentiable transformer substrate.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod transformer;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::AdamW;
pub use params::{Gradients, Mat, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use transformer::{HiddenStates, ModelConfig, TransformerStack};
