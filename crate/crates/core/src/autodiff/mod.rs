//! Reverse-mode automatic differentiation over dense `f64` arrays, plus the optimizer
//! and tensor archive used for training.

mod array;
pub mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::{broadcast_shapes, canonical_sum, numel, Array};
pub use gradcheck::{grad_check, grad_check_store, grad_check_store_with_floor, roundoff_floor, GradCheckReport};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState, StepOutcome};
pub use params::{ParamId, ParamStore};
pub use tape::{gelu, silu, CouplingTable, Tape, Var};
