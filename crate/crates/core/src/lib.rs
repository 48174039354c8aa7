//! Micro-attention residual networks for facial micro-expression recognition.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f64` tensors, a recording tape for reverse-mode
//!   differentiation, and central-difference gradient checks.
//! - [`model`]: the residual attention block, the network built from it,
//!   parameter accounting, checkpoints and attention read-out.
//! - [`data`]: manifests, label regrouping, apex selection, augmentation,
//!   class-balancing resampling and a synthetic dataset generator.
//! - [`training`]: SGD with momentum, step schedules, per-protocol presets
//!   and the staged transfer pipeline.
//! - [`eval`]: subject- and database-level fold generation, confusion
//!   matrices, WAR/UAR/F1 and reports.
//! - [`experiment`]: end-to-end protocol runs composed from the above.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{BlockSpec, InputShape, LoadMode, Model, NetworkSpec, ParamCount};
pub use tensor::{Tape, Tensor, Var};
