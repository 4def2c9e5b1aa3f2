//! Direct multiview quantification of coronary stenosis indices.
//!
//! The crate provides, bottom to top:
//!
//! * [`tensor`] — dense row-major f64 tensors,
//! * [`graph`] — a tape-based reverse-mode autodiff engine with the
//!   operator set the model needs (3D/2D convolution, attention primitives,
//!   pooling, softmax, ...),
//! * [`attention`] — the self-attention block and the two-level context
//!   attention,
//! * [`encoders`] — the per-view spatio-temporal encoder and the dilated
//!   residual keyframe encoder,
//! * [`model`] — the assembled regression model, its loss, Adam training
//!   and checkpoint I/O,
//! * [`phantom`] — a synthetic trapezoid-stenosis angiography generator
//!   with exact ground-truth labels,
//! * [`evalkit`] — MAE / Pearson / Bland-Altman statistics and the k-fold
//!   cross-validation protocol,
//! * [`config`] — serde config types shared with the CLI.

pub mod attention;
pub mod config;
pub mod encoders;
pub mod error;
pub mod evalkit;
mod init;
pub mod graph;
pub mod model;
pub mod phantom;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{finite_diff_check, Graph, NodeId};
pub use tensor::Tensor;
