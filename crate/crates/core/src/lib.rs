//! Training CTC sequence models with cross-modal feature distillation.
//!
//! The crate trains a small frame-wise speech-recognition student with the
//! CTC loss while pulling its hidden features toward those of a frozen text
//! teacher. The two feature sequences live in different temporal and feature
//! dimensions, so the distillation path aligns them in three steps: shrink
//! the student features along CTC segments, resample the teacher features by
//! nearest-neighbor interpolation, and bridge the feature width with a
//! learnable linear projection trained against the mean squared error.
//!
//! Module map:
//!
//! - [`numerics`]: matrices, affine maps, softmax, MSE, gradient checking.
//! - [`ctc`]: CTC loss with analytic gradients, greedy decoding, and an
//!   exhaustive path-enumeration oracle for small instances.
//! - [`align`]: shrink, nearest-neighbor interpolation, projection layer.
//! - [`distill`]: the joint objective, SGD, learning-rate schedule, trainer.
//! - [`toy_models`]: desk-scale student/teacher encoders and a synthetic
//!   paired speech/text corpus generator.
//! - [`evalkit`]: edit distance, character error rate, prediction density,
//!   run comparison.
//! - [`rng`]: seeded, documented pseudo-randomness shared by everything.
//!
//! All operations are pure functions or single-writer parameter updates;
//! values are immutable once returned and safe to share across threads.

pub mod align;
pub mod ctc;
pub mod distill;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod rng;
pub mod toy_models;

pub use error::{Error, Result};
pub use numerics::Matrix;
