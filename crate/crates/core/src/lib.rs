//! Siamese scene-graph question answering with un-normalized contrastive
//! objectives, trained on a synthetic scene/question corpus.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, batch norm and a
//!   finite-difference gradient checker.
//! - [`synth`]: synthetic scenes, augmentations, the frozen scene-graph
//!   realizer and the templated question generator with its oracle.
//! - [`model`]: question encoder, instruction-conditioned graph attention
//!   encoder, edge-score head, predictor heads and answer classifier.
//! - [`losses`]: cosine distance, local/global/self-similarity objectives,
//!   link regularizer, supervised loss and their combination.
//! - [`train`]: dual-view training loop, evaluation metrics and the
//!   perturbation, noise-probe and labeled-fraction protocols.

pub mod error;
pub mod losses;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
