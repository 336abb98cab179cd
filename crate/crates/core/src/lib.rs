//! Progressive RGB–IR feature alignment built on a small reverse-mode
//! autodiff engine.
//!
//! The stack runs a per-modality backbone, pulls visual features toward
//! per-category text embeddings ([`sam`]), warps RGB features onto the IR
//! frame with offset-driven deformable convolution ([`esm`]), refines the
//! match with windowed cross-modal attention and a mutual-consistency loss
//! ([`ism`]), then fuses both streams for per-pixel classification
//! ([`pipeline`]). [`synth`] generates misaligned scenes with exact ground
//! truth for training and evaluation.

pub mod error;
pub mod esm;
pub mod ism;
pub mod pipeline;
pub mod sam;
pub mod semantics;
pub mod synth;
pub mod tensor;
mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
