//! Universal one-shot anatomical landmark detection.
//!
//! The crate implements a two-stage pipeline that learns to detect landmarks
//! across several imaging domains from a single annotated image per domain:
//!
//! 1. **Stage I** trains a siamese convolutional encoder/decoder with
//!    contrastive matching between an image and an augmented patch of itself.
//!    Applied to the one annotated image per domain, the matcher transfers
//!    those annotations onto every unlabeled training image as pseudo labels.
//! 2. **Stage II** trains a domain-adaptive windowed transformer with a
//!    convolutional decoder to regress landmark heatmaps from the pseudo
//!    labels, sharing almost all weights across domains while keeping a small
//!    set of per-domain projections, diagonals, and normalization statistics.
//!
//! Everything runs on the CPU in `f64` on a tape-based autodiff engine
//! ([`tensor`]). Data-parallel sections live behind the `parallel` feature
//! (enabled by default) and produce bit-identical results to the sequential
//! fallback ([`exec`]).

pub mod conv_model;
pub mod data;
pub mod domain;
pub mod error;
pub mod exec;
pub mod heatmap;
pub mod metrics;
pub mod nn;
pub mod stage1;
pub mod stage2;
pub mod synth;
pub mod tensor;
pub mod transformer;

pub use error::{Result, UodError};
