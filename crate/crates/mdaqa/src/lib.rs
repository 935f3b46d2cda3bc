//! Source-free domain adaptation for extractive QA.
//!
//! A small QA model (toy feature extractor, masked bottleneck, span head) is
//! trained on a labelled source corpus with a sparsity-regularized near-binary
//! mask over the bottleneck kernels. Adaptation to an unlabelled target corpus
//! runs confidence-thresholded self-training where every gradient is gated by
//! the mask snapshot taken at the end of source training, so kernels that
//! carry source knowledge stay frozen while spare kernels absorb the shift.
//!
//! The `qa_task` module also hosts a synthetic benchmark generator with a
//! scalar domain-shift knob, so the whole train/adapt/evaluate loop runs in
//! seconds on a laptop.

pub mod error;
pub mod numkernel;
pub mod qa_task;

pub mod encoder;
pub mod mask_module;
pub mod model;

pub mod metrics;
pub mod selftrain;
pub mod training;

pub mod cli;
pub(crate) mod util;

pub use error::{Error, Result};
