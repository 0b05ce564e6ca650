//! Numeric core for multimodal teacher / unimodal student distillation on a
//! synthetic compositional action benchmark.
//!
//! Everything here is `no_std` + `alloc`: a define-by-run tensor tape, the
//! per-modality toy transformers, the moving-shapes episode renderer, the
//! distillation objective, AdamW with warmup/decay, and top-k metrics. File
//! formats, training orchestration and the command line live in the `mmdl`
//! crate.

#![no_std]

extern crate alloc;

pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Graph, Var};
pub use tensor::Tensor;
