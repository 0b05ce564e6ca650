//! Files, training runs, evaluation reports and the command line on top
//! of [`mmdl_core`].

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod teacher;
pub mod trainer;
mod wire;

pub use error::{Error, Result};

// Training allocates and frees many short-lived tensors per step.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
