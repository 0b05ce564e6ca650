//! The per-modality classifiers: a divided space-time frame transformer
//! (RGB frames, flow fields, rendered canvases) and a spatial-then-temporal
//! box-sequence transformer.

pub mod arch;
pub mod boxes;
pub mod frame;
mod layers;
pub mod params;

use alloc::vec::Vec;

pub use arch::{ArchConfig, Modality};
pub use boxes::BoxBatch;
pub use params::{init_params, param_count, Bound, ModelParams};

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Category {
    Target = 0,
    Distractor = 1,
    Padding = 2,
}

impl Category {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Category::Target),
            1 => Some(Category::Distractor),
            2 => Some(Category::Padding),
            _ => None,
        }
    }
}

/// One detected box in one frame, geometry normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxToken {
    pub t: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub category: Category,
}

impl BoxToken {
    pub fn padding(t: usize) -> Self {
        BoxToken {
            t,
            cx: 0.0,
            cy: 0.0,
            w: 0.0,
            h: 0.0,
            category: Category::Padding,
        }
    }

    pub fn geometry(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = self.geometry().iter().all(|v| (0.0..=1.0).contains(v));
        in_unit && (self.category != Category::Padding || self.geometry() == [0.0; 4])
    }
}

/// Test-harness switches on the forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Skip every attention sublayer.
    pub identity_attention: bool,
    /// Skip adding positional embeddings.
    pub no_positional: bool,
}

/// A batch of model inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    /// Clips `[B, T, S, S, C]`.
    Frames(Tensor),
    Boxes(BoxBatch),
}

impl Input {
    pub fn batch_size(&self) -> usize {
        match self {
            Input::Frames(t) => t.shape()[0],
            Input::Boxes(b) => b.batch_size(),
        }
    }
}

/// Logits `[B, C]` on graph `g` for parameters already bound to it.
pub fn logits(g: &mut Graph, bound: &Bound, params: &ModelParams, input: &Input, hooks: &Hooks) -> Result<Var> {
    match (params.modality, input) {
        (Modality::Boxes, Input::Boxes(b)) => boxes::logits(g, bound, &params.arch, b, hooks),
        (Modality::Rgb | Modality::Flow, Input::Frames(clips)) => {
            let tokens = g.constant(frame::patchify(clips, &params.arch)?);
            frame::logits(g, bound, &params.arch, tokens, hooks)
        }
        (m, _) => Err(Error::config(alloc::format!("input kind does not match {m} model"))),
    }
}

/// Eval-mode logits `[B, C]`, without recording gradients.
pub fn predict(params: &ModelParams, input: &Input) -> Result<Tensor> {
    predict_with(params, input, &Hooks::default())
}

pub fn predict_with(params: &ModelParams, input: &Input, hooks: &Hooks) -> Result<Tensor> {
    let mut g = Graph::inference();
    let bound = params.bind(&mut g, false);
    let out = logits(&mut g, &bound, params, input, hooks)?;
    Ok(g.value(out).clone())
}

/// Logits of one clip `[T, S, S, C]`.
pub fn frame_model_forward(params: &ModelParams, clip: &Tensor) -> Result<Vec<f64>> {
    let mut shape = alloc::vec![1];
    shape.extend_from_slice(clip.shape());
    let batch = clip.clone().reshape(&shape)?;
    Ok(predict(params, &Input::Frames(batch))?.into_data())
}

/// Logits of one clip of per-frame box token lists.
pub fn box_model_forward(params: &ModelParams, frames: &[Vec<BoxToken>]) -> Result<Vec<f64>> {
    let batch = BoxBatch::pack(&[frames], &params.arch)?;
    Ok(predict(params, &Input::Boxes(batch))?.into_data())
}
