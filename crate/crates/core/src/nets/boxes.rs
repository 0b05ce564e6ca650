//! Spatial-then-temporal layout transformer over box tokens.
//!
//! Per frame, each token embeds its geometry linearly plus a category
//! embedding; spatial blocks let the tokens of one frame attend to each
//! other and their mean becomes the frame summary. Temporal blocks then run
//! over the sequence of frame summaries. There is no slot positional
//! embedding, so the model is invariant to token order within a frame.

use alloc::format;
use alloc::vec::Vec;

use super::arch::ArchConfig;
use super::layers::{attention, layer_norm, linear, mlp};
use super::params::Bound;
use super::{BoxToken, Category, Hooks};
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Box tokens of a batch: geometry `[B, T, M, 4]` and category indices in
/// the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBatch {
    pub geometry: Tensor,
    pub categories: Vec<usize>,
}

impl BoxBatch {
    /// Packs clips of per-frame token lists, padding every frame to
    /// `arch.max_boxes`.
    pub fn pack(clips: &[&[Vec<BoxToken>]], arch: &ArchConfig) -> Result<Self> {
        let (t, m) = (arch.n_frames, arch.max_boxes);
        let mut geometry = Vec::with_capacity(clips.len() * t * m * 4);
        let mut categories = Vec::with_capacity(clips.len() * t * m);
        for clip in clips {
            if clip.len() != t {
                return Err(Error::contract(format!(
                    "box clip has {} frame groups, model expects {t}",
                    clip.len()
                )));
            }
            for frame in clip.iter() {
                if frame.len() > m {
                    return Err(Error::contract(format!("{} boxes in a frame, max is {m}", frame.len())));
                }
                let pad = BoxToken::padding(frame.first().map_or(0, |b| b.t));
                for tok in frame.iter().chain(core::iter::repeat(&pad).take(m - frame.len())) {
                    geometry.extend_from_slice(&tok.geometry());
                    categories.push(tok.category as usize);
                }
            }
        }
        Ok(BoxBatch {
            geometry: Tensor::new(&[clips.len(), t, m, 4], geometry)?,
            categories,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.geometry.shape()[0]
    }
}

/// Logits `[B, C]`.
pub fn logits(g: &mut Graph, p: &Bound, arch: &ArchConfig, batch: &BoxBatch, hooks: &Hooks) -> Result<Var> {
    let s = batch.geometry.shape();
    let (t, m, d) = (arch.n_frames, arch.max_boxes, arch.d_model);
    if s.len() != 4 || s[1] != t || s[2] != m || s[3] != 4 || batch.categories.len() != s[0] * t * m {
        return Err(Error::dim("box_logits", s, &[0, t, m, 4]));
    }
    debug_assert!(batch.categories.iter().all(|&c| c <= Category::Padding as usize));
    let b = s[0];

    let geom = g.constant(batch.geometry.clone());
    let x = linear(g, geom, p, "embed")?;
    let cats = g.embedding(p.var("cat_embed"), &batch.categories)?;
    let cats = g.reshape(cats, &[b, t, m, d])?;
    let x = g.add(x, cats)?;

    let mut x = g.reshape(x, &[b * t, m, d])?;
    for i in 0..arch.n_blocks {
        if !hooks.identity_attention {
            x = attention(g, x, p, &format!("space{i}.attn"), arch.n_heads)?;
        }
        x = mlp(g, x, p, &format!("space{i}.mlp"))?;
    }
    let summary = g.mean(x, 1)?;
    let mut x = g.reshape(summary, &[b, t, d])?;
    if !hooks.no_positional {
        x = g.add(x, p.var("pos.time"))?;
    }
    for i in 0..arch.n_blocks {
        if !hooks.identity_attention {
            x = attention(g, x, p, &format!("time{i}.attn"), arch.n_heads)?;
        }
        x = mlp(g, x, p, &format!("time{i}.mlp"))?;
    }
    let x = layer_norm(g, x, p, "final_ln")?;
    let x = g.mean(x, 1)?;
    linear(g, x, p, "head")
}
