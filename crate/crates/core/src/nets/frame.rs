//! Divided space-time frame transformer, used for RGB frames, flow fields
//! and rendered canvases.
//!
//! Each frame is cut into non-overlapping patches that are linearly
//! embedded, then tagged with a spatial and a temporal positional
//! embedding. Every block applies temporal attention (each patch position
//! attends to itself across frames), then spatial attention (patches of one
//! frame attend to each other), then an MLP. Tokens are mean-pooled before
//! the classifier head.

use alloc::format;
use alloc::vec;

use super::arch::ArchConfig;
use super::layers::{attention, layer_norm, linear, mlp};
use super::params::Bound;
use super::Hooks;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Gain applied to three-channel inputs after the background shift.
pub const INPUT_GAIN: f64 = 4.0;

/// `[B, T, S, S, C]` clips to `[B, T, P, patch*patch*C]` patch vectors.
/// Patch vectors are ordered (row, column, channel); patches are ordered
/// row-major over the frame.
pub fn patchify(clips: &Tensor, arch: &ArchConfig) -> Result<Tensor> {
    let s = clips.shape();
    let side = arch.input_side;
    if s.len() != 5 || s[1] != arch.n_frames || s[2] != side || s[3] != side || s[4] != arch.in_channels {
        return Err(Error::dim(
            "patchify",
            s,
            &[0, arch.n_frames, side, side, arch.in_channels],
        ));
    }
    let (b, t, c, ps) = (s[0], s[1], s[4], arch.patch_size);
    let per_side = side / ps;
    let pd = arch.patch_dim();
    let src = clips.data();
    let mut out = vec![0.0; b * t * per_side * per_side * pd];
    let mut o = 0;
    for bt in 0..b * t {
        let frame = &src[bt * side * side * c..(bt + 1) * side * side * c];
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..ps {
                    let row = (py * ps + y) * side + px * ps;
                    out[o..o + ps * c].copy_from_slice(&frame[row * c..(row + ps) * c]);
                    o += ps * c;
                }
            }
        }
    }
    Tensor::new(&[b, t, per_side * per_side, pd], out)
}

/// Logits `[B, C]` for patch tokens `[B, T, P, pd]`.
pub fn logits(g: &mut Graph, p: &Bound, arch: &ArchConfig, tokens: Var, hooks: &Hooks) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let (t, np, d) = (arch.n_frames, arch.patches_per_frame(), arch.d_model);
    if shape.len() != 4 || shape[1] != t || shape[2] != np || shape[3] != arch.patch_dim() {
        return Err(Error::dim("frame_logits", &shape, &[0, t, np, arch.patch_dim()]));
    }
    let b = shape[0];

    // Three-channel inputs are drawn on white; centre the background at 0.
    let tokens = if arch.in_channels == 3 {
        let t = g.add_scalar(tokens, -1.0);
        g.scale(t, INPUT_GAIN)
    } else {
        tokens
    };
    let mut x = linear(g, tokens, p, "embed")?;
    if !hooks.no_positional {
        x = g.add(x, p.var("pos.space"))?;
        let time = g.reshape(p.var("pos.time"), &[t, 1, d])?;
        x = g.add(x, time)?;
    }

    for i in 0..arch.n_blocks {
        if !hooks.identity_attention {
            // Temporal: groups are (clip, patch), sequence runs over frames.
            let xt = g.permute(x, &[0, 2, 1, 3])?;
            let xt = g.reshape(xt, &[b * np, t, d])?;
            let xt = attention(g, xt, p, &format!("block{i}.time"), arch.n_heads)?;
            let xt = g.reshape(xt, &[b, np, t, d])?;
            x = g.permute(xt, &[0, 2, 1, 3])?;
            // Spatial: groups are (clip, frame), sequence runs over patches.
            let xs = g.reshape(x, &[b * t, np, d])?;
            let xs = attention(g, xs, p, &format!("block{i}.space"), arch.n_heads)?;
            x = g.reshape(xs, &[b, t, np, d])?;
        }
        x = mlp(g, x, p, &format!("block{i}.mlp"))?;
    }

    let x = layer_norm(g, x, p, "final_ln")?;
    let x = g.mean(x, 2)?;
    let x = g.mean(x, 1)?;
    linear(g, x, p, "head")
}
