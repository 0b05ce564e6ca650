use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{ArchConfig, BoxBatch, BoxToken, Category, Input, Modality};
use crate::synth::{flow_index, flow_to_color, render_detection_canvas, sample_clip, Episode, Mode};
use crate::tensor::Tensor;

/// Side of the square crop fed to every model.
pub const CROP_SIZE: usize = 28;

/// Square window in raw-frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

/// The augmentation decisions for one sample. Every model that sees the
/// sample (student and each teacher member) is fed through the same plan.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPlan {
    pub frame_indices: Vec<usize>,
    pub crop: CropRect,
    /// Additive brightness shift, RGB only.
    pub brightness: f64,
    /// Relative contrast change, RGB only.
    pub contrast: f64,
    pub hflip: bool,
}

impl ViewPlan {
    /// SHA-256 over a canonical encoding of every field.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.frame_indices.len() as u64).to_le_bytes());
        for &i in &self.frame_indices {
            h.update((i as u64).to_le_bytes());
        }
        for v in [self.crop.x, self.crop.y, self.crop.size] {
            h.update((v as u64).to_le_bytes());
        }
        h.update(self.brightness.to_bits().to_le_bytes());
        h.update(self.contrast.to_bits().to_le_bytes());
        h.update([self.hflip as u8]);
        h.finalize().into()
    }
}

/// Draws a plan. Train mode samples sorted frame indices, a uniformly
/// placed crop and colour jitter in ±0.1; eval mode is deterministic
/// (regular indices, centred crop, no jitter). Flips are never used since
/// they would swap the left/right labels.
pub fn sample_view_plan<R: rand::Rng + ?Sized>(
    raw_length: usize,
    side: usize,
    n_frames: usize,
    crop_size: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<ViewPlan> {
    if crop_size > side || n_frames > raw_length || n_frames == 0 {
        return Err(Error::config(alloc::format!(
            "cannot take {n_frames}x{crop_size}px views of {raw_length}x{side}px episodes"
        )));
    }
    let frame_indices = sample_clip(raw_length, n_frames, mode, rng);
    let slack = side - crop_size;
    Ok(match mode {
        Mode::Eval => ViewPlan {
            frame_indices,
            crop: CropRect { x: slack / 2, y: slack / 2, size: crop_size },
            brightness: 0.0,
            contrast: 0.0,
            hflip: false,
        },
        Mode::Train => {
            let x = rng.gen_range(0..=slack);
            let y = rng.gen_range(0..=slack);
            let brightness = rng.gen_range(-0.1..=0.1);
            let contrast = rng.gen_range(-0.1..=0.1);
            ViewPlan {
                frame_indices,
                crop: CropRect { x, y, size: crop_size },
                brightness,
                contrast,
                hflip: false,
            }
        }
    })
}

/// What a model consumes from an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Rgb,
    Flow,
    Boxes,
    /// Flow rendered as a colour-wheel image.
    FlowImage,
    /// Boxes drawn as outlines on a blank canvas.
    BoxCanvas,
}

impl From<Modality> for InputKind {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Rgb => InputKind::Rgb,
            Modality::Flow => InputKind::Flow,
            Modality::Boxes => InputKind::Boxes,
        }
    }
}

fn check_plan(ep: &Episode, plan: &ViewPlan) -> Result<()> {
    let c = plan.crop;
    if c.x + c.size > ep.side() || c.y + c.size > ep.side() || c.size == 0 {
        return Err(Error::contract("crop leaves the frame"));
    }
    if plan.frame_indices.iter().any(|&t| t >= ep.raw_length()) {
        return Err(Error::contract("frame index past the end of the episode"));
    }
    Ok(())
}

/// Copies the crop of frames `[L, S, S, ch]` at `indices` into `out`.
fn crop_into(src: &Tensor, indices: &[usize], crop: CropRect, out: &mut Vec<f64>) {
    let (s, ch) = (src.shape()[1], src.shape()[3]);
    let d = src.data();
    for &t in indices {
        for y in crop.y..crop.y + crop.size {
            let row = ((t * s + y) * s + crop.x) * ch;
            out.extend_from_slice(&d[row..row + crop.size * ch]);
        }
    }
}

/// Re-expresses a box in crop-normalized coordinates, clipping it to the
/// crop. A box left with no area becomes padding.
fn renormalize(b: &BoxToken, side: usize, crop: CropRect) -> BoxToken {
    if b.category == Category::Padding {
        return *b;
    }
    let (s, c) = (side as f64, crop.size as f64);
    let map = |v: f64, off: usize| ((v * s - off as f64) / c).clamp(0.0, 1.0);
    let (x0, x1) = (map(b.cx - b.w / 2.0, crop.x), map(b.cx + b.w / 2.0, crop.x));
    let (y0, y1) = (map(b.cy - b.h / 2.0, crop.y), map(b.cy + b.h / 2.0, crop.y));
    if x1 <= x0 || y1 <= y0 {
        return BoxToken::padding(b.t);
    }
    BoxToken {
        t: b.t,
        cx: (x0 + x1) / 2.0,
        cy: (y0 + y1) / 2.0,
        w: x1 - x0,
        h: y1 - y0,
        category: b.category,
    }
}

/// Per-frame boxes of the view, renumbered `t = 0..T` and with empty boxes
/// dropped.
pub(crate) fn view_boxes(ep: &Episode, plan: &ViewPlan) -> Vec<Vec<BoxToken>> {
    plan.frame_indices
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            ep.boxes[t]
                .iter()
                .map(|b| BoxToken { t: k, ..renormalize(b, ep.side(), plan.crop) })
                .filter(|b| b.category != Category::Padding)
                .collect()
        })
        .collect()
}

/// One sample's model input of the given kind: `[T, c, c, ch]` frames or
/// per-frame box lists (as a one-element batch).
pub fn materialize(ep: &Episode, plan: &ViewPlan, kind: InputKind, arch: &ArchConfig) -> Result<Input> {
    materialize_batch(&[ep], core::slice::from_ref(plan), kind, arch)
}

/// Batched [`materialize`]; `plans[i]` applies to `episodes[i]`.
pub fn materialize_batch(episodes: &[&Episode], plans: &[ViewPlan], kind: InputKind, arch: &ArchConfig) -> Result<Input> {
    let n_frames = arch.n_frames;
    if episodes.len() != plans.len() || episodes.is_empty() {
        return Err(Error::dim("materialize", &[episodes.len()], &[plans.len()]));
    }
    for (ep, plan) in episodes.iter().zip(plans) {
        check_plan(ep, plan)?;
        if plan.frame_indices.len() != n_frames {
            return Err(Error::contract(alloc::format!(
                "view has {} frames, model expects {n_frames}",
                plan.frame_indices.len()
            )));
        }
    }
    let c = plans[0].crop.size;
    if plans.iter().any(|p| p.crop.size != c) {
        return Err(Error::contract("mixed crop sizes in one batch"));
    }
    if kind != InputKind::Boxes && c != arch.input_side {
        return Err(Error::dim("materialize", &[c, c], &[arch.input_side, arch.input_side]));
    }
    let b = episodes.len();
    match kind {
        InputKind::Boxes => {
            let clips: Vec<Vec<Vec<BoxToken>>> = episodes.iter().zip(plans).map(|(e, p)| view_boxes(e, p)).collect();
            let refs: Vec<&[Vec<BoxToken>]> = clips.iter().map(|c| c.as_slice()).collect();
            Ok(Input::Boxes(BoxBatch::pack(&refs, arch)?))
        }
        InputKind::Rgb => {
            let mut out = Vec::with_capacity(b * n_frames * c * c * 3);
            for (ep, plan) in episodes.iter().zip(plans) {
                let start = out.len();
                crop_into(&ep.frames, &plan.frame_indices, plan.crop, &mut out);
                if plan.brightness != 0.0 || plan.contrast != 0.0 {
                    for v in &mut out[start..] {
                        *v = ((*v - 0.5) * (1.0 + plan.contrast) + 0.5 + plan.brightness).clamp(0.0, 1.0);
                    }
                }
            }
            Ok(Input::Frames(Tensor::new(&[b, n_frames, c, c, 3], out)?))
        }
        InputKind::Flow | InputKind::FlowImage => {
            let mut out = Vec::with_capacity(b * n_frames * c * c * 2);
            for (ep, plan) in episodes.iter().zip(plans) {
                let idx: Vec<usize> = plan.frame_indices.iter().map(|&t| flow_index(t, ep.raw_length())).collect();
                crop_into(&ep.flow, &idx, plan.crop, &mut out);
            }
            let flow = Tensor::new(&[b, n_frames, c, c, 2], out)?;
            Ok(Input::Frames(if kind == InputKind::Flow { flow } else { flow_to_color(&flow) }))
        }
        InputKind::BoxCanvas => {
            let mut out = Vec::with_capacity(b * n_frames * c * c * 3);
            for (ep, plan) in episodes.iter().zip(plans) {
                for frame in view_boxes(ep, plan) {
                    out.extend_from_slice(render_detection_canvas(&frame, c).data());
                }
            }
            Ok(Input::Frames(Tensor::new(&[b, n_frames, c, c, 3], out)?))
        }
    }
}
