use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_distr::{Distribution, Normal};

use super::style::{hsv_to_rgb, style_of, Style};
use super::{BoxState, Episode, EpisodeSpec};
use crate::nets::{BoxToken, Category};
use crate::rng;
use crate::tensor::Tensor;

/// Flow magnitude (pixels/frame) rendered at full saturation.
pub const FLOW_FULL_SCALE: f64 = 2.0;

struct Layer<'a> {
    style: Style,
    track: &'a [BoxState],
}

impl Layer<'_> {
    /// Object-local coordinates of pixel centre `(px, py)` at frame `t`.
    fn local(&self, t: usize, px: f64, py: f64) -> (f64, f64) {
        let b = &self.track[t];
        ((px - b.cx) / (b.w / 2.0), (py - b.cy) / (b.h / 2.0))
    }
}

/// Rasterizes an episode: RGB frames with additive Gaussian appearance
/// noise (clipped to `[0, 1]`), the analytic flow field of whichever object
/// is on top at each pixel (zero on background), and exact boxes.
/// Distractors are painted first, the target last.
pub fn render_episode(spec: &EpisodeSpec) -> Episode {
    let (side, len) = (spec.side, spec.raw_length());
    let layers: Vec<Layer> = spec
        .distractors
        .iter()
        .map(|d| Layer {
            style: style_of(d.object_id, spec.n_objects),
            track: &d.trajectory,
        })
        .chain(core::iter::once(Layer {
            style: style_of(spec.object_id, spec.n_objects),
            track: &spec.trajectory,
        }))
        .collect();

    let mut frames = vec![1.0; len * side * side * 3];
    let mut flow = vec![0.0; (len - 1) * side * side * 2];
    for t in 0..len {
        for y in 0..side {
            for x in 0..side {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let top = layers.iter().rev().find_map(|l| {
                    let (u, v) = l.local(t, px, py);
                    l.style.covers(u, v).then_some((l, u, v))
                });
                let Some((layer, u, v)) = top else { continue };
                let o = ((t * side + y) * side + x) * 3;
                frames[o..o + 3].copy_from_slice(&layer.style.color(u, v));
                if t + 1 < len {
                    let (b0, b1) = (&layer.track[t], &layer.track[t + 1]);
                    let nx = b1.cx + (px - b0.cx) * (b1.w / b0.w);
                    let ny = b1.cy + (py - b0.cy) * (b1.h / b0.h);
                    let f = ((t * side + y) * side + x) * 2;
                    flow[f] = nx - px;
                    flow[f + 1] = ny - py;
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut r = rng::stream(spec.noise_seed, &[]);
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in frames.iter_mut() {
            *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
        }
    }

    let s = side as f64;
    let token = |t: usize, b: &BoxState, category| BoxToken {
        t,
        cx: b.cx / s,
        cy: b.cy / s,
        w: b.w / s,
        h: b.h / s,
        category,
    };
    let boxes = (0..len)
        .map(|t| {
            core::iter::once(token(t, &spec.trajectory[t], Category::Target))
                .chain(spec.distractors.iter().map(|d| token(t, &d.trajectory[t], Category::Distractor)))
                .collect()
        })
        .collect();

    Episode {
        frames: Tensor::new(&[len, side, side, 3], frames).unwrap(),
        flow: Tensor::new(&[len - 1, side, side, 2], flow).unwrap(),
        boxes,
        label: spec.action_id,
        object_id: spec.object_id,
    }
}

/// Draws one frame's boxes as 2 px outlines on a white `[side, side, 3]`
/// canvas: distractors in pure blue, then the target in pure red, so red
/// wins where they overlap. Padding tokens are skipped.
pub fn render_detection_canvas(boxes: &[BoxToken], side: usize) -> Tensor {
    let mut data = vec![1.0; side * side * 3];
    let s = side as f64;
    let order = boxes
        .iter()
        .filter(|b| b.category == Category::Distractor)
        .chain(boxes.iter().filter(|b| b.category == Category::Target));
    for b in order {
        let color = if b.category == Category::Target { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let edge = |v: f64| (libm::round(v * s).max(0.0) as usize).min(side);
        let (x0, x1) = (edge(b.cx - b.w / 2.0), edge(b.cx + b.w / 2.0));
        let (y0, y1) = (edge(b.cy - b.h / 2.0), edge(b.cy + b.h / 2.0));
        for y in y0..y1 {
            for x in x0..x1 {
                let border = x < x0 + 2 || x + 2 >= x1 || y < y0 + 2 || y + 2 >= y1;
                if border {
                    let o = (y * side + x) * 3;
                    data[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }
    Tensor::new(&[side, side, 3], data).unwrap()
}

/// Colour-wheel rendering of flow `[..., 2]` to `[..., 3]`: direction picks
/// the hue on the six-sector HSV wheel (angle 0 = +x = red), magnitude
/// sets saturation (full at [`FLOW_FULL_SCALE`]), value is 1. Zero flow is
/// white.
pub fn flow_to_color(flow: &Tensor) -> Tensor {
    let mut shape = flow.shape().to_vec();
    assert_eq!(shape.last(), Some(&2), "flow must have 2 channels");
    *shape.last_mut().unwrap() = 3;
    let mut out = Vec::with_capacity(flow.numel() / 2 * 3);
    for f in flow.data().chunks_exact(2) {
        let mag = libm::sqrt(f[0] * f[0] + f[1] * f[1]);
        let hue = libm::atan2(f[1], f[0]) / (2.0 * PI);
        let sat = (mag / FLOW_FULL_SCALE).min(1.0);
        out.extend_from_slice(&hsv_to_rgb(hue, sat, 1.0));
    }
    Tensor::new(&shape, out).unwrap()
}
