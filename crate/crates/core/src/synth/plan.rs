use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;

use super::{Action, BoxState, Distractor, EpisodeSpec, GeneratorConfig};
use crate::rng;

fn uniform<R: Rng + ?Sized>(r: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        r.gen_range(lo..hi)
    }
}

/// Target trajectory for `action`. The box stays fully inside the canvas.
fn target_trajectory<R: Rng + ?Sized>(action: Action, side: f64, len: usize, r: &mut R) -> Vec<BoxState> {
    let steps = (len - 1) as f64;
    let aspect = uniform(r, 0.85, 1.15);
    let translate = |dx: f64, dy: f64, r: &mut R| {
        let s = uniform(r, 7.0, 10.0);
        let (w, h) = (s * aspect, s / aspect);
        // Never let the sweep exceed the free space along an axis.
        let room = f64::min(side - w, side - h);
        let v = f64::min(uniform(r, 0.7, 1.1), 0.95 * room / steps);
        let (ddx, ddy) = (dx * v * steps, dy * v * steps);
        let x0 = uniform(r, w / 2.0 + f64::max(0.0, -ddx), side - w / 2.0 - f64::max(0.0, ddx));
        let y0 = uniform(r, h / 2.0 + f64::max(0.0, -ddy), side - h / 2.0 - f64::max(0.0, ddy));
        (0..len)
            .map(|t| BoxState {
                cx: x0 + dx * v * t as f64,
                cy: y0 + dy * v * t as f64,
                w,
                h,
            })
            .collect::<Vec<_>>()
    };
    let d = FRAC_1_SQRT_2;
    match action {
        Action::MoveLeft => translate(-1.0, 0.0, r),
        Action::MoveRight => translate(1.0, 0.0, r),
        Action::MoveUp => translate(0.0, -1.0, r),
        Action::MoveDown => translate(0.0, 1.0, r),
        Action::MoveUpLeft => translate(-d, -d, r),
        Action::MoveUpRight => translate(d, -d, r),
        Action::MoveDownLeft => translate(-d, d, r),
        Action::MoveDownRight => translate(d, d, r),
        Action::Grow | Action::Shrink => {
            let rate = uniform(r, 0.25, 0.4);
            let (s0, ds) = if action == Action::Grow {
                (uniform(r, 6.0, 8.0), rate)
            } else {
                (uniform(r, 12.0, 14.0), -rate)
            };
            let big = f64::max(s0, s0 + ds * steps) / 0.85;
            let cx = uniform(r, big / 2.0, side - big / 2.0);
            let cy = uniform(r, big / 2.0, side - big / 2.0);
            (0..len)
                .map(|t| {
                    let s = s0 + ds * t as f64;
                    BoxState {
                        cx,
                        cy,
                        w: s * aspect,
                        h: s / aspect,
                    }
                })
                .collect()
        }
        Action::Shake => {
            let s = uniform(r, 7.0, 10.0);
            let (w, h) = (s * aspect, s / aspect);
            let amp = uniform(r, 1.5, 2.5);
            let phase = uniform(r, 0.0, 2.0 * PI);
            let cx = uniform(r, w / 2.0 + amp, side - w / 2.0 - amp);
            let cy = uniform(r, h / 2.0, side - h / 2.0);
            (0..len)
                .map(|t| BoxState {
                    cx: cx + amp * libm::sin(PI * t as f64 / 2.0 + phase),
                    cy,
                    w,
                    h,
                })
                .collect()
        }
        Action::Orbit => {
            let s = uniform(r, 7.0, 9.0);
            let (w, h) = (s * aspect, s / aspect);
            let radius = uniform(r, 3.0, 5.0);
            let turns = uniform(r, 0.75, 1.25);
            let dir = if r.gen::<bool>() { 1.0 } else { -1.0 };
            let omega = dir * 2.0 * PI * turns / steps;
            let phase = uniform(r, 0.0, 2.0 * PI);
            let mx = radius + w / 2.0;
            let my = radius + h / 2.0;
            let cx = uniform(r, mx, side - mx);
            let cy = uniform(r, my, side - my);
            (0..len)
                .map(|t| {
                    let a = omega * t as f64 + phase;
                    BoxState {
                        cx: cx + radius * libm::cos(a),
                        cy: cy + radius * libm::sin(a),
                        w,
                        h,
                    }
                })
                .collect()
        }
    }
}

fn distractor_trajectory<R: Rng + ?Sized>(side: f64, len: usize, r: &mut R) -> Vec<BoxState> {
    let s = uniform(r, 6.0, 9.0);
    let (w, h) = (s, s * uniform(r, 0.85, 1.15));
    let (mut cx, mut cy) = (uniform(r, w / 2.0, side - w / 2.0), uniform(r, h / 2.0, side - h / 2.0));
    let jitter = r.gen::<bool>();
    (0..len)
        .map(|t| {
            if jitter && t > 0 {
                cx = (cx + uniform(r, -0.5, 0.5)).clamp(w / 2.0, side - w / 2.0);
                cy = (cy + uniform(r, -0.5, 0.5)).clamp(h / 2.0, side - h / 2.0);
            }
            BoxState { cx, cy, w, h }
        })
        .collect()
}

/// Samples the geometry of one episode. Distractor identities are drawn
/// from `vocabulary` (never the target's own identity).
pub fn plan_episode(
    cfg: &GeneratorConfig,
    object_id: usize,
    action_id: usize,
    vocabulary: &[usize],
    seed: u64,
) -> EpisodeSpec {
    let action = Action::from_label(action_id).expect("action id in range");
    let mut r = rng::stream(seed, &[0x9e0]);
    let side = cfg.side as f64;
    let trajectory = target_trajectory(action, side, cfg.raw_length, &mut r);
    let others: Vec<usize> = vocabulary.iter().copied().filter(|&o| o != object_id).collect();
    let n = if others.is_empty() { 0 } else { r.gen_range(0..=cfg.max_distractors) };
    let distractors = (0..n)
        .map(|_| Distractor {
            object_id: others[r.gen_range(0..others.len())],
            trajectory: distractor_trajectory(side, cfg.raw_length, &mut r),
        })
        .collect();
    EpisodeSpec {
        object_id,
        action_id,
        trajectory,
        distractors,
        noise_seed: rng::derive_seed(seed, &[0x4015e]),
        noise_sigma: cfg.noise_sigma,
        side: cfg.side,
        n_objects: cfg.n_objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inside(b: &BoxState, side: f64) -> bool {
        b.cx - b.w / 2.0 >= -1e-9 && b.cx + b.w / 2.0 <= side + 1e-9 && b.cy - b.h / 2.0 >= -1e-9 && b.cy + b.h / 2.0 <= side + 1e-9
    }

    #[test]
    fn trajectories_stay_on_canvas_and_obey_their_motion() {
        let cfg = GeneratorConfig::default();
        let vocab: Vec<usize> = (0..24).collect();
        for seed in 0..40u64 {
            for a in Action::ALL {
                let spec = plan_episode(&cfg, 3, a.label(), &vocab, seed);
                let tr = &spec.trajectory;
                assert!(tr.iter().all(|b| inside(b, 32.0)), "{a:?} seed {seed}");
                for d in &spec.distractors {
                    assert_ne!(d.object_id, 3);
                    assert!(d.trajectory.iter().all(|b| inside(b, 32.0)));
                }
                let pairs = tr.windows(2);
                match a {
                    Action::MoveLeft => assert!(pairs.clone().all(|p| p[1].cx < p[0].cx)),
                    Action::MoveRight => assert!(pairs.clone().all(|p| p[1].cx > p[0].cx)),
                    Action::MoveUp => assert!(pairs.clone().all(|p| p[1].cy < p[0].cy)),
                    Action::MoveDown => assert!(pairs.clone().all(|p| p[1].cy > p[0].cy)),
                    Action::MoveUpLeft => assert!(pairs.clone().all(|p| p[1].cx < p[0].cx && p[1].cy < p[0].cy)),
                    Action::Grow => assert!(pairs.clone().all(|p| p[1].w > p[0].w && p[1].h > p[0].h)),
                    Action::Shrink => assert!(pairs.clone().all(|p| p[1].w < p[0].w && p[1].h < p[0].h)),
                    _ => {}
                }
            }
        }
    }
}
