use mmdl_core::nets::{
    box_model_forward, frame_model_forward, init_params, param_count, predict_with, ArchConfig, BoxToken, Category,
    Hooks, Input, Modality,
};
use mmdl_core::rng;
use mmdl_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

/// Parameter count written out from the architecture by hand.
fn closed_form(a: &ArchConfig, m: Modality) -> usize {
    let d = a.d_model;
    let attn = 2 * d + d * 3 * d + 3 * d + d * d + d;
    let mlp = 2 * d + d * a.mlp_ratio * d + a.mlp_ratio * d + a.mlp_ratio * d * d + d;
    let tail = 2 * d + d * a.n_classes + a.n_classes;
    let np = (a.input_side / a.patch_size).pow(2);
    match m {
        Modality::Rgb | Modality::Flow => {
            let pd = a.patch_size * a.patch_size * a.in_channels;
            pd * d + d + np * d + a.n_frames * d + a.n_blocks * (2 * attn + mlp) + tail
        }
        Modality::Boxes => 4 * d + d + 3 * d + a.n_frames * d + 2 * a.n_blocks * (attn + mlp) + tail,
    }
}

#[test]
fn param_count_matches_closed_form() {
    for m in Modality::ALL {
        let arch = ArchConfig::default().for_modality(m);
        assert_eq!(param_count(&arch, m), closed_form(&arch, m));
        assert_eq!(init_params(&arch, m, 0).unwrap().count(), closed_form(&arch, m));
    }
    let wide = ArchConfig { d_model: 64, n_blocks: 4, ..ArchConfig::default() };
    assert_eq!(param_count(&wide, Modality::Rgb), closed_form(&wide, Modality::Rgb));
}

fn random_clip(arch: &ArchConfig, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    let s = arch.input_side;
    Tensor::from_fn(&[arch.n_frames, s, s, arch.in_channels], |_| r.gen_range(0.0..1.0))
}

fn permute_frames(clip: &Tensor, order: &[usize]) -> Tensor {
    let per = clip.numel() / clip.shape()[0];
    let mut out = Vec::with_capacity(clip.numel());
    for &f in order {
        out.extend_from_slice(&clip.data()[f * per..(f + 1) * per]);
    }
    Tensor::new(clip.shape(), out).unwrap()
}

fn batch(clip: &Tensor) -> Input {
    let mut shape = vec![1];
    shape.extend_from_slice(clip.shape());
    Input::Frames(clip.clone().reshape(&shape).unwrap())
}

#[test]
fn frame_model_is_order_free_without_position_or_attention() {
    let arch = ArchConfig::default();
    let params = init_params(&arch, Modality::Rgb, 3).unwrap();
    let clip = random_clip(&arch, 4);
    let hooks = Hooks { identity_attention: true, no_positional: true };
    let base = predict_with(&params, &batch(&clip), &hooks).unwrap();
    let mut r = rng::stream(5, &[]);
    for _ in 0..3 {
        let mut order: Vec<usize> = (0..arch.n_frames).collect();
        order.shuffle(&mut r);
        let moved = predict_with(&params, &batch(&permute_frames(&clip, &order)), &hooks).unwrap();
        assert!(base.max_abs_diff(&moved) < 1e-10);
    }
    // With positions on, order matters.
    let reversed: Vec<usize> = (0..arch.n_frames).rev().collect();
    let a = frame_model_forward(&params, &clip).unwrap();
    let b = frame_model_forward(&params, &permute_frames(&clip, &reversed)).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn box_model_ignores_distractor_order() {
    let arch = ArchConfig::default();
    let params = init_params(&arch, Modality::Boxes, 9).unwrap();
    let tok = |t, cx, cy, category| BoxToken { t, cx, cy, w: 0.2, h: 0.25, category };
    let frames: Vec<Vec<BoxToken>> = (0..arch.n_frames)
        .map(|t| {
            let s = t as f64 * 0.05;
            vec![
                tok(t, 0.2 + s, 0.5, Category::Target),
                tok(t, 0.7, 0.3, Category::Distractor),
                tok(t, 0.4, 0.8 - s, Category::Distractor),
            ]
        })
        .collect();
    let mut swapped = frames.clone();
    swapped[3].swap(1, 2);
    let a = box_model_forward(&params, &frames).unwrap();
    let b = box_model_forward(&params, &swapped).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-10));
    assert_eq!(a, box_model_forward(&params, &frames).unwrap());
}

#[test]
fn eval_forward_is_deterministic() {
    let arch = ArchConfig::default().for_modality(Modality::Flow);
    let params = init_params(&arch, Modality::Flow, 1).unwrap();
    let clip = random_clip(&arch, 2);
    let a = frame_model_forward(&params, &clip).unwrap();
    assert_eq!(a.len(), arch.n_classes);
    assert_eq!(a, frame_model_forward(&params, &clip).unwrap());
}
