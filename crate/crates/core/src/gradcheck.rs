//! Central finite-difference checks of tape gradients.
//!
//! Only meaningful for functions that are smooth around the probe point.
//! Piecewise selections (argmax, top-k, the floor in [`Graph::log`]) are
//! unsupported inputs: the check will report large errors at the kinks.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::distill::{cross_entropy, kd_loss_graph, DistillConfig};
use crate::error::Result;
use crate::nets::{self, init_params, ArchConfig, BoxBatch, BoxToken, Category, Hooks, Input, ModelParams, Modality};
use crate::rng;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Per-input outcome of [`gradcheck_many`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Max relative error over each input's coordinates.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Denominator floor of [`relative_error`]. Gradients that vanish exactly
/// (for instance attention key biases, which softmax cancels) leave only
/// finite-difference rounding noise of order 1e-11; the floor keeps that
/// noise from reading as a relative error.
pub const ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(ERROR_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(ERROR_FLOOR, analytic.abs() + numeric.abs())
}

/// Max relative error between the tape gradient of scalar `f` at `x` and a
/// central difference with step `h`.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = gradcheck_many(|g, v| f(g, v[0]), core::slice::from_ref(x), h)?;
    Ok(report.max_rel_error())
}

/// Like [`finite_diff_gradcheck`] but differentiates w.r.t. several inputs.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| alloc::vec![0.0; g.value(v).numel()]))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        // A recording graph, so train-only ops such as dropout behave as in
        // the analytic pass; constant leaves keep it from taping anything.
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
        }
        per_input.push(worst);
    }
    Ok(GradCheck { per_input })
}

/// Tolerance of the per-op checks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance of the whole-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step used by [`suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// One line of the gradient suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[0x6c4]);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// `sum(y * w)` for a fixed pseudo-random `w`, so every output coordinate
/// reaches the loss with its own weight.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let w = g.constant(rand_tensor(g.shape(y), 99));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y)
        }),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y)
        }),
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y)
        }),
        ("sub_broadcast", vec![vec![2, 3, 4], vec![3, 1]], |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe(g, y)
        }),
        ("mul_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y)
        }),
        ("scale", vec![vec![5]], |g, v| {
            let y = g.scale(v[0], -1.7);
            probe(g, y)
        }),
        ("add_scalar", vec![vec![5]], |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            let y = g.mul(y, y)?;
            probe(g, y)
        }),
        ("reshape", vec![vec![2, 6]], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            probe(g, y)
        }),
        ("permute", vec![vec![2, 3, 4]], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            probe(g, y)
        }),
        ("transpose", vec![vec![3, 4]], |g, v| {
            let y = g.transpose(v[0], 0, 1)?;
            probe(g, y)
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            probe(g, y)
        }),
        ("slice", vec![vec![3, 5]], |g, v| {
            let y = g.slice(v[0], 1, 1, 3)?;
            probe(g, y)
        }),
        ("sum_axis", vec![vec![2, 3, 4]], |g, v| {
            let y = g.sum(v[0], 1)?;
            probe(g, y)
        }),
        ("mean_axis", vec![vec![2, 3, 4]], |g, v| {
            let y = g.mean(v[0], 2)?;
            probe(g, y)
        }),
        ("sum_all", vec![vec![2, 3]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum_all(y))
        }),
        ("mean_all", vec![vec![2, 3]], |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean_all(y))
        }),
        ("gelu", vec![vec![7]], |g, v| {
            let y = g.gelu(v[0]);
            probe(g, y)
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            probe(g, y)
        }),
        ("softmax", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0])?;
            probe(g, y)
        }),
        ("log_softmax", vec![vec![3, 5]], |g, v| {
            let y = g.log_softmax(v[0])?;
            probe(g, y)
        }),
        ("log", vec![vec![6]], |g, v| {
            // Keep the argument well inside the smooth region.
            let sq = g.mul(v[0], v[0])?;
            let pos = g.add_scalar(sq, 0.5);
            let y = g.log(pos, 1e-12);
            probe(g, y)
        }),
        ("embedding", vec![vec![4, 3]], |g, v| {
            let y = g.embedding(v[0], &[2, 0, 2, 3])?;
            probe(g, y)
        }),
        ("dropout", vec![vec![4, 5]], |g, v| {
            let mut r = rng::stream(5, &[]);
            let y = g.dropout(v[0], 0.3, &mut r);
            probe(g, y)
        }),
        ("cross_entropy", vec![vec![3, 4]], |g, v| cross_entropy(g, v[0], &[1, 3, 0])),
        ("kd_loss", vec![vec![3, 4]], |g, v| {
            let t = Tensor::new(&[3, 4], vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25])?;
            let cfg = DistillConfig {
                tau: 2.0,
                hard_label_weight: 0.3,
                ..DistillConfig::default()
            };
            kd_loss_graph(g, v[0], &t, &[3, 0, 1], &cfg)
        }),
    ]
}

/// The small architecture used for whole-model checks.
pub fn tiny_arch(modality: Modality) -> ArchConfig {
    ArchConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        mlp_ratio: 2,
        patch_size: 4,
        n_frames: 2,
        n_classes: 3,
        in_channels: 3,
        input_side: 8,
        max_boxes: 3,
    }
    .for_modality(modality)
}

/// Max relative error of `sum(logits * w)` w.r.t. every parameter.
pub fn model_gradcheck(params: &ModelParams, input: &Input, h: f64) -> Result<f64> {
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let p = ModelParams::from_tensors(
            params.arch.clone(),
            params.modality,
            names.iter().cloned().zip(vars.iter().map(|&v| g.value(v).clone())),
        )?;
        let bound = nets::Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let z = nets::logits(g, &bound, &p, input, &Hooks::default())?;
        probe(g, z)
    };
    Ok(gradcheck_many(f, &tensors, h)?.max_rel_error())
}

fn model_input(arch: &ArchConfig, modality: Modality) -> Result<Input> {
    if modality == Modality::Boxes {
        let tok = |t, cx, cy, category| BoxToken {
            t,
            cx,
            cy,
            w: 0.2,
            h: 0.3,
            category,
        };
        let a = vec![
            vec![tok(0, 0.3, 0.4, Category::Target), tok(0, 0.7, 0.2, Category::Distractor)],
            vec![tok(1, 0.35, 0.45, Category::Target)],
        ];
        let b = vec![vec![tok(0, 0.5, 0.5, Category::Target)], vec![tok(1, 0.55, 0.45, Category::Target)]];
        return Ok(Input::Boxes(BoxBatch::pack(&[&a, &b], arch)?));
    }
    let (s, c) = (arch.input_side, arch.in_channels);
    let mut r = rng::stream(17, &[c as u64]);
    Ok(Input::Frames(Tensor::from_fn(&[2, arch.n_frames, s, s, c], |_| r.gen_range(0.0..1.0))))
}

/// Runs every op and tiny-model check.
pub fn suite() -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_cases().into_iter().enumerate() {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(j, s)| rand_tensor(s, (i * 8 + j) as u64))
            .collect();
        out.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: gradcheck_many(f, &inputs, SUITE_STEP)?.max_rel_error(),
            tolerance: OP_TOLERANCE,
        });
    }
    for modality in Modality::ALL {
        let arch = tiny_arch(modality);
        let params = init_params(&arch, modality, 5)?;
        let input = model_input(&arch, modality)?;
        out.push(SuiteEntry {
            name: alloc::format!("model_{modality}"),
            max_rel_error: model_gradcheck(&params, &input, SUITE_STEP)?,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(out)
}
