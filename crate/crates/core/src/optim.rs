//! AdamW with decoupled weight decay, global-norm clipping and a linear
//! warmup / linear decay schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimHyper {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            peak_lr: 4e-3,
            weight_decay: 1e-3,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            batch_size: 32,
            warmup_fraction: 0.1,
        }
    }
}

impl OptimHyper {
    /// The published fine-tuning values (peak 5e-5).
    pub fn paper() -> Self {
        OptimHyper {
            peak_lr: 5e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_lr", self.peak_lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{k} must be positive, got {v}")));
        }
        if !(self.beta1 < 1.0 && self.beta2 < 1.0) {
            return Err(Error::config("betas must lie in (0, 1)"));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        libm::ceil(self.warmup_fraction * total_steps as f64) as usize
    }
}

/// Learning rate at `step` of `total_steps`: linear 0 → peak over the first
/// ⌈warmup_fraction · total⌉ steps, then linear peak → 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, hyper: &OptimHyper) -> Result<f64> {
    if step > total_steps {
        return Err(Error::contract(format!("step {step} past schedule end {total_steps}")));
    }
    let w = hyper.warmup_steps(total_steps);
    Ok(if step <= w {
        if w == 0 { hyper.peak_lr } else { hyper.peak_lr * step as f64 / w as f64 }
    } else {
        hyper.peak_lr * (total_steps - step) as f64 / (total_steps - w) as f64
    })
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    libm::sqrt(grads.into_iter().flatten().map(|g| g * g).sum::<f64>())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads.iter().map(|g| &**g));
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    Ok(norm)
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        OptimState {
            step: 0,
            moments: params
                .iter()
                .map(|(k, t)| (k.clone(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
                .collect(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW step on a single tensor. `t` is the 1-based step count used
/// for bias correction.
pub fn adamw_tensor(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, h: &OptimHyper) {
    let bc1 = 1.0 - libm::pow(h.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(h.beta2, t as f64);
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let step = (m[i] / bc1) / (libm::sqrt(v[i] / bc2) + h.eps);
        p[i] -= lr * h.weight_decay * p[i];
        p[i] -= lr * step;
    }
}

/// AdamW over every parameter; `grads` must carry one tensor per
/// parameter name with matching shape.
pub fn adamw_update(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    lr: f64,
    hyper: &OptimHyper,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::dim("adamw_update", p.shape(), g.shape()));
        }
        if !state.moments.contains_key(name) {
            return Err(Error::contract(format!("optimizer state lacks `{name}`")));
        }
    }
    state.step += 1;
    for (name, p) in params.iter_mut() {
        let (m, v) = state.moments.get_mut(name.as_str()).unwrap();
        adamw_tensor(p.data_mut(), grads[name.as_str()].data(), m, v, state.step, lr, hyper);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let h = OptimHyper::paper();
        assert_eq!(lr_at(100, 1000, &h).unwrap(), 5e-5);
        assert_eq!(lr_at(1000, 1000, &h).unwrap(), 0.0);
        assert_eq!(lr_at(0, 1000, &h).unwrap(), 0.0);
        assert!((lr_at(550, 1000, &h).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(lr_at(1001, 1000, &h).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut a = [3.0, 0.0];
        let mut b = [0.0];
        assert_eq!(clip_global_norm(&mut [&mut a, &mut b], 5.0).unwrap(), 3.0);
        assert_eq!(a, [3.0, 0.0]);

        let mut a = [6.0, 0.0];
        let mut b = [8.0];
        assert_eq!(clip_global_norm(&mut [&mut a, &mut b], 5.0).unwrap(), 10.0);
        assert_eq!((a, b), ([3.0, 0.0], [4.0]));
        assert!((global_norm([&a[..], &b[..]]) - 5.0).abs() < 1e-12);

        let mut z = [0.0; 3];
        clip_global_norm(&mut [&mut z], 5.0).unwrap();
        assert_eq!(z, [0.0; 3]);

        let mut n = [f64::NAN];
        assert!(matches!(clip_global_norm(&mut [&mut n], 5.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let h = OptimHyper::default();
        let (mut p, mut m, mut v) = ([2.0], [0.0], [0.0]);
        adamw_tensor(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &h);
        assert_eq!(p[0], 2.0 - 0.1 * 1e-3 * 2.0);
    }

    #[test]
    fn validation() {
        assert!(OptimHyper::default().validate().is_ok());
        assert!(OptimHyper { warmup_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(OptimHyper { epochs: 0, ..Default::default() }.validate().is_err());
    }
}
