//! Distillation mathematics: temperature scaling, the KL objective, logit
//! averaging for multimodal teachers, and shared-view sampling.
//!
//! The teacher is an ensemble of frozen per-modality classifiers whose
//! logits are averaged before the softmax. Student and teacher members all
//! consume the same [`ViewPlan`] for a given sample.

mod view;

use alloc::format;
use alloc::vec::Vec;

pub use view::{
    materialize, materialize_batch, sample_view_plan, CropRect, InputKind, ViewPlan, CROP_SIZE,
};

use crate::error::{Error, Result};
use crate::nets::{self, ModelParams, Modality};
use crate::synth::Episode;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are floored at this value inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A length-C distribution: nonnegative entries summing to 1 within 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("not a probability vector (sum {sum})")));
        }
        Ok(ProbabilityVector(p))
    }

    /// `softmax(logits)`.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::contract("empty logit vector"));
        }
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN logit".into()));
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| libm::exp(v - m)).collect();
        let s: f64 = e.iter().sum();
        Ok(ProbabilityVector(e.into_iter().map(|v| v / s).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub tau: f64,
    /// Multiply the KL term by tau².
    pub scale_loss_by_tau_sq: bool,
    /// Weight of the hard-label cross-entropy; the KL term gets `1 - w`.
    pub hard_label_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 10.0,
            scale_loss_by_tau_sq: true,
            hard_label_weight: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.hard_label_weight) {
            return Err(Error::config("hard_label_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `p_i ∝ exp(ln p_i / tau)`. Ranking is preserved; entries are floored at
/// [`PROB_FLOOR`] before the logarithm so zeros never produce NaN. `tau == 1`
/// returns the input unchanged.
pub fn temperature_scale(p: &ProbabilityVector, tau: f64) -> Result<ProbabilityVector> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    if tau == 1.0 {
        return Ok(p.clone());
    }
    let logs: Vec<f64> = p.0.iter().map(|&v| libm::log(v.max(PROB_FLOOR)) / tau).collect();
    ProbabilityVector::from_logits(&logs)
}

/// `KL(p_t || p_s) = Σ p_t (ln p_t − ln p_s)`, logs floored at [`PROB_FLOOR`].
pub fn kl_divergence(p_t: &ProbabilityVector, p_s: &ProbabilityVector) -> Result<f64> {
    if p_t.len() != p_s.len() {
        return Err(Error::dim("kd_loss", &[p_t.len()], &[p_s.len()]));
    }
    Ok(p_t
        .0
        .iter()
        .zip(&p_s.0)
        .map(|(&t, &s)| t * (libm::log(t.max(PROB_FLOOR)) - libm::log(s.max(PROB_FLOOR))))
        .sum())
}

/// [`kl_divergence`] with the configured tau² scaling. Both inputs must
/// already be temperature-scaled.
pub fn kd_loss(p_t: &ProbabilityVector, p_s: &ProbabilityVector, cfg: &DistillConfig) -> Result<f64> {
    let kl = kl_divergence(p_t, p_s)?;
    Ok(if cfg.scale_loss_by_tau_sq { kl * cfg.tau * cfg.tau } else { kl })
}

/// Batch distillation loss on the tape: mean over rows of
/// `KL(teacher_probs || softmax(student_logits / tau))`, scaled per
/// `cfg`, optionally mixed with hard-label cross-entropy. The teacher side
/// is a constant, so gradients reach the student only.
pub fn kd_loss_graph(
    g: &mut Graph,
    student_logits: Var,
    teacher_probs: &Tensor,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    let shape = g.shape(student_logits).to_vec();
    if shape.len() != 2 || teacher_probs.shape() != shape.as_slice() {
        return Err(Error::dim("kd_loss", &shape, teacher_probs.shape()));
    }
    let b = shape[0];
    let tempered = g.scale(student_logits, 1.0 / cfg.tau);
    let p_s = g.softmax(tempered)?;
    let log_s = g.log(p_s, PROB_FLOOR);
    let log_t: Vec<f64> = teacher_probs.data().iter().map(|&t| libm::log(t.max(PROB_FLOOR))).collect();
    let diff = {
        let lt = g.constant(Tensor::new(&shape, log_t)?);
        g.sub(lt, log_s)?
    };
    let pt = g.constant(teacher_probs.clone());
    let terms = g.mul(diff, pt)?;
    let total = g.sum_all(terms);
    let factor = if cfg.scale_loss_by_tau_sq { cfg.tau * cfg.tau } else { 1.0 };
    let kd = g.scale(total, factor / b as f64);
    if cfg.hard_label_weight == 0.0 {
        return Ok(kd);
    }
    let ce = cross_entropy(g, student_logits, labels)?;
    let kd = g.scale(kd, 1.0 - cfg.hard_label_weight);
    let ce = g.scale(ce, cfg.hard_label_weight);
    g.add(kd, ce)
}

/// Mean cross-entropy of logits `[B, C]` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
    }
    let c = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
    }
    let logp = g.log_softmax(logits)?;
    let onehot = Tensor::from_fn(&shape, |i| if labels[i / c] == i % c { -1.0 } else { 0.0 });
    let onehot = g.constant(onehot);
    let picked = g.mul(logp, onehot)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, 1.0 / labels.len() as f64))
}

/// Elementwise mean of equally long logit vectors.
pub fn ensemble_logits(members: &[&[f64]]) -> Result<Vec<f64>> {
    let first = members.first().ok_or_else(|| Error::contract("ensemble of zero members"))?;
    let mut out = alloc::vec![0.0; first.len()];
    for m in members {
        if m.len() != first.len() {
            return Err(Error::dim("ensemble_logits", &[first.len()], &[m.len()]));
        }
        out.iter_mut().zip(m.iter()).for_each(|(o, v)| *o += v);
    }
    let n = members.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// A frozen multimodal teacher: at least one member, no repeated modality.
#[derive(Clone, Debug)]
pub struct Teacher {
    members: Vec<ModelParams>,
}

impl Teacher {
    pub fn new(members: Vec<ModelParams>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("teacher needs at least one member"));
        }
        for (i, m) in members.iter().enumerate() {
            if members[..i].iter().any(|o| o.modality == m.modality) {
                return Err(Error::config(format!("duplicate teacher modality {}", m.modality)));
            }
        }
        Ok(Teacher { members })
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.members.iter().map(|m| m.modality).collect()
    }

    /// Averaged member logits `[B, C]`.
    pub fn logits(&self, episodes: &[&Episode], plans: &[ViewPlan]) -> Result<Tensor> {
        let refs: Vec<&ModelParams> = self.members.iter().collect();
        ensemble_batch_logits(&refs, episodes, plans)
    }
}

/// Averaged logits `[B, C]` of `members`, each fed its own modality under
/// the shared per-sample `plans`. Evaluated without recording a tape.
pub fn ensemble_batch_logits(members: &[&ModelParams], episodes: &[&Episode], plans: &[ViewPlan]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for m in members {
        let input = materialize_batch(episodes, plans, InputKind::from(m.modality), &m.arch)?;
        let z = nets::predict(m, &input)?;
        match acc.as_mut() {
            None => acc = Some(z),
            Some(a) => {
                if a.shape() != z.shape() {
                    return Err(Error::dim("ensemble_logits", a.shape(), z.shape()));
                }
                a.data_mut().iter_mut().zip(z.data()).for_each(|(x, y)| *x += y);
            }
        }
    }
    let mut acc = acc.ok_or_else(|| Error::contract("ensemble of zero members"))?;
    let n = members.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Teacher distribution for one sample: averaged logits, softmax, then
/// temperature scaling by `cfg.tau`.
pub fn teacher_predict(
    members: &[&ModelParams],
    episode: &Episode,
    plan: &ViewPlan,
    cfg: &DistillConfig,
) -> Result<ProbabilityVector> {
    let z = ensemble_batch_logits(members, &[episode], core::slice::from_ref(plan))?;
    let p = ProbabilityVector::from_logits(z.data())?;
    temperature_scale(&p, cfg.tau)
}

/// Row-wise `softmax(logits / tau)` of `[B, C]`.
pub fn tempered_softmax(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let c = *logits.shape().last().ok_or_else(|| Error::dim("softmax", logits.shape(), &[]))?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(c) {
        let scaled: Vec<f64> = row.iter().map(|v| v / tau).collect();
        out.extend(ProbabilityVector::from_logits(&scaled)?.into_vec());
    }
    Tensor::new(logits.shape(), out)
}
