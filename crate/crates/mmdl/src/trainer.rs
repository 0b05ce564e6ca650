//! Training runs: per-modality baselines, the distilled student and the
//! omnivorous model.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use sha2::{Digest, Sha256};

use mmdl_core::distill::{
    self, kd_loss_graph, materialize_batch, sample_view_plan, temperature_scale, DistillConfig, InputKind,
    ProbabilityVector, Teacher, ViewPlan, CROP_SIZE,
};
use mmdl_core::metrics::topk_accuracy;
use mmdl_core::nets::{self, init_params, ArchConfig, Hooks, Input, ModelParams, Modality};
use mmdl_core::optim::{adamw_update, clip_global_norm, lr_at, OptimHyper, OptimState};
use mmdl_core::rng;
use mmdl_core::synth::{Episode, Mode};
use mmdl_core::{Graph, Tensor};

use crate::checkpoint;
use crate::dataset::{Dataset, Family};
use crate::error::{Error, Result};
use crate::teacher::TeacherSpec;
use crate::wire::write_file;

const INIT: u64 = 0x1417;
const SHUFFLE: u64 = 0x5401;
const VIEW: u64 = 0x7e3;
const OMNI: u64 = 0x0e1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Baseline,
    Student,
    Omnivore,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Baseline => "baseline",
            Role::Student => "student",
            Role::Omnivore => "omnivore",
        }
    }
}

/// Everything that determines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub role: Role,
    /// The model's input modality; student and omnivore see RGB at test time.
    pub modality: Modality,
    pub arch: ArchConfig,
    pub optim: OptimHyper,
    /// Student only.
    pub distill: DistillConfig,
    /// Student only.
    pub teacher: Option<TeacherSpec>,
    pub dataset: PathBuf,
    pub family: Family,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn baseline(modality: Modality, dataset: &Path, family: Family, seed: u64, out: &Path) -> Self {
        RunConfig {
            role: Role::Baseline,
            modality,
            arch: ArchConfig::default(),
            optim: OptimHyper::default(),
            distill: DistillConfig::default(),
            teacher: None,
            dataset: dataset.to_path_buf(),
            family,
            seed,
            out: out.to_path_buf(),
        }
    }

    pub fn student(teacher: TeacherSpec, dataset: &Path, family: Family, seed: u64, out: &Path) -> Self {
        RunConfig {
            role: Role::Student,
            teacher: Some(teacher),
            ..Self::baseline(Modality::Rgb, dataset, family, seed, out)
        }
    }

    /// Omnivore with 3× the baseline schedule.
    pub fn omnivore(dataset: &Path, family: Family, seed: u64, out: &Path) -> Self {
        let mut cfg = Self::baseline(Modality::Rgb, dataset, family, seed, out);
        cfg.role = Role::Omnivore;
        cfg.optim.epochs *= 3;
        cfg
    }

    pub fn modalities(&self) -> Vec<Modality> {
        match self.role {
            Role::Baseline => vec![self.modality],
            Role::Omnivore => Modality::ALL.to_vec(),
            Role::Student => self
                .teacher
                .as_ref()
                .map(|t| t.members.iter().map(|(_, m)| *m).collect())
                .unwrap_or_default(),
        }
    }

    pub fn model_arch(&self) -> ArchConfig {
        self.arch.clone().for_modality(self.modality)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_arch().validate()?;
        self.optim.validate()?;
        match self.role {
            Role::Student => {
                self.distill.validate()?;
                if self.teacher.is_none() {
                    return Err(Error::config("student run needs a teacher spec"));
                }
                if self.modality != Modality::Rgb {
                    return Err(Error::config("the student consumes RGB frames"));
                }
            }
            Role::Omnivore if self.modality != Modality::Rgb => {
                return Err(Error::config("the omnivore is a 3-channel frame model"));
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable `key=value` description; the basis of [`RunConfig::hash`].
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("role", self.role.as_str().into());
        kv("modality", self.modality.as_str().into());
        kv("modalities", crate::teacher::modalities_label(self.modalities()));
        for line in self.model_arch().to_descriptor(self.modality).lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv(&format!("arch.{k}"), v.into());
            }
        }
        let o = &self.optim;
        kv("optim.peak_lr", format!("{:e}", o.peak_lr));
        kv("optim.weight_decay", format!("{:e}", o.weight_decay));
        kv("optim.grad_clip", format!("{}", o.grad_clip));
        kv("optim.beta1", format!("{}", o.beta1));
        kv("optim.beta2", format!("{}", o.beta2));
        kv("optim.eps", format!("{:e}", o.eps));
        kv("optim.epochs", o.epochs.to_string());
        kv("optim.batch_size", o.batch_size.to_string());
        kv("optim.warmup_fraction", format!("{}", o.warmup_fraction));
        if self.role == Role::Student {
            kv("distill.tau", format!("{}", self.distill.tau));
            kv("distill.scale_loss_by_tau_sq", self.distill.scale_loss_by_tau_sq.to_string());
            kv("distill.hard_label_weight", format!("{}", self.distill.hard_label_weight));
            if let Some(t) = &self.teacher {
                for (p, m) in &t.members {
                    kv(&format!("teacher.{m}"), relative_to(p, &self.out));
                }
            }
        }
        kv("dataset", relative_to(&self.dataset, &self.out));
        kv("split", self.family.as_str().into());
        kv("seed", self.seed.to_string());
        s
    }

    /// First 16 hex digits of SHA-256 over [`RunConfig::describe`]. Input
    /// paths enter relative to the output directory, so relocating a whole
    /// run tree keeps its hashes.
    pub fn hash(&self) -> String {
        hex16(&Sha256::digest(self.describe().as_bytes()))
    }
}

/// `path` as seen from directory `base`, when both are absolute or both
/// relative; otherwise `path` unchanged.
pub fn relative_to(path: &Path, base: &Path) -> String {
    if path.is_absolute() != base.is_absolute() {
        return path.display().to_string();
    }
    let (p, b): (Vec<_>, Vec<_>) = (path.components().collect(), base.components().collect());
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &p[common..] {
        rel.push(c);
    }
    rel.display().to_string()
}

pub fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Role-specific `key=value` pairs.
    pub extra: String,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ModelParams,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Student runs: chained digest over every (teacher view, student view) pair.
    pub view_hash: Option<[u8; 32]>,
    /// Student runs: sample views whose teacher and student digests matched.
    pub views_verified: usize,
    /// Omnivore runs: how often each input kind (rgb, flow image, box canvas) was drawn.
    pub kind_counts: [usize; 3],
}

impl Trained {
    pub fn metrics_log(&self, cfg: &RunConfig) -> String {
        let mut s = String::new();
        for line in cfg.describe().lines() {
            writeln!(s, "# {line}").unwrap();
        }
        writeln!(s, "# config_hash={}", cfg.hash()).unwrap();
        writeln!(s, "# epoch\tsplit\tloss\ttop1\ttop5\tlr\textra").unwrap();
        for e in &self.epochs {
            writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.2}\t{:.2}\t{:e}\t{}",
                e.epoch,
                cfg.family.test().as_str(),
                e.loss,
                e.top1,
                e.top5,
                e.lr,
                e.extra
            )
            .unwrap();
        }
        s
    }
}

/// Test hooks for the student loop.
#[derive(Clone, Debug, Default)]
pub struct StudentHooks {
    /// Hand the student a perturbed view at this step.
    pub desync_at_step: Option<usize>,
}

fn train_plan(seed: u64, epoch: usize, sample: usize, ep: &Episode, arch: &ArchConfig) -> Result<ViewPlan> {
    let mut r = rng::stream(seed, &[VIEW, epoch as u64, sample as u64]);
    Ok(sample_view_plan(ep.raw_length(), ep.side(), arch.n_frames, CROP_SIZE, Mode::Train, &mut r)?)
}

pub fn eval_plan(ep: &Episode, arch: &ArchConfig) -> Result<ViewPlan> {
    let mut r = rng::stream(0, &[]);
    Ok(sample_view_plan(ep.raw_length(), ep.side(), arch.n_frames, CROP_SIZE, Mode::Eval, &mut r)?)
}

/// Eval-mode logits `[N, C]` of one model over `episodes`.
pub fn eval_logits(params: &ModelParams, kind: InputKind, episodes: &[&Episode], batch: usize) -> Result<Tensor> {
    batched_logits(episodes, batch, |eps, plans| {
        let input = materialize_batch(eps, plans, kind, &params.arch)?;
        Ok(nets::predict(params, &input)?)
    }, &params.arch)
}

/// Eval-mode averaged teacher logits `[N, C]`.
pub fn eval_teacher_logits(teacher: &Teacher, episodes: &[&Episode], batch: usize) -> Result<Tensor> {
    let arch = teacher.members()[0].arch.clone();
    batched_logits(episodes, batch, |eps, plans| Ok(teacher.logits(eps, plans)?), &arch)
}

fn batched_logits(
    episodes: &[&Episode],
    batch: usize,
    mut f: impl FnMut(&[&Episode], &[ViewPlan]) -> Result<Tensor>,
    arch: &ArchConfig,
) -> Result<Tensor> {
    if episodes.is_empty() {
        return Err(Error::Core(mmdl_core::Error::Contract("evaluation over zero episodes".into())));
    }
    let mut data = Vec::new();
    let mut c = 0;
    for chunk in episodes.chunks(batch.max(1)) {
        let plans = chunk.iter().map(|e| eval_plan(e, arch)).collect::<Result<Vec<_>>>()?;
        let z = f(chunk, &plans)?;
        c = z.shape()[1];
        data.extend_from_slice(z.data());
    }
    Ok(Tensor::new(&[episodes.len(), c], data)?)
}

fn scores(logits: &Tensor, episodes: &[&Episode]) -> Result<(f64, f64)> {
    let labels: Vec<usize> = episodes.iter().map(|e| e.label).collect();
    let k5 = 5.min(logits.shape()[1]);
    Ok((topk_accuracy(logits, &labels, 1)?, topk_accuracy(logits, &labels, k5)?))
}

struct StepCtx<'a> {
    epoch: usize,
    step: usize,
    /// Indices into the training list.
    batch: &'a [usize],
}

/// The shared optimization loop. `loss_fn` builds the batch loss on a
/// fresh graph; `epoch_extra` reports role-specific statistics.
fn fit<F, X>(
    cfg: &RunConfig,
    mut params: ModelParams,
    n_train: usize,
    eval: &mut dyn FnMut(&ModelParams) -> Result<(f64, f64)>,
    mut loss_fn: F,
    mut epoch_extra: X,
) -> Result<(ModelParams, Vec<EpochRecord>, usize)>
where
    F: FnMut(&mut Graph, &nets::Bound, &ModelParams, &StepCtx) -> Result<mmdl_core::Var>,
    X: FnMut() -> String,
{
    let h = &cfg.optim;
    if n_train == 0 {
        return Err(Error::config("training split is empty"));
    }
    let per_epoch = n_train.div_ceil(h.batch_size);
    let total = per_epoch * h.epochs;
    let mut state = OptimState::new(&params);
    let mut step = 0;
    let mut records = Vec::with_capacity(h.epochs);
    for epoch in 0..h.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut r = rng::stream(cfg.seed, &[SHUFFLE, epoch as u64]);
        for i in (1..n_train).rev() {
            order.swap(i, r.gen_range(0..=i));
        }
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        for batch in order.chunks(h.batch_size) {
            lr = lr_at(step, total, h)?;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let loss = loss_fn(&mut g, &bound, &params, &StepCtx { epoch, step, batch })?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Core(mmdl_core::Error::Numeric(format!(
                    "{} loss diverged ({value}) at epoch {epoch}, step {step}",
                    cfg.role.as_str()
                ))));
            }
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Tensor> = bound
                .iter()
                .map(|(k, &v)| {
                    let t = g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                    (k.clone(), t)
                })
                .collect();
            let mut slices: Vec<&mut [f64]> = grads.values_mut().map(|t| t.data_mut()).collect();
            clip_global_norm(&mut slices, h.grad_clip)?;
            adamw_update(&mut params, &grads, &mut state, lr, h)?;
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let (top1, top5) = eval(&params)?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / n_train as f64,
            top1,
            top5,
            lr,
            extra: epoch_extra(),
        };
        log::info!(
            "{} {} epoch {epoch}: loss {:.4} top1 {top1:.1} top5 {top5:.1} {}",
            cfg.role.as_str(),
            cfg.modality,
            rec.loss,
            rec.extra
        );
        records.push(rec);
    }
    Ok((params, records, step))
}

fn init(cfg: &RunConfig) -> Result<ModelParams> {
    let m = Modality::ALL.iter().position(|&m| m == cfg.modality).unwrap() as u64;
    Ok(init_params(&cfg.model_arch(), cfg.modality, rng::derive_seed(cfg.seed, &[INIT, m]))?)
}

fn split_lists(ds: &Dataset, family: Family) -> (Vec<&Episode>, Vec<&Episode>) {
    (ds.episodes(family.train()), ds.episodes(family.test()))
}

/// Cross-entropy training of one modality's model.
pub fn train_model(cfg: &RunConfig, ds: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    if cfg.role != Role::Baseline {
        return Err(Error::config("train_model runs baselines only"));
    }
    let (train, test) = split_lists(ds, cfg.family);
    let kind = InputKind::from(cfg.modality);
    let bs = cfg.optim.batch_size;
    let mut eval = |p: &ModelParams| scores(&eval_logits(p, kind, &test, bs)?, &test);
    let (params, epochs, steps) = fit(
        cfg,
        init(cfg)?,
        train.len(),
        &mut eval,
        |g, bound, params, ctx| {
            let eps: Vec<&Episode> = ctx.batch.iter().map(|&i| train[i]).collect();
            let plans = ctx
                .batch
                .iter()
                .map(|&i| train_plan(cfg.seed, ctx.epoch, i, train[i], &params.arch))
                .collect::<Result<Vec<_>>>()?;
            let input = materialize_batch(&eps, &plans, kind, &params.arch)?;
            let z = nets::logits(g, bound, params, &input, &Hooks::default())?;
            let labels: Vec<usize> = eps.iter().map(|e| e.label).collect();
            Ok(distill::cross_entropy(g, z, &labels)?)
        },
        String::new,
    )?;
    Ok(Trained {
        params,
        epochs,
        steps,
        view_hash: None,
        views_verified: 0,
        kind_counts: [0; 3],
    })
}

/// Distills `teacher` into an RGB frame model, feeding both the same view
/// of every sample.
pub fn train_student(cfg: &RunConfig, ds: &Dataset, teacher: &Teacher, hooks: &StudentHooks) -> Result<Trained> {
    cfg.validate()?;
    if cfg.role != Role::Student {
        return Err(Error::config("train_student needs a student run config"));
    }
    let (train, test) = split_lists(ds, cfg.family);
    let bs = cfg.optim.batch_size;
    let dcfg = cfg.distill.clone();
    let chain = Cell::new([0u8; 32]);
    // (verified, agreeing, seen) within the current epoch.
    let stats = Cell::new((0usize, 0usize, 0usize));
    let mut verified = 0usize;
    let mut eval = |p: &ModelParams| scores(&eval_logits(p, InputKind::Rgb, &test, bs)?, &test);
    let (params, epochs, steps) = fit(
        cfg,
        init(cfg)?,
        train.len(),
        &mut eval,
        |g, bound, params, ctx| {
            let eps: Vec<&Episode> = ctx.batch.iter().map(|&i| train[i]).collect();
            let plans = ctx
                .batch
                .iter()
                .map(|&i| train_plan(cfg.seed, ctx.epoch, i, train[i], &params.arch))
                .collect::<Result<Vec<_>>>()?;
            let teacher_views = plans.clone();
            let mut student_views = plans;
            if hooks.desync_at_step == Some(ctx.step) {
                student_views[0].crop.x ^= 1;
            }

            let tz = teacher.logits(&eps, &teacher_views)?;
            let c = tz.shape()[1];
            let mut targets = Vec::with_capacity(tz.numel());
            for row in tz.data().chunks_exact(c) {
                let p = ProbabilityVector::from_logits(row)?;
                targets.extend(temperature_scale(&p, dcfg.tau)?.into_vec());
            }
            let targets = Tensor::new(tz.shape(), targets)?;

            let mut digest = chain.get();
            for (k, (t, s)) in teacher_views.iter().zip(&student_views).enumerate() {
                let (dt, ds) = (t.digest(), s.digest());
                if dt != ds {
                    return Err(Error::Core(mmdl_core::Error::Contract(format!(
                        "teacher and student views differ at step {} (sample {})",
                        ctx.step, ctx.batch[k]
                    ))));
                }
                let mut h = Sha256::new();
                h.update(digest);
                h.update(dt);
                h.update(ds);
                digest = h.finalize().into();
            }
            chain.set(digest);

            let input = materialize_batch(&eps, &student_views, InputKind::Rgb, &params.arch)?;
            let z = nets::logits(g, bound, params, &input, &Hooks::default())?;
            let hits = g
                .value(z)
                .data()
                .chunks_exact(c)
                .zip(tz.data().chunks_exact(c))
                .filter(|(s, t)| distill::argmax(s) == distill::argmax(t))
                .count();
            let (v, a, n) = stats.get();
            stats.set((v + eps.len(), a + hits, n + eps.len()));
            let labels: Vec<usize> = eps.iter().map(|e| e.label).collect();
            Ok(kd_loss_graph(g, z, &targets, &labels, &dcfg)?)
        },
        || {
            let (v, a, n) = stats.replace((0, 0, 0));
            verified += v;
            format!(
                "teacher_agree={:.4}\tviews_verified={v}/{n}\tview_hash={}",
                a as f64 / n.max(1) as f64,
                hex16(&chain.get())
            )
        },
    )?;
    let chain = chain.get();
    Ok(Trained {
        params,
        epochs,
        steps,
        view_hash: Some(chain),
        views_verified: verified,
        kind_counts: [0; 3],
    })
}

/// Omnivore input kinds, in the order of [`Trained::kind_counts`].
pub const OMNI_KINDS: [InputKind; 3] = [InputKind::Rgb, InputKind::FlowImage, InputKind::BoxCanvas];

/// One 3-channel frame model trained on a uniformly drawn rendering (RGB,
/// flow colour wheel, box canvas) of each video, evaluated on RGB.
pub fn train_omnivore(cfg: &RunConfig, ds: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    if cfg.role != Role::Omnivore {
        return Err(Error::config("train_omnivore needs an omnivore run config"));
    }
    let (train, test) = split_lists(ds, cfg.family);
    let bs = cfg.optim.batch_size;
    let counts = Cell::new([0usize; 3]);
    let mut eval = |p: &ModelParams| scores(&eval_logits(p, InputKind::Rgb, &test, bs)?, &test);
    let (params, epochs, steps) = fit(
        cfg,
        init(cfg)?,
        train.len(),
        &mut eval,
        |g, bound, params, ctx| {
            let mut clips = Vec::with_capacity(ctx.batch.len());
            let mut cnt = counts.get();
            for &i in ctx.batch {
                let plan = train_plan(cfg.seed, ctx.epoch, i, train[i], &params.arch)?;
                let k = rng::stream(cfg.seed, &[OMNI, ctx.epoch as u64, i as u64]).gen_range(0..3);
                cnt[k] += 1;
                match distill::materialize(train[i], &plan, OMNI_KINDS[k], &params.arch)? {
                    Input::Frames(t) => clips.extend_from_slice(t.data()),
                    Input::Boxes(_) => unreachable!("omnivore inputs are images"),
                }
            }
            counts.set(cnt);
            let a = &params.arch;
            let shape = [ctx.batch.len(), a.n_frames, a.input_side, a.input_side, 3];
            let input = Input::Frames(Tensor::new(&shape, clips)?);
            let z = nets::logits(g, bound, params, &input, &Hooks::default())?;
            let labels: Vec<usize> = ctx.batch.iter().map(|&i| train[i].label).collect();
            Ok(distill::cross_entropy(g, z, &labels)?)
        },
        || {
            let c = counts.get();
            format!("rgb={}\tflow_image={}\tbox_canvas={}", c[0], c[1], c[2])
        },
    )?;
    Ok(Trained {
        params,
        epochs,
        steps,
        view_hash: None,
        views_verified: 0,
        kind_counts: counts.get(),
    })
}

/// Paths written by [`run`].
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub trained: Trained,
}

/// Loads the dataset, trains per `cfg.role`, and writes `model.ckpt` and
/// `metrics.tsv` under `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    let ds = Dataset::load_family(&cfg.dataset, cfg.family)?;
    run_on(cfg, &ds)
}

pub fn run_on(cfg: &RunConfig, ds: &Dataset) -> Result<RunArtifacts> {
    let trained = match cfg.role {
        Role::Baseline => train_model(cfg, ds)?,
        Role::Omnivore => train_omnivore(cfg, ds)?,
        Role::Student => {
            let teacher = cfg.teacher.as_ref().ok_or_else(|| Error::config("student run needs a teacher spec"))?;
            train_student(cfg, ds, &teacher.load()?, &StudentHooks::default())?
        }
    };
    let checkpoint = cfg.out.join("model.ckpt");
    let metrics = cfg.out.join("metrics.tsv");
    checkpoint::save(&trained.params, &checkpoint)?;
    write_file(&metrics, trained.metrics_log(cfg).as_bytes())?;
    Ok(RunArtifacts {
        checkpoint,
        metrics,
        trained,
    })
}
