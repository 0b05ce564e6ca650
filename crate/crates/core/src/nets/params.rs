use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::arch::{ArchConfig, Modality};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Std of the positional embeddings at init. Large enough that position
/// is visible next to the unit-scale token embeddings from the start.
pub const POS_INIT_STD: f64 = 1.0;

/// Named parameter tensors of one classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub modality: Modality,
    tensors: BTreeMap<String, Tensor>,
}

fn attn_layout(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.ln.g"), vec![d]));
    out.push((format!("{prefix}.ln.b"), vec![d]));
    out.push((format!("{prefix}.qkv.w"), vec![d, 3 * d]));
    out.push((format!("{prefix}.qkv.b"), vec![3 * d]));
    out.push((format!("{prefix}.proj.w"), vec![d, d]));
    out.push((format!("{prefix}.proj.b"), vec![d]));
}

fn mlp_layout(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, ratio: usize) {
    out.push((format!("{prefix}.ln.g"), vec![d]));
    out.push((format!("{prefix}.ln.b"), vec![d]));
    out.push((format!("{prefix}.fc1.w"), vec![d, ratio * d]));
    out.push((format!("{prefix}.fc1.b"), vec![ratio * d]));
    out.push((format!("{prefix}.fc2.w"), vec![ratio * d, d]));
    out.push((format!("{prefix}.fc2.b"), vec![d]));
}

/// Every parameter name and shape the architecture needs, in init order.
pub fn layout(arch: &ArchConfig, modality: Modality) -> Vec<(String, Vec<usize>)> {
    let d = arch.d_model;
    let mut out = Vec::new();
    match modality {
        Modality::Rgb | Modality::Flow => {
            out.push(("embed.w".into(), vec![arch.patch_dim(), d]));
            out.push(("embed.b".into(), vec![d]));
            out.push(("pos.space".into(), vec![arch.patches_per_frame(), d]));
            out.push(("pos.time".into(), vec![arch.n_frames, d]));
            for i in 0..arch.n_blocks {
                attn_layout(&mut out, &format!("block{i}.time"), d);
                attn_layout(&mut out, &format!("block{i}.space"), d);
                mlp_layout(&mut out, &format!("block{i}.mlp"), d, arch.mlp_ratio);
            }
        }
        Modality::Boxes => {
            out.push(("embed.w".into(), vec![4, d]));
            out.push(("embed.b".into(), vec![d]));
            out.push(("cat_embed".into(), vec![3, d]));
            out.push(("pos.time".into(), vec![arch.n_frames, d]));
            for i in 0..arch.n_blocks {
                attn_layout(&mut out, &format!("space{i}.attn"), d);
                mlp_layout(&mut out, &format!("space{i}.mlp"), d, arch.mlp_ratio);
            }
            for i in 0..arch.n_blocks {
                attn_layout(&mut out, &format!("time{i}.attn"), d);
                mlp_layout(&mut out, &format!("time{i}.mlp"), d, arch.mlp_ratio);
            }
        }
    }
    out.push(("final_ln.g".into(), vec![d]));
    out.push(("final_ln.b".into(), vec![d]));
    out.push(("head.w".into(), vec![d, arch.n_classes]));
    out.push(("head.b".into(), vec![arch.n_classes]));
    out
}

fn truncated_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: weight matrices ~ truncated normal with
/// std `1/sqrt(fan_in)`, biases and layer-norm shifts zero, layer-norm
/// gains one, positional embeddings ~ N(0, [`POS_INIT_STD`]²).
pub fn init_params(arch: &ArchConfig, modality: Modality, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    if let Some(c) = modality.channels() {
        if c != arch.in_channels {
            return Err(Error::config(format!(
                "{modality} model needs {c} input channels, arch has {}",
                arch.in_channels
            )));
        }
    }
    let mut r = rng::stream(seed, &[0x1a17]);
    let mut tensors = BTreeMap::new();
    for (name, shape) in layout(arch, modality) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".g") {
            vec![1.0; n]
        } else if name.ends_with(".b") {
            vec![0.0; n]
        } else if name.starts_with("pos.") {
            (0..n).map(|_| POS_INIT_STD * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect()
        } else {
            // cat_embed is a one-hot lookup, so its fan-in is 1.
            let fan_in = if name == "cat_embed" { 1 } else { shape[0] };
            let std = 1.0 / libm::sqrt(fan_in as f64);
            (0..n).map(|_| truncated_normal(&mut r, std)).collect()
        };
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(ModelParams {
        arch: arch.clone(),
        modality,
        tensors,
    })
}

/// Closed-form parameter count of [`layout`].
pub fn param_count(arch: &ArchConfig, modality: Modality) -> usize {
    layout(arch, modality).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

impl ModelParams {
    /// Rebuilds a parameter set from named tensors, checking that every
    /// required name is present exactly once with the right shape.
    pub fn from_tensors(
        arch: ArchConfig,
        modality: Modality,
        tensors: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut map = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::config(format!("duplicate parameter `{name}`")));
            }
        }
        let want = layout(&arch, modality);
        if want.len() != map.len() {
            return Err(Error::config(format!(
                "{} parameters present, architecture needs {}",
                map.len(),
                want.len()
            )));
        }
        for (name, shape) in &want {
            match map.get(name) {
                None => return Err(Error::config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::dim("parameter shape", t.shape(), shape));
                }
                Some(_) => {}
            }
        }
        Ok(ModelParams {
            arch,
            modality,
            tensors: map,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Name-sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every tensor on `g`, as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.modality == other.modality
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles already placed on a graph, e.g. by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let arch = ArchConfig::default();
        let a = init_params(&arch, Modality::Rgb, 3).unwrap();
        let b = init_params(&arch, Modality::Rgb, 3).unwrap();
        let c = init_params(&arch, Modality::Rgb, 4).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_rejects_channel_mismatch() {
        let arch = ArchConfig::default();
        assert!(init_params(&arch, Modality::Flow, 0).is_err());
        assert!(init_params(&arch.clone().for_modality(Modality::Flow), Modality::Flow, 0).is_ok());
    }

    #[test]
    fn from_tensors_checks_names_and_shapes() {
        let arch = ArchConfig::default();
        let p = init_params(&arch, Modality::Boxes, 1).unwrap();
        let all: Vec<(String, Tensor)> = p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert!(ModelParams::from_tensors(arch.clone(), Modality::Boxes, all.clone()).is_ok());

        let mut missing = all.clone();
        missing.pop();
        assert!(ModelParams::from_tensors(arch.clone(), Modality::Boxes, missing).is_err());

        let mut dup = all.clone();
        dup.push(all[0].clone());
        assert!(ModelParams::from_tensors(arch.clone(), Modality::Boxes, dup).is_err());

        let mut reshaped = all;
        reshaped[0].1 = Tensor::zeros(&[1]);
        assert!(ModelParams::from_tensors(arch, Modality::Boxes, reshaped).is_err());
    }

    #[test]
    fn biases_zero_gains_one() {
        let p = init_params(&ArchConfig::default(), Modality::Rgb, 9).unwrap();
        assert!(p.get("head.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("final_ln.g").unwrap().data().iter().all(|&v| v == 1.0));
        let w = p.get("embed.w").unwrap();
        let bound = 2.0 / libm::sqrt(w.shape()[0] as f64);
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}
