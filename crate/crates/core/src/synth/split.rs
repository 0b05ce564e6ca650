//! Split planning: which object performs which action in which split.
//!
//! Training splits draw the object uniformly and the action from a
//! per-object Dirichlet prior, planting an appearance shortcut. Test splits
//! are class-balanced. Standard-test draws each object in proportion to
//! its prior for the episode's class, so the shortcut keeps paying off on
//! familiar objects; comp-test uses only held-out identities, where it
//! cannot.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};

use super::{plan_episode, EpisodeSpec, GeneratorConfig};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitName {
    StandardTrain,
    StandardTest,
    CompTrain,
    CompTest,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::StandardTrain,
        SplitName::StandardTest,
        SplitName::CompTrain,
        SplitName::CompTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::StandardTrain => "standard-train",
            SplitName::StandardTest => "standard-test",
            SplitName::CompTrain => "comp-train",
            SplitName::CompTest => "comp-test",
        }
    }

    pub fn is_train(self) -> bool {
        matches!(self, SplitName::StandardTrain | SplitName::CompTrain)
    }

    /// `("standard" | "comp", is_train)` to a split.
    pub fn of(family: &str, train: bool) -> Result<Self> {
        match (family, train) {
            ("standard", true) => Ok(SplitName::StandardTrain),
            ("standard", false) => Ok(SplitName::StandardTest),
            ("comp", true) => Ok(SplitName::CompTrain),
            ("comp", false) => Ok(SplitName::CompTest),
            _ => Err(Error::config(format!("unknown split family `{family}`"))),
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub episode_id: u64,
    pub split: SplitName,
    pub label: usize,
    pub object_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub config: GeneratorConfig,
    pub seed: u64,
    /// Per-object action distribution used by the training splits.
    pub object_priors: Vec<Vec<f64>>,
    pub comp_train_objects: Vec<usize>,
    pub comp_test_objects: Vec<usize>,
    /// Ordered by episode id, which is also the index into this list.
    pub entries: Vec<ManifestEntry>,
}

impl DatasetPlan {
    pub fn vocabulary(&self, split: SplitName) -> Vec<usize> {
        match split {
            SplitName::StandardTrain | SplitName::StandardTest => (0..self.config.n_objects).collect(),
            SplitName::CompTrain => self.comp_train_objects.clone(),
            SplitName::CompTest => self.comp_test_objects.clone(),
        }
    }

    pub fn split(&self, split: SplitName) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Geometry of one episode; seeded by `(dataset seed, episode id)`.
    pub fn episode_spec(&self, entry: &ManifestEntry) -> EpisodeSpec {
        let vocab = self.vocabulary(entry.split);
        plan_episode(
            &self.config,
            entry.object_id,
            entry.label,
            &vocab,
            rng::derive_seed(self.seed, &[entry.episode_id]),
        )
    }
}

pub fn plan_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<DatasetPlan> {
    cfg.validate()?;
    let (n_obj, n_cls) = (cfg.n_objects, cfg.n_classes);
    let mut r = rng::stream(seed, &[0x5911]);

    let mut order: Vec<usize> = (0..n_obj).collect();
    order.shuffle(&mut r);
    let mut comp_test_objects = order[..cfg.comp_test_objects].to_vec();
    let mut comp_train_objects = order[cfg.comp_test_objects..].to_vec();
    comp_test_objects.sort_unstable();
    comp_train_objects.sort_unstable();

    let dirichlet = Dirichlet::new_with_size(cfg.dirichlet_alpha, n_cls)
        .map_err(|e| Error::config(format!("dirichlet: {e}")))?;
    let object_priors: Vec<Vec<f64>> = (0..n_obj)
        .map(|_| {
            let p: Vec<f64> = dirichlet.sample(&mut r);
            // Tiny alphas can underflow every gamma draw; fall back to uniform.
            if p.iter().all(|v| v.is_finite()) && p.iter().sum::<f64>() > 0.0 {
                p
            } else {
                alloc::vec![1.0 / n_cls as f64; n_cls]
            }
        })
        .collect();

    let mut entries = Vec::with_capacity(2 * (cfg.train_episodes + cfg.test_episodes));
    let all: Vec<usize> = (0..n_obj).collect();
    for split in SplitName::ALL {
        let vocab = match split {
            SplitName::StandardTrain | SplitName::StandardTest => &all,
            SplitName::CompTrain => &comp_train_objects,
            SplitName::CompTest => &comp_test_objects,
        };
        if split.is_train() {
            for _ in 0..cfg.train_episodes {
                let object_id = vocab[r.gen_range(0..vocab.len())];
                let label = WeightedIndex::new(&object_priors[object_id])
                    .map(|w| w.sample(&mut r))
                    .unwrap_or_else(|_| r.gen_range(0..n_cls));
                entries.push((split, label, object_id));
            }
        } else {
            let mut labels: Vec<usize> = (0..cfg.test_episodes).map(|i| i % n_cls).collect();
            labels.shuffle(&mut r);
            for label in labels {
                let object_id = if split == SplitName::StandardTest {
                    let weights: Vec<f64> = vocab.iter().map(|&o| object_priors[o][label]).collect();
                    match WeightedIndex::new(&weights) {
                        Ok(w) => vocab[w.sample(&mut r)],
                        Err(_) => vocab[r.gen_range(0..vocab.len())],
                    }
                } else {
                    vocab[r.gen_range(0..vocab.len())]
                };
                entries.push((split, label, object_id));
            }
        }
    }
    let entries = entries
        .into_iter()
        .enumerate()
        .map(|(i, (split, label, object_id))| ManifestEntry {
            episode_id: i as u64,
            split,
            label,
            object_id,
        })
        .collect();

    Ok(DatasetPlan {
        config: cfg.clone(),
        seed,
        object_priors,
        comp_train_objects,
        comp_test_objects,
        entries,
    })
}
