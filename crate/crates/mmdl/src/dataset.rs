//! Dataset container and manifests.
//!
//! Layout: `MMDS`, u32 version, u64 seed, the generator configuration,
//! u64 record count, then per record: u64 episode id, u8 split, u16 label,
//! u16 object id, frames and flow as f32, and per raw frame a u8 box count
//! followed by (u8 category, f32 cx, cy, w, h). Values are rounded to f32
//! at generation time so an in-memory dataset equals its reloaded copy.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use mmdl_core::nets::{BoxToken, Category};
use mmdl_core::synth::{plan_dataset, render_episode, Episode, GeneratorConfig, ManifestEntry, SplitName};
use mmdl_core::Tensor;

use crate::error::{Error, Result};
use crate::wire::{read_file, write_file, Reader, Writer};

const MAGIC: &[u8; 4] = b"MMDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub entry: ManifestEntry,
    pub episode: Episode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    /// Sorted by episode id.
    pub records: Vec<Record>,
}

/// `standard` or `comp`: the train/test pair of one benchmark family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Standard,
    Comp,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Standard, Family::Comp];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Standard => "standard",
            Family::Comp => "comp",
        }
    }

    pub fn train(self) -> SplitName {
        match self {
            Family::Standard => SplitName::StandardTrain,
            Family::Comp => SplitName::CompTrain,
        }
    }

    pub fn test(self) -> SplitName {
        match self {
            Family::Standard => SplitName::StandardTest,
            Family::Comp => SplitName::CompTest,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Family::Standard),
            "comp" => Ok(Family::Comp),
            _ => Err(Error::Usage(format!("unknown split `{s}` (expected standard or comp)"))),
        }
    }
}

fn split_code(s: SplitName) -> u8 {
    SplitName::ALL.iter().position(|&x| x == s).unwrap() as u8
}

fn round_f32(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

fn quantize(mut ep: Episode) -> Episode {
    round_f32(&mut ep.frames);
    round_f32(&mut ep.flow);
    for b in ep.boxes.iter_mut().flatten() {
        for v in [&mut b.cx, &mut b.cy, &mut b.w, &mut b.h] {
            *v = *v as f32 as f64;
        }
    }
    ep
}

/// Renders the whole benchmark. `workers` bounds the thread pool; the
/// output does not depend on it.
pub fn generate(cfg: &GeneratorConfig, seed: u64, workers: usize) -> Result<Dataset> {
    let plan = plan_dataset(cfg, seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let records = pool.install(|| {
        plan.entries
            .par_iter()
            .map(|entry| Record {
                entry: *entry,
                episode: quantize(render_episode(&plan.episode_spec(entry))),
            })
            .collect()
    });
    Ok(Dataset {
        config: cfg.clone(),
        seed,
        records,
    })
}

impl Dataset {
    pub fn split(&self, split: SplitName) -> Vec<&Record> {
        self.records.iter().filter(|r| r.entry.split == split).collect()
    }

    pub fn episodes(&self, split: SplitName) -> Vec<&Episode> {
        self.split(split).into_iter().map(|r| &r.episode).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.seed);
        for v in [
            c.n_objects,
            c.n_classes,
            c.side,
            c.raw_length,
            c.max_distractors,
            c.train_episodes,
            c.test_episodes,
            c.comp_test_objects,
        ] {
            w.u32(v as u32);
        }
        w.f64(c.dirichlet_alpha);
        w.f64(c.noise_sigma);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.u64(r.entry.episode_id);
            w.u8(split_code(r.entry.split));
            w.u16(r.entry.label as u16);
            w.u16(r.entry.object_id as u16);
            r.episode.frames.data().iter().for_each(|&v| w.f32(v as f32));
            r.episode.flow.data().iter().for_each(|&v| w.f32(v as f32));
            for frame in &r.episode.boxes {
                w.u8(frame.len() as u8);
                for b in frame {
                    w.u8(b.category as u8);
                    [b.cx, b.cy, b.w, b.h].iter().for_each(|&v| w.f32(v as f32));
                }
            }
        }
        w.buf
    }

    /// Parses a container, keeping only records whose split passes `keep`.
    pub fn decode(bytes: &[u8], path: &Path, keep: impl Fn(SplitName) -> bool) -> Result<Dataset> {
        let mut r = Reader::new(bytes, path);
        r.expect_magic(MAGIC, VERSION)?;
        let seed = r.u64()?;
        let mut u = [0usize; 8];
        for v in &mut u {
            *v = r.u32()? as usize;
        }
        let config = GeneratorConfig {
            n_objects: u[0],
            n_classes: u[1],
            side: u[2],
            raw_length: u[3],
            max_distractors: u[4],
            train_episodes: u[5],
            test_episodes: u[6],
            comp_test_objects: u[7],
            dirichlet_alpha: r.f64()?,
            noise_sigma: r.f64()?,
        };
        config.validate()?;
        let (l, s) = (config.raw_length, config.side);
        let n = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..n {
            let episode_id = r.u64()?;
            let split = *SplitName::ALL
                .get(r.u8()? as usize)
                .ok_or_else(|| r.err("bad split code"))?;
            let label = r.u16()? as usize;
            let object_id = r.u16()? as usize;
            if label >= config.n_classes || object_id >= config.n_objects {
                return Err(r.err("label or object id out of range"));
            }
            let mut floats = |count: usize| -> Result<Vec<f64>> {
                let raw = r.take(count * 4)?;
                Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
            };
            let frames = floats(l * s * s * 3)?;
            let flow = floats((l - 1) * s * s * 2)?;
            let mut boxes = Vec::with_capacity(l);
            for t in 0..l {
                let k = r.u8()? as usize;
                let mut frame = Vec::with_capacity(k);
                for _ in 0..k {
                    let category = Category::from_index(r.u8()?).ok_or_else(|| r.err("bad box category"))?;
                    let g = [r.f32()?, r.f32()?, r.f32()?, r.f32()?].map(f64::from);
                    frame.push(BoxToken {
                        t,
                        cx: g[0],
                        cy: g[1],
                        w: g[2],
                        h: g[3],
                        category,
                    });
                }
                boxes.push(frame);
            }
            if keep(split) {
                records.push(Record {
                    entry: ManifestEntry {
                        episode_id,
                        split,
                        label,
                        object_id,
                    },
                    episode: Episode {
                        frames: Tensor::new(&[l, s, s, 3], frames)?,
                        flow: Tensor::new(&[l - 1, s, s, 2], flow)?,
                        boxes,
                        label,
                        object_id,
                    },
                });
            }
        }
        r.finish()?;
        Ok(Dataset { config, seed, records })
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from("episode_id\tsplit\tlabel\tobject_id\n");
        for r in &self.records {
            let e = &r.entry;
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.episode_id, e.split.as_str(), e.label, e.object_id));
        }
        out
    }

    /// Writes the container and its manifest next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())?;
        write_file(&manifest_path(path), self.manifest().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Self::decode(&read_file(path)?, path, |_| true)
    }

    pub fn load_family(path: &Path, family: Family) -> Result<Dataset> {
        Self::decode(&read_file(path)?, path, |s| s == family.train() || s == family.test())
    }
}

/// `d.mmds` → `d.manifest.tsv`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.tsv")
}
