//! Synthetic compositional action benchmark.
//!
//! Every episode is a short clip of a textured target object performing one
//! of twelve object-agnostic motions among a few static or jittering
//! distractors. Three aligned modalities are produced: RGB frames, the
//! analytic optical-flow field, and exact per-frame bounding boxes with
//! target/distractor categories.

mod plan;
mod render;
mod split;
pub mod style;

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

pub use plan::plan_episode;
pub use render::{flow_to_color, render_detection_canvas, render_episode, FLOW_FULL_SCALE};
pub use split::{plan_dataset, DatasetPlan, ManifestEntry, SplitName};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::nets::BoxToken;
use crate::tensor::Tensor;

/// The motion classes, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    MoveUpLeft,
    MoveUpRight,
    MoveDownLeft,
    MoveDownRight,
    Grow,
    Shrink,
    Shake,
    Orbit,
}

impl Action {
    pub const ALL: [Action; 12] = [
        Action::MoveLeft,
        Action::MoveRight,
        Action::MoveUp,
        Action::MoveDown,
        Action::MoveUpLeft,
        Action::MoveUpRight,
        Action::MoveDownLeft,
        Action::MoveDownRight,
        Action::Grow,
        Action::Shrink,
        Action::Shake,
        Action::Orbit,
    ];

    pub fn from_label(label: usize) -> Option<Action> {
        Self::ALL.get(label).copied()
    }

    pub fn label(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveLeft => "move-left",
            Action::MoveRight => "move-right",
            Action::MoveUp => "move-up",
            Action::MoveDown => "move-down",
            Action::MoveUpLeft => "move-up-left",
            Action::MoveUpRight => "move-up-right",
            Action::MoveDownLeft => "move-down-left",
            Action::MoveDownRight => "move-down-right",
            Action::Grow => "grow",
            Action::Shrink => "shrink",
            Action::Shake => "shake",
            Action::Orbit => "orbit",
        }
    }
}

/// Knobs of the generator. Defaults give the desk-scale benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_objects: usize,
    pub n_classes: usize,
    /// Canvas side in pixels.
    pub side: usize,
    /// Raw frames per episode.
    pub raw_length: usize,
    pub max_distractors: usize,
    /// Episodes in each of standard-train and comp-train.
    pub train_episodes: usize,
    /// Episodes in each of standard-test and comp-test.
    pub test_episodes: usize,
    /// Object identities held out for comp-test.
    pub comp_test_objects: usize,
    /// Concentration of the per-object action prior used for training splits.
    pub dirichlet_alpha: f64,
    /// Std of additive appearance noise on RGB frames.
    pub noise_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_objects: 24,
            n_classes: 12,
            side: 32,
            raw_length: 16,
            max_distractors: 3,
            train_episodes: 1200,
            test_episodes: 480,
            comp_test_objects: 8,
            dirichlet_alpha: 0.3,
            noise_sigma: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > Action::ALL.len() {
            return Err(Error::config(alloc::format!(
                "n_classes must be in 2..={}",
                Action::ALL.len()
            )));
        }
        if self.comp_test_objects == 0 || self.n_objects < 2 * self.comp_test_objects {
            return Err(Error::config(alloc::format!(
                "n_objects {} must be at least twice the comp-test vocabulary {}",
                self.n_objects,
                self.comp_test_objects
            )));
        }
        if self.side < 24 || self.raw_length < 8 {
            return Err(Error::config("canvas side must be >= 24 and raw_length >= 8"));
        }
        if self.train_episodes == 0 || self.test_episodes == 0 {
            return Err(Error::config("episode counts must be positive"));
        }
        if !(self.dirichlet_alpha > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("dirichlet_alpha must be > 0 and noise_sigma >= 0"));
        }
        Ok(())
    }
}

/// Box state in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxState {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distractor {
    pub object_id: usize,
    pub trajectory: Vec<BoxState>,
}

/// Everything needed to render one episode deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSpec {
    pub object_id: usize,
    pub action_id: usize,
    pub trajectory: Vec<BoxState>,
    pub distractors: Vec<Distractor>,
    pub noise_seed: u64,
    pub noise_sigma: f64,
    pub side: usize,
    pub n_objects: usize,
}

impl EpisodeSpec {
    pub fn raw_length(&self) -> usize {
        self.trajectory.len()
    }
}

/// One rendered sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[L, S, S, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[L-1, S, S, 2]`, displacement in pixels from frame `t` to `t+1`.
    pub flow: Tensor,
    /// Per raw frame: the target token first, then distractors.
    pub boxes: Vec<Vec<BoxToken>>,
    pub label: usize,
    pub object_id: usize,
}

impl Episode {
    pub fn raw_length(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(Error::config(alloc::format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        })
    }
}

/// Frame indices of one clip: a sorted uniform draw without replacement in
/// train mode, evenly spaced indices starting at 0 in eval mode.
pub fn sample_clip<R: rand::Rng + ?Sized>(raw_length: usize, n: usize, mode: Mode, rng: &mut R) -> Vec<usize> {
    assert!(raw_length >= n && n > 0, "cannot take {n} frames from {raw_length}");
    match mode {
        Mode::Eval => (0..n).map(|i| i * raw_length / n).collect(),
        Mode::Train => {
            let mut idx = index::sample(rng, raw_length, n).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

/// Flow index for a frame index: the flow field leaving frame `t`, with
/// the last frame reusing the final field.
pub fn flow_index(frame: usize, raw_length: usize) -> usize {
    frame.min(raw_length - 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;

    #[test]
    fn eval_clip_is_regular() {
        let mut r = rng::stream(0, &[]);
        assert_eq!(sample_clip(16, 8, Mode::Eval, &mut r), vec![0, 2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn train_clip_contract_and_determinism() {
        for s in 0..50 {
            let a = sample_clip(16, 8, Mode::Train, &mut rng::stream(s, &[1]));
            let b = sample_clip(16, 8, Mode::Train, &mut rng::stream(s, &[1]));
            assert_eq!(a, b);
            assert_eq!(a.len(), 8);
            assert!(a.windows(2).all(|w| w[0] < w[1]));
            assert!(*a.last().unwrap() < 16);
        }
        assert_eq!(flow_index(15, 16), 14);
        assert_eq!(flow_index(3, 16), 3);
    }

    #[test]
    fn action_labels_round_trip() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(a.label(), i);
            assert_eq!(Action::from_label(i), Some(*a));
        }
    }
}
