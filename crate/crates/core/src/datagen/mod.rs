//! Synthetic failure benchmark.
//!
//! Each episode is a short sequence of frame feature vectors: a linear
//! ramp plus Gaussian noise, with a mode-specific signature added to the
//! second half of failing episodes. Sparse episodes carry only the binary
//! label; dense and test episodes also carry reference reasoning.

mod io;
mod modes;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::rng;

pub use io::{dataset_checksum, load_all, load_dataset, load_manifest, write_dataset};
pub use modes::{
    failure_modes, render_reasoning, template, FailureMode, Outcome, EP_LEN, FRAME_DIM, NUM_MODES,
    PREFIXES, SUCCESS_TEMPLATE,
};

pub const NOISE_STD: f64 = 0.05;
pub const SIGNATURE_GAIN: f64 = 0.8;
/// First frame index carrying the failure signature.
pub const SIGNATURE_START: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Success,
    Failure,
}

impl Label {
    pub fn is_failure(self) -> bool {
        self == Label::Failure
    }

    /// Detection target: the classifier predicts the probability of failure.
    pub fn target(self) -> f64 {
        if self.is_failure() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Sparse,
    Dense,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Sparse, Split::Dense, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Sparse => "sparse",
            Split::Dense => "dense",
            Split::Test => "test",
        }
    }

    pub fn has_reasoning(self) -> bool {
        self != Split::Sparse
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Sparse => 0,
            Split::Dense => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub episode_id: String,
    pub frames: Vec<Vec<f64>>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_mode: Option<usize>,
    pub split: Split,
}

impl Episode {
    pub fn is_dense(&self) -> bool {
        self.reasoning.is_some()
    }

    pub fn outcome(&self) -> Outcome {
        match self.failure_mode {
            Some(m) => Outcome::Failure(m),
            None => Outcome::Success,
        }
    }

    /// Frames flattened row-major (`EP_LEN × FRAME_DIM`).
    pub fn frames_flat(&self) -> Vec<f64> {
        self.frames.iter().flatten().copied().collect()
    }

    /// Moves the episode into `split`, dropping reasoning for sparse data.
    pub fn into_split(mut self, split: Split, episode_id: String) -> Self {
        if !split.has_reasoning() {
            self.reasoning = None;
        }
        self.split = split;
        self.episode_id = episode_id;
        self
    }

    /// Checks the structural invariants of a stored episode.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Invariant {
            episode_id: self.episode_id.clone(),
            msg,
        };
        if self.frames.len() != EP_LEN || self.frames.iter().any(|f| f.len() != FRAME_DIM) {
            return Err(fail(format!("frames must be {EP_LEN}x{FRAME_DIM}")));
        }
        if self.frames.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("non-finite frame value".into()));
        }
        match (self.split.has_reasoning(), &self.reasoning) {
            (true, None) => return Err(fail(format!("{} episode without reasoning", self.split.name()))),
            (false, Some(_)) => return Err(fail("sparse episode carries reasoning".into())),
            _ => {}
        }
        match (self.label, self.failure_mode) {
            (Label::Failure, None) => return Err(fail("failure without failure_mode".into())),
            (Label::Success, Some(_)) => return Err(fail("success with failure_mode".into())),
            (_, Some(m)) if m >= NUM_MODES => return Err(fail(format!("failure_mode {m} out of range"))),
            _ => {}
        }
        if let Some(r) = &self.reasoning {
            if r.is_empty() {
                return Err(fail("empty reasoning".into()));
            }
            if let Some(t) = r.iter().find(|t| Vocab::standard().id(t).is_none()) {
                return Err(fail(format!("reasoning token `{t}` not in vocabulary")));
            }
        }
        Ok(())
    }
}

/// Base ramp value for frame `t`; identical across feature dimensions.
pub fn base_value(t: usize) -> f64 {
    t as f64 / EP_LEN as f64
}

/// Generates one episode deterministically from `seed`. Noise and prefix
/// choice come from separate streams, so the same seed yields the same
/// base-plus-noise frames for a success and a failure episode.
pub fn generate_episode(seed: u64, label: Label, mode: Option<usize>) -> Result<Episode> {
    let outcome = match (label, mode) {
        (Label::Success, None) => Outcome::Success,
        (Label::Failure, Some(m)) if m < NUM_MODES => Outcome::Failure(m),
        (Label::Failure, Some(m)) => {
            return Err(Error::Precondition(format!("failure mode {m} out of range")))
        }
        (Label::Failure, None) => return Err(Error::Precondition("failure label needs a mode".into())),
        (Label::Success, Some(_)) => return Err(Error::Precondition("success label takes no mode".into())),
    };
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut nrng = rng::stream(seed, &[0]);
    let signature = mode.map(|m| &failure_modes()[m].signature);
    let frames = (0..EP_LEN)
        .map(|t| {
            (0..FRAME_DIM)
                .map(|d| {
                    let mut v = base_value(t) + noise.sample(&mut nrng);
                    if let (Some(sig), true) = (signature, t >= SIGNATURE_START) {
                        v += SIGNATURE_GAIN * sig[d];
                    }
                    v
                })
                .collect()
        })
        .collect();
    let reasoning = render_reasoning(outcome, &mut rng::stream(seed, &[1]));
    Ok(Episode {
        episode_id: format!("ep-{seed:016x}"),
        frames,
        label,
        reasoning: Some(reasoning),
        failure_mode: mode,
        split: Split::Dense,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub sparse: usize,
    pub dense: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Sparse => self.sparse,
            Split::Dense => self.dense,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.sparse + self.dense + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub sparse: f64,
    pub dense: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Sparse => self.sparse,
            Split::Dense => self.dense,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            sparse: 0.5,
            dense: 0.5,
            test: 0.5,
        }
    }
}

pub const DEFAULT_RATIO: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: SplitCounts,
    #[serde(default)]
    pub success_fraction: SplitFractions,
    #[serde(default = "default_frame_dim")]
    pub frame_dim: usize,
    #[serde(default = "default_ep_len")]
    pub ep_len: usize,
    /// Filled in on generation when left empty.
    #[serde(default)]
    pub vocab_hash: String,
}

fn default_frame_dim() -> usize {
    FRAME_DIM
}

fn default_ep_len() -> usize {
    EP_LEN
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self::with_ratio(0, 2000, DEFAULT_RATIO, 300)
    }
}

impl DatasetManifest {
    pub fn new(seed: u64, counts: SplitCounts) -> Self {
        Self {
            seed,
            counts,
            success_fraction: SplitFractions::default(),
            frame_dim: FRAME_DIM,
            ep_len: EP_LEN,
            vocab_hash: Vocab::standard().hash(),
        }
    }

    /// Fixes the sparse count and derives dense as `sparse / ratio`.
    pub fn with_ratio(seed: u64, sparse: usize, ratio: f64, test: usize) -> Self {
        let dense = ((sparse as f64 / ratio).round() as usize).max(1);
        Self::new(seed, SplitCounts { sparse, dense, test })
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.counts;
        if c.sparse == 0 || c.dense == 0 || c.test == 0 {
            return Err(Error::Config(format!("all split counts must be positive, got {c:?}")));
        }
        if self.frame_dim != FRAME_DIM || self.ep_len != EP_LEN {
            return Err(Error::Config(format!(
                "frame_dim/ep_len must be {FRAME_DIM}/{EP_LEN}, got {}/{}",
                self.frame_dim, self.ep_len
            )));
        }
        for s in Split::ALL {
            let f = self.success_fraction.get(s);
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("success_fraction.{} = {f} outside [0,1]", s.name())));
            }
        }
        if self.success_fraction.test != 0.5 {
            return Err(Error::Config("test split must be balanced (success_fraction.test = 0.5)".into()));
        }
        let hash = Vocab::standard().hash();
        if !self.vocab_hash.is_empty() && self.vocab_hash != hash {
            return Err(Error::Config(format!("vocab_hash {} does not match vocabulary {hash}", self.vocab_hash)));
        }
        Ok(())
    }

    pub fn sparse_dense_ratio(&self) -> f64 {
        self.counts.sparse as f64 / self.counts.dense as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sparse: Vec<Episode>,
    pub dense: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Episode] {
        match split {
            Split::Sparse => &self.sparse,
            Split::Dense => &self.dense,
            Split::Test => &self.test,
        }
    }
}

fn generate_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Episode>> {
    let n = manifest.counts.get(split);
    let n_success = if split == Split::Test {
        n / 2
    } else {
        (manifest.success_fraction.get(split) * n as f64).round() as usize
    };
    let mut plan = rng::stream(manifest.seed, &[split.stream_id(), u64::MAX]);
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_success { Label::Success } else { Label::Failure })
        .collect();
    labels.shuffle(&mut plan);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mode = label.is_failure().then(|| plan.random_range(0..NUM_MODES));
            let seed = rng::derive_seed(manifest.seed, &[split.stream_id(), i as u64]);
            let id = format!("{}-{i:05}", split.name());
            Ok(generate_episode(seed, label, mode)?.into_split(split, id))
        })
        .collect()
}

/// Generates all three splits. Failure modes are uniform over the taxonomy.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let mut manifest = manifest.clone();
    manifest.vocab_hash = Vocab::standard().hash();
    Ok(Dataset {
        sparse: generate_split(&manifest, Split::Sparse)?,
        dense: generate_split(&manifest, Split::Dense)?,
        test: generate_split(&manifest, Split::Test)?,
        manifest,
    })
}
