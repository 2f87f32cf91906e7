//! JSON run configuration.

use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use ott_core::flow::Mode;
use ott_core::theory::TheoryConfig;
use ott_core::train::TrainConfig;
use ott_core::transformer::{HeadKind, LnPlacement, ModelConfig, TimeConditioning};
use serde::{Deserialize, Serialize};
use std::hash::Hasher;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Ot,
    Node,
    Discrete,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Ot => Mode::Ot,
            ModeName::Node => Mode::Node,
            ModeName::Discrete => Mode::Discrete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LnName {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeName {
    None,
    AppendScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub depth: usize,
    pub n_ctx: usize,
    pub horizon: f64,
    pub steps: usize,
    pub lambda: f64,
    pub ln_placement: LnName,
    pub time_conditioning: TimeName,
    pub normalize_by_tokens: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 64,
            k: 16,
            heads: 4,
            depth: 2,
            n_ctx: 128,
            horizon: 1.0,
            steps: 8,
            lambda: 1.0,
            ln_placement: LnName::Pre,
            time_conditioning: TimeName::None,
            normalize_by_tokens: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_out: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            clip_norm: t.clip_norm,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay_out: t.weight_decay_out,
        }
    }
}

/// Settings for `ott theory`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub horizon: f64,
    pub lambda_factor: f64,
    /// Fixed λ for every suite instead of `lambda_factor · T L²`.
    pub lambda: Option<f64>,
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub pairs: usize,
    pub clouds: usize,
    pub cloud_size: usize,
    pub trajectories: usize,
    pub slack: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        let t = TheoryConfig::default();
        Self {
            horizon: t.horizon,
            lambda_factor: t.lambda_factor,
            lambda: t.lambda,
            d: t.d,
            n: t.n,
            classes: t.classes,
            pairs: t.pairs,
            clouds: t.clouds,
            cloud_size: t.cloud_size,
            trajectories: t.trajectories,
            slack: t.slack,
        }
    }
}

/// Grid for `ott ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub lambdas: Vec<f64>,
    pub steps: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 1.0],
            steps: vec![8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// UTF-8 text or an encoded `OTTD` cache. Relative paths resolve
    /// against the config file's directory.
    pub corpus: PathBuf,
    pub test_fraction: f64,
    pub mode: ModeName,
    pub seed: u64,
    pub iters: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_windows: usize,
    /// Write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: u64,
    /// Record wall-clock milliseconds in the metrics. Off by default so
    /// reruns produce identical bytes.
    pub record_wall_time: bool,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub robust_rates: Vec<f64>,
    pub robust_windows: usize,
    pub theory: TheorySection,
    pub ablate: AblateSection,
    /// Directory that a relative `corpus` is resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            corpus: PathBuf::from("data/shakespeare.txt"),
            test_fraction: ott_core::data::DEFAULT_TEST_FRACTION,
            mode: ModeName::Ot,
            seed: t.seed,
            iters: t.iters,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            eval_windows: t.eval_windows,
            checkpoint_every: 0,
            record_wall_time: false,
            out_dir: PathBuf::from("runs/default"),
            model: ModelSection::default(),
            optim: OptimSection::default(),
            robust_rates: vec![0.0, 0.005, 0.01, 0.05, 0.1],
            robust_windows: 64,
            theory: TheorySection::default(),
            ablate: AblateSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; a relative corpus path is taken relative to
    /// the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.base_dir.join(&self.corpus)
    }

    /// Compact JSON in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a 64 of the canonical JSON with `out_dir` blanked, so where a
    /// run writes does not change its identity.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let mut h = FnvHasher::default();
        h.write(c.canonical_json().as_bytes());
        h.finish()
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if self.checkpoint_every > 0 && self.checkpoint_every > self.iters {
            return bad("checkpoint_every exceeds iters");
        }
        if self.robust_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("robust_rates must lie in [0, 1]");
        }
        if self.robust_windows == 0 {
            return bad("robust_windows must be at least 1");
        }
        if self.ablate.lambdas.is_empty() || self.ablate.steps.is_empty() {
            return bad("ablation grids must be nonempty");
        }
        self.model_config(1)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            k: m.k,
            heads: m.heads,
            depth: m.depth,
            n_ctx: m.n_ctx,
            vocab_size,
            out_dim: vocab_size,
            horizon: m.horizon,
            steps: m.steps,
            lambda: m.lambda,
            causal: true,
            ln_placement: match m.ln_placement {
                LnName::Pre => LnPlacement::Pre,
                LnName::Post => LnPlacement::Post,
            },
            time_conditioning: match m.time_conditioning {
                TimeName::None => TimeConditioning::None,
                TimeName::AppendScalar => TimeConditioning::AppendScalar,
            },
            head: HeadKind::PerToken,
            normalize_by_tokens: m.normalize_by_tokens,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optim;
        TrainConfig {
            mode: self.mode.into(),
            iters: self.iters,
            batch_size: self.batch_size,
            lr_max: o.lr_max,
            lr_min: o.lr_min,
            clip_norm: o.clip_norm,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            eval_every: self.eval_every,
            eval_windows: self.eval_windows,
            seed: self.seed,
            weight_decay_out: o.weight_decay_out,
        }
    }

    pub fn theory_config(&self) -> TheoryConfig {
        let t = &self.theory;
        TheoryConfig {
            seed: self.seed,
            horizon: t.horizon,
            lambda_factor: t.lambda_factor,
            lambda: t.lambda,
            d: t.d,
            n: t.n,
            classes: t.classes,
            pairs: t.pairs,
            clouds: t.clouds,
            cloud_size: t.cloud_size,
            trajectories: t.trajectories,
            slack: t.slack,
        }
    }
}
