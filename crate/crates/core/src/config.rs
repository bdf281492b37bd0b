//! Run configuration: one TOML tree with world/crq/model/align/bench
//! sections, strict about unknown keys, with CLI overrides applied before
//! the resolved copy is written into the run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crqvae::train::CrqTrainOpts;
use crate::crqvae::CrqConfig;
use crate::error::{HigrError, Result};
use crate::hsd::train::PretrainOpts;
use crate::hsd::ModelConfig;
use crate::orpo::train::AlignOpts;
use crate::orpo::AlignConfig;
use crate::synthdata::WorldConfig;

/// Alignment section: objective hyperparameters plus optimizer settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub alpha: f32,
    /// Negative-strategy mix (permute, replace, anchor-repeat).
    pub mix: [f32; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub log_every: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        let cfg = AlignConfig::default();
        let opts = AlignOpts::default();
        AlignSection {
            alpha: cfg.alpha,
            mix: cfg.mix,
            steps: opts.steps,
            batch_size: opts.batch_size,
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            log_every: opts.log_every,
        }
    }
}

impl AlignSection {
    pub fn config(&self) -> AlignConfig {
        AlignConfig {
            alpha: self.alpha,
            mix: self.mix,
        }
    }

    pub fn opts(&self, seed: u64) -> AlignOpts {
        AlignOpts {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            log_every: self.log_every,
        }
    }
}

/// Evaluation and efficiency-benchmark section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    /// Users sampled for decoding sweeps.
    pub n_contexts: usize,
    pub beam_widths: Vec<usize>,
    pub kv_cache: Vec<bool>,
    pub eval_ks: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            n_contexts: 20,
            beam_widths: vec![1, 5],
            kv_cache: vec![true, false],
            eval_ks: vec![1, 5],
        }
    }
}

impl BenchSection {
    pub fn validate(&self) -> Result<()> {
        if self.n_contexts == 0 || self.beam_widths.is_empty() || self.kv_cache.is_empty() {
            return Err(HigrError::Config(
                "bench: n_contexts, beam_widths, and kv_cache must be non-empty".into(),
            ));
        }
        if self.beam_widths.iter().any(|&b| b == 0) {
            return Err(HigrError::Config("bench: beam widths must be positive".into()));
        }
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k == 0) {
            return Err(HigrError::Config("bench: eval_ks must be positive".into()));
        }
        Ok(())
    }
}

/// Full run configuration. The `world` section is mandatory because it
/// carries the run seed; everything else has defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub crq: CrqConfig,
    #[serde(default)]
    pub crq_train: CrqTrainOpts,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainOpts,
    #[serde(default)]
    pub align: AlignSection,
    #[serde(default)]
    pub bench: BenchSection,
}

// Stage seeds are derived from the single world seed with fixed offsets so
// one `--seed` override re-seeds the whole pipeline coherently.
const SEED_CRQ: u64 = 1;
const SEED_PRETRAIN: u64 = 2;
const SEED_PAIRS: u64 = 3;
const SEED_ALIGN: u64 = 4;
const SEED_MODEL_INIT: u64 = 5;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| HigrError::Config(format!("config: {e}")))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HigrError::Config(format!("config: read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Propagate cross-section values and validate everything. Called
    /// after parsing and again after CLI overrides.
    pub fn resolve(&mut self) -> Result<()> {
        // world geometry drives dependent sections
        self.crq.d_in = self.world.d_in;
        self.model.depth = self.crq.depth;
        self.model.codebook_size = self.crq.codebook_size;
        self.model.slate_size = self.world.slate_size;
        self.model.d_user = self.world.n_topics;
        self.crq_train.seed = self.world.seed.wrapping_add(SEED_CRQ);
        self.pretrain.seed = self.world.seed.wrapping_add(SEED_PRETRAIN);
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.crq.validate()?;
        self.model.validate()?;
        self.align.config().validate()?;
        self.bench.validate()?;
        if self.bench.n_contexts > self.world.n_users {
            return Err(HigrError::Config(format!(
                "bench: n_contexts {} exceeds n_users {}",
                self.bench.n_contexts, self.world.n_users
            )));
        }
        for &k in &self.bench.eval_ks {
            if k > self.world.slate_size {
                return Err(HigrError::Config(format!(
                    "bench: eval k {k} exceeds slate size {}",
                    self.world.slate_size
                )));
            }
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        self.world.seed = seed;
        self.resolve()
    }

    pub fn pair_seed(&self) -> u64 {
        self.world.seed.wrapping_add(SEED_PAIRS)
    }

    pub fn align_opts(&self) -> AlignOpts {
        self.align.opts(self.world.seed.wrapping_add(SEED_ALIGN))
    }

    pub fn model_init_seed(&self) -> u64 {
        self.world.seed.wrapping_add(SEED_MODEL_INIT)
    }

    /// Canonical serialized form written to `config.resolved`.
    pub fn to_resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| HigrError::Config(format!("config: serialize: {e}")))
    }
}
