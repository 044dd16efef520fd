//! Run configuration and the per-stage configuration hashes that address
//! pipeline artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{AlignTraining, EncoderDims, MiningParams};
use crate::corpus::{PairPolicy, SimConfig};
use crate::enhance::EnhanceParams;
use crate::error::{CoreError, Result};
use crate::evalkit::Thresholds;
use crate::par::Execution;
use crate::prefalign::{DpoTraining, PreferenceLoss, RewardParams};
use crate::rqvae::{RqvaeDims, RqvaeTraining};
use crate::sugmodel::{BeamConfig, GenConfig, InputLimits, SftTraining};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_categories: usize,
    pub n_queries: usize,
    pub words_per_category: usize,
    pub popularity_exponent: f64,
    pub sim: SimConfig,
    /// Share of page views, latest first, held out for evaluation.
    pub test_fraction: f64,
    pub pairs: PairPolicy,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_categories: 8,
            n_queries: 240,
            words_per_category: 4,
            popularity_exponent: 1.0,
            sim: SimConfig::default(),
            test_fraction: 0.2,
            pairs: PairPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub dims: EncoderDims,
    pub tau: f64,
    pub mining: MiningParams,
    pub training: AlignTraining,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            dims: EncoderDims {
                d_emb: 32,
                d_hidden: 64,
                d_out: 32,
            },
            tau: 0.05,
            mining: MiningParams::default(),
            training: AlignTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// Positive interactions a query needs to be indexed.
    pub min_positive: usize,
    /// Co-occurring queries kept per prefix for augmentation.
    pub prefix_queries: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            min_positive: 1,
            prefix_queries: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RqvaeConfig {
    pub dims: RqvaeDims,
    pub beta: f64,
    pub training: RqvaeTraining,
}

impl Default for RqvaeConfig {
    fn default() -> Self {
        Self {
            dims: RqvaeDims {
                d_in: 32,
                d_hidden: 32,
                d_latent: 16,
                blocks: 3,
                levels: 4,
                codebook_size: 64,
            },
            beta: 0.25,
            training: RqvaeTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub model: GenConfig,
    pub limits: InputLimits,
    pub training: SftTraining,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            model: GenConfig {
                d_model: 32,
                layers: 2,
                heads: 2,
                d_ff: 64,
                max_enc_len: 112,
                max_dec_len: 24,
            },
            limits: InputLimits {
                max_len: 112,
                max_related: 5,
                max_history: 5,
            },
            training: SftTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub loss: PreferenceLoss,
    pub reward: RewardParams,
    pub training: DpoTraining,
    /// Merge events from the serving feedback log, when present.
    pub use_feedback: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            loss: PreferenceLoss::default(),
            reward: RewardParams::default(),
            training: DpoTraining::default(),
            use_feedback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub beam: BeamConfig,
    pub thresholds: Thresholds,
    /// Also train and score the pair-wise and no-enhancement variants.
    pub ablation: bool,
    /// Required HR@k gain of list-wise alignment over SFT alone.
    pub list_over_sft: f64,
    /// Required long-tail HR@k loss when related queries are removed.
    pub enhancement_gain: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 16,
            beam: BeamConfig {
                beam_size: 32,
                max_len: 24,
                length_penalty: 0.0,
            },
            thresholds: Thresholds::default(),
            ablation: true,
            list_over_sft: 0.02,
            enhancement_gain: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    /// Relative paths resolve against the work directory.
    pub feedback_log: PathBuf,
    pub k: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".to_string(),
            feedback_log: PathBuf::from("feedback.jsonl"),
            k: 16,
        }
    }
}

/// Every setting of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Artifact root; relative paths resolve against the config file.
    pub workdir: PathBuf,
    pub exec: Execution,
    pub corpus: CorpusConfig,
    pub align: AlignConfig,
    pub index: IndexConfig,
    pub rqvae: RqvaeConfig,
    pub enhance: EnhanceParams,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut enhance = EnhanceParams::default();
        enhance.search.k = 5;
        Self {
            seed: 7,
            workdir: PathBuf::from("run"),
            exec: Execution::Parallel,
            corpus: CorpusConfig::default(),
            align: AlignConfig::default(),
            index: IndexConfig::default(),
            rqvae: RqvaeConfig::default(),
            enhance,
            sft: SftConfig::default(),
            dpo: DpoConfig::default(),
            eval: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Corpus,
    Align,
    Index,
    Rqvae,
    Sft,
    Dpo,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Corpus,
        Stage::Align,
        Stage::Index,
        Stage::Rqvae,
        Stage::Sft,
        Stage::Dpo,
        Stage::Eval,
    ];

    /// Subcommand that produces the stage's artifacts.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Corpus => "gen-corpus",
            Stage::Align => "train-align",
            Stage::Index => "build-index",
            Stage::Rqvae => "train-rqvae",
            Stage::Sft => "train-sft",
            Stage::Dpo => "train-dpo",
            Stage::Eval => "eval",
        }
    }

    /// Directory under the work directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::Align => "align",
            Stage::Index => "index",
            Stage::Rqvae => "rqvae",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::Eval => "eval",
        }
    }

    fn ordinal(self) -> u64 {
        self as u64
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `workdir` is taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        if cfg.workdir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.workdir = base.join(&cfg.workdir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !(0.0..1.0).contains(&self.corpus.test_fraction) {
            return bad(format!("corpus.test_fraction {} must be in [0, 1)", self.corpus.test_fraction));
        }
        if self.rqvae.dims.d_in != self.align.dims.d_out {
            return bad(format!(
                "rqvae.dims.d_in ({}) must equal align.dims.d_out ({})",
                self.rqvae.dims.d_in, self.align.dims.d_out
            ));
        }
        if self.sft.limits.max_len > self.sft.model.max_enc_len {
            return bad(format!(
                "sft.limits.max_len ({}) exceeds sft.model.max_enc_len ({})",
                self.sft.limits.max_len, self.sft.model.max_enc_len
            ));
        }
        if self.sft.model.d_model % self.sft.model.heads.max(1) != 0 || self.sft.model.heads == 0 {
            return bad("sft.model.d_model must be a positive multiple of heads".into());
        }
        if self.eval.beam.max_len > self.sft.model.max_dec_len {
            return bad(format!(
                "eval.beam.max_len ({}) exceeds sft.model.max_dec_len ({})",
                self.eval.beam.max_len, self.sft.model.max_dec_len
            ));
        }
        if self.eval.k == 0 || self.eval.beam.beam_size == 0 || self.serve.k == 0 {
            return bad("eval.k, eval.beam.beam_size and serve.k must be positive".into());
        }
        if !(self.enhance.search.lambda_div > 0.0 && self.enhance.search.lambda_div < 1.0) {
            return bad("enhance.search.lambda_div must be in (0, 1)".into());
        }
        self.eval.thresholds.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        self.dpo.reward.validate().map_err(|e| CoreError::Config(e.to_string()))?;
        Ok(())
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        match stage {
            Stage::Corpus => serde_json::json!({ "seed": self.seed, "corpus": v(&self.corpus) }),
            Stage::Align => serde_json::json!({ "align": v(&self.align) }),
            Stage::Index => serde_json::json!({ "index": v(&self.index) }),
            Stage::Rqvae => serde_json::json!({ "rqvae": v(&self.rqvae) }),
            Stage::Sft => serde_json::json!({ "enhance": v(&self.enhance), "sft": v(&self.sft) }),
            Stage::Dpo => serde_json::json!({ "dpo": v(&self.dpo) }),
            Stage::Eval => serde_json::json!({ "eval": v(&self.eval) }),
        }
    }

    /// Hash of the settings of `stage` and of every stage before it.
    /// Execution mode, paths and serving settings are excluded.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut prev = String::new();
        for s in Stage::ALL {
            let mut h = Sha256::new();
            h.update(prev.as_bytes());
            h.update(s.command().as_bytes());
            h.update(self.section(s).to_string().as_bytes());
            prev = hex(&h.finalize()[..8]);
            if s == stage {
                break;
            }
        }
        prev
    }

    /// Seed for the randomness of one stage.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(stage.ordinal())
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.workdir.join(stage.dir())
    }

    pub fn feedback_log(&self) -> PathBuf {
        if self.serve.feedback_log.is_absolute() {
            self.serve.feedback_log.clone()
        } else {
            self.workdir.join(&self.serve.feedback_log)
        }
    }

    /// A run small enough to finish in seconds, for smoke tests. Serving
    /// settings match the defaults.
    pub fn smoke(workdir: impl Into<PathBuf>) -> Self {
        let mut cfg = Self {
            workdir: workdir.into(),
            ..Self::default()
        };
        cfg.corpus.n_categories = 4;
        cfg.corpus.n_queries = 60;
        cfg.corpus.words_per_category = 3;
        cfg.corpus.sim.n_users = 24;
        cfg.corpus.sim.n_events = 600;
        cfg.align.dims = EncoderDims {
            d_emb: 16,
            d_hidden: 16,
            d_out: 16,
        };
        cfg.align.training.epochs = 2;
        cfg.rqvae.dims.d_in = 16;
        cfg.rqvae.dims.d_hidden = 16;
        cfg.rqvae.dims.d_latent = 8;
        cfg.rqvae.dims.blocks = 1;
        cfg.rqvae.dims.levels = 3;
        cfg.rqvae.dims.codebook_size = 8;
        cfg.rqvae.training.epochs = 3;
        cfg.sft.model.d_model = 16;
        cfg.sft.model.layers = 1;
        cfg.sft.model.d_ff = 16;
        cfg.sft.limits.max_related = 2;
        cfg.sft.limits.max_history = 2;
        cfg.sft.training.epochs = 1;
        cfg.dpo.training.epochs = 1;
        cfg.eval.ablation = false;
        cfg
    }
}

fn v<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).expect("config sections serialise")
}
