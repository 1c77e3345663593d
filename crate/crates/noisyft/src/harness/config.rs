//! Run configuration: everything needed to bit-reproduce a training run.
//!
//! A parsed config may leave some fields at placeholder defaults
//! (`vocab_size` 0, `seq_len` 0, `micro_batch` 0). `resolve` materializes
//! those from the corpus and the other fields, copies `seeds.noise` into
//! the noise spec, and validates the whole; the resolved form is what gets
//! hashed and persisted in the run directory.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::SeedLineage;
use crate::error::{Error, Result};
use crate::generate::GenerationConfig;
use crate::model::ModelConfig;
use crate::noise::NoiseSpec;
use crate::optim::{FreezeSpec, OptimizerConfig};

use super::prompt::{MetaPrompt, TemplateId};

pub const CONFIG_HASH_LEN: usize = 12;

fn default_effective_batch() -> usize {
    1
}

fn default_log_interval() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub freeze: FreezeSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub epochs: u32,
    #[serde(default = "default_effective_batch")]
    pub effective_batch: usize,
    /// Sequences per gradient-accumulation micro-batch; 0 resolves to
    /// `effective_batch` (no accumulation).
    #[serde(default)]
    pub micro_batch: usize,
    /// Cap on training sequence length (input positions); 0 resolves to
    /// `model.max_seq_len`.
    #[serde(default)]
    pub seq_len: usize,
    pub dataset: PathBuf,
    pub dataset_tag: String,
    #[serde(default)]
    pub template: TemplateId,
    #[serde(default)]
    pub meta_prompt: MetaPrompt,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub seeds: SeedLineage,
    /// Fraction of examples held out for the eval-loss column; 0 trains
    /// on everything and leaves that column empty.
    #[serde(default)]
    pub eval_fraction: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
}

/// Expands a single master seed into the four run streams.
pub fn seeds_from_master(master: u64) -> SeedLineage {
    SeedLineage {
        init: master,
        data: master.wrapping_add(1),
        noise: master.wrapping_add(2),
        sampling: master.wrapping_add(3),
    }
}

impl RunConfig {
    /// Materializes placeholder fields and validates. `corpus_vocab_size`
    /// is the tokenizer size derived from the training corpus.
    pub fn resolve(&self, corpus_vocab_size: usize) -> Result<RunConfig> {
        let mut r = self.clone();
        if r.model.vocab_size == 0 {
            r.model.vocab_size = corpus_vocab_size;
        } else if r.model.vocab_size < corpus_vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} is smaller than the corpus vocabulary {}",
                r.model.vocab_size, corpus_vocab_size
            )));
        }
        if r.seq_len == 0 {
            r.seq_len = r.model.max_seq_len;
        }
        if r.seq_len > r.model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds model.max_seq_len {}",
                r.seq_len, r.model.max_seq_len
            )));
        }
        if r.effective_batch == 0 {
            return Err(Error::Config("effective_batch must be ≥ 1".into()));
        }
        if r.micro_batch == 0 {
            r.micro_batch = r.effective_batch;
        }
        if r.effective_batch % r.micro_batch != 0 {
            return Err(Error::Config(format!(
                "micro_batch {} must divide effective_batch {}",
                r.micro_batch, r.effective_batch
            )));
        }
        if !(0.0..1.0).contains(&r.eval_fraction) {
            return Err(Error::Config(format!(
                "eval_fraction must lie in [0, 1), got {}",
                r.eval_fraction
            )));
        }
        if r.log_interval == 0 {
            return Err(Error::Config("log_interval must be ≥ 1".into()));
        }
        // The dedicated noise stream is always the one named in `seeds`.
        r.noise.seed = r.seeds.noise;
        r.model.validate()?;
        r.noise.validate()?;
        r.generation.validate()?;
        Ok(r)
    }

    /// First 12 hex chars of the SHA-256 of the resolved config's JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..CONFIG_HASH_LEN].to_string()
    }

    /// Canonical serialized form used for persistence and round-trips.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(json: &str) -> Result<RunConfig> {
        Ok(serde_json::from_str(json)?)
    }
}
