//! Run configuration: one JSON document covering every stage. Every field
//! has a default, so `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentConfig;
use crate::dataset::StageSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SizeTag, TrainConfig};
use crate::tokenizer::MIN_VOCAB;
use crate::util::{read_to_string, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSection {
    /// Corpus JSONL; a synthetic corpus is generated when absent.
    pub path: Option<PathBuf>,
    /// Queries TSV; required when `path` is set.
    pub queries: Option<PathBuf>,
    pub synth_records: usize,
    /// Fraction of labeled queries held out for evaluation; the rest join
    /// the pseudo queries as training sources.
    pub dev_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { path: None, queries: None, synth_records: 50, dev_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub size: SizeTag,
    pub dropout: f64,
    pub tie_output: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { size: SizeTag::Tiny, dropout: 0.0, tie_output: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub vocab_size: usize,
    pub augment: AugmentConfig,
    pub stage1: StageSpec,
    pub stage2_target_max: usize,
    pub model: ModelSection,
    pub train_stage1: TrainConfig,
    pub train_stage2: TrainConfig,
    pub train_single: TrainConfig,
    /// Fixed gradient shards per batch; 1 keeps training single-threaded.
    pub grad_shards: usize,
    /// Skip the generative models (BM25 only).
    pub skip_training: bool,
    pub train_single_stage: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            vocab_size: 2048,
            augment: AugmentConfig::default(),
            stage1: StageSpec::passage_gen(),
            stage2_target_max: 80,
            model: ModelSection::default(),
            train_stage1: TrainConfig::stage1_default(),
            train_stage2: TrainConfig::stage2_default(),
            train_single: TrainConfig::stage1_default(),
            grad_shards: 1,
            skip_training: false,
            train_single_stage: true,
        }
    }
}

impl RunConfig {
    /// Deep-merge `text` over the defaults; unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(RunConfig::default())?;
        merge(&mut merged, user, "")?;
        serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    /// Apply `--seed`: the top-level seed plus every stage's seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.augment.seed = seed;
        self.train_stage1.seed = seed;
        self.train_stage2.seed = seed;
        self.train_single.seed = seed;
        self
    }

    pub fn stage2(&self) -> StageSpec {
        StageSpec { target_max: self.stage2_target_max, ..StageSpec::url_gen_for(&self.stage1) }
    }

    pub fn single(&self) -> StageSpec {
        StageSpec::query_url_for(&self.stage1, &self.stage2())
    }

    pub fn model_config(&self, vocab_size: usize, spec: &StageSpec) -> ModelConfig {
        ModelConfig {
            dropout: self.model.dropout,
            tie_output: self.model.tie_output,
            ..ModelConfig::preset(self.model.size, vocab_size, spec.source_max, spec.target_max)
        }
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!("vocab_size {} below {MIN_VOCAB}", self.vocab_size)));
        }
        if !(self.corpus.dev_fraction > 0.0 && self.corpus.dev_fraction <= 1.0) {
            return Err(Error::Config(format!("dev_fraction {} outside (0, 1]", self.corpus.dev_fraction)));
        }
        if self.corpus.path.is_none() && self.corpus.synth_records == 0 {
            return Err(Error::Config("synth_records must be >= 1".into()));
        }
        if self.corpus.path.is_some() != self.corpus.queries.is_some() {
            return Err(Error::Config("corpus.path and corpus.queries must be given together".into()));
        }
        if self.grad_shards == 0 {
            return Err(Error::Config("grad_shards must be >= 1".into()));
        }
        self.augment.validate()?;
        self.stage1.validate()?;
        self.stage2().validate()?;
        self.single().validate()?;
        for t in [&self.train_stage1, &self.train_stage2, &self.train_single] {
            t.validate()?;
        }
        for spec in [self.stage1.clone(), self.stage2(), self.single()] {
            self.model_config(self.vocab_size, &spec).validate()?;
        }
        Ok(())
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown key {here}"))),
                }
            }
            Ok(())
        }
        (_, _) => Err(Error::Config(format!("{} must be an object", if path.is_empty() { "config" } else { path }))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.stage2().source_max, c.stage1.target_max);
        assert_eq!(c.single().source_max, c.stage1.source_max);
        assert_eq!(c.single().target_max, 80);
    }

    #[test]
    fn partial_sections_merge_and_unknown_keys_fail() {
        let c = RunConfig::from_json(r#"{"vocab_size": 512, "augment": {"k": 5}, "model": {"size": "small"}}"#).unwrap();
        assert_eq!(c.vocab_size, 512);
        assert_eq!(c.augment.k, 5);
        assert_eq!(c.augment.min_len, AugmentConfig::default().min_len);
        assert_eq!(c.model.size, SizeTag::Small);
        assert!(RunConfig::from_json(r#"{"vocab": 5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"augment": {"kk": 5}}"#).is_err());
        let s2 = RunConfig::from_json(r#"{"train_stage2": {"max_steps": 300}}"#).unwrap();
        assert_eq!(s2.train_stage2.warmup_steps, 50);
        assert_eq!(s2.train_stage2.max_steps, 300);
        let bad = RunConfig { vocab_size: 100, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_reaches_every_stage() {
        let c = RunConfig::default().with_seed(7);
        assert_eq!((c.augment.seed, c.train_stage1.seed, c.train_stage2.seed, c.train_single.seed), (7, 7, 7, 7));
        assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
    }
}
