//! Tokenized training pairs for both generation stages.
//!
//! Stage 1 maps a query to `title: {title} passage: {passage}` with the
//! passage cut to `passage_trunc` tokens. Stage 2 maps that exact formatted
//! text (as stage 1 would emit it) to the record's assigned URL. The
//! single-stage variant maps queries straight to URLs.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::PseudoQuery;
use crate::corpus::{Corpus, PassageRecord};
use crate::error::{Error, Result};
use crate::tokenizer::{Role, TokenSequence, Tokenizer, EOS, PASSAGE_PROMPT, TITLE_PROMPT};
use crate::util::{read_to_string, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PassageGen,
    UrlGen,
    /// Direct query -> URL generation (the single-stage baseline).
    QueryUrl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub source_max: usize,
    pub target_max: usize,
    pub use_prompts: bool,
    pub passage_trunc: usize,
}

impl StageSpec {
    pub fn passage_gen() -> Self {
        StageSpec {
            stage: Stage::PassageGen,
            source_max: 32,
            target_max: 64,
            use_prompts: true,
            passage_trunc: 32,
        }
    }

    /// The URL stage consuming `stage1`'s output: its source is the stage-1
    /// target format, truncated at the stage-1 target length.
    pub fn url_gen_for(stage1: &StageSpec) -> Self {
        StageSpec {
            stage: Stage::UrlGen,
            source_max: stage1.target_max,
            target_max: 80,
            use_prompts: stage1.use_prompts,
            passage_trunc: stage1.passage_trunc,
        }
    }

    pub fn query_url_for(stage1: &StageSpec, stage2: &StageSpec) -> Self {
        StageSpec {
            stage: Stage::QueryUrl,
            source_max: stage1.source_max,
            target_max: stage2.target_max,
            use_prompts: stage1.use_prompts,
            passage_trunc: stage1.passage_trunc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_max < 2 || self.target_max < 2 || self.passage_trunc < 1 {
            return Err(Error::Config(format!("stage maxima must be >= 2: {self:?}")));
        }
        if self.stage == Stage::PassageGen && self.passage_trunc > self.target_max {
            return Err(Error::Config(format!(
                "passage_trunc {} exceeds stage-1 target_max {}",
                self.passage_trunc, self.target_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    /// Pseudo-query key (`{passage_id}#{index}`), query id, or passage id.
    pub source_id: String,
    pub passage_id: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub source: TokenSequence,
    pub target: TokenSequence,
    pub meta: PairMeta,
}

/// Ids of `"title: {title} passage: {passage}"` (or `"{title} {passage}"`
/// without prompts), passage pre-cut to `passage_trunc` tokens, final
/// encoding cut to `max_len` with EOS.
pub fn format_passage(
    record: &PassageRecord,
    use_prompts: bool,
    passage_trunc: usize,
    max_len: usize,
    role: Role,
    tok: &Tokenizer,
) -> TokenSequence {
    let mut passage_ids = tok.encode_content(&record.passage);
    passage_ids.truncate(passage_trunc);
    let passage = tok
        .decode(&passage_ids)
        .expect("ids produced by the same tokenizer");
    let passage = passage.trim_start();
    let text = if use_prompts {
        format!("{TITLE_PROMPT}{} {PASSAGE_PROMPT}{passage}", record.title)
    } else {
        format!("{} {passage}", record.title)
    };
    tok.encode(&text, role, max_len)
}

pub fn format_stage1_target(record: &PassageRecord, spec: &StageSpec, tok: &Tokenizer) -> TokenSequence {
    debug_assert_eq!(spec.stage, Stage::PassageGen);
    format_passage(record, spec.use_prompts, spec.passage_trunc, spec.target_max, Role::Target, tok)
}

/// The stage-1 target as text: what a perfect passage generator emits.
pub fn stage1_target_text(record: &PassageRecord, spec: &StageSpec, tok: &Tokenizer) -> String {
    let seq = format_passage(record, spec.use_prompts, spec.passage_trunc, spec.target_max, Role::Target, tok);
    tok.decode(&seq.ids).expect("in-vocabulary ids")
}

pub fn build_stage1(
    pairs: &[PseudoQuery],
    corpus: &Corpus,
    spec: &StageSpec,
    tok: &Tokenizer,
) -> Result<Vec<TrainingPair>> {
    spec.validate()?;
    let mut targets = std::collections::HashMap::new();
    let mut counters = std::collections::HashMap::<&str, usize>::new();
    let mut out = Vec::with_capacity(pairs.len());
    for q in pairs {
        let record = corpus
            .get(&q.passage_id)
            .ok_or_else(|| Error::UnknownPassage(q.passage_id.clone()))?;
        let target = targets
            .entry(q.passage_id.as_str())
            .or_insert_with(|| format_stage1_target(record, spec, tok))
            .clone();
        let n = counters.entry(q.passage_id.as_str()).or_insert(0);
        let source_id = format!("{}#{}", q.passage_id, n);
        *n += 1;
        out.push(TrainingPair {
            source: tok.encode(&q.text, Role::Source, spec.source_max),
            target,
            meta: PairMeta {
                source_id,
                passage_id: record.id.clone(),
                url: record.assigned_url.clone(),
            },
        });
    }
    Ok(out)
}

pub fn build_stage2(corpus: &Corpus, spec: &StageSpec, tok: &Tokenizer) -> Result<Vec<TrainingPair>> {
    spec.validate()?;
    Ok(corpus
        .records()
        .iter()
        .map(|r| TrainingPair {
            source: format_passage(r, spec.use_prompts, spec.passage_trunc, spec.source_max, Role::Source, tok),
            target: tok.encode(&r.assigned_url, Role::Target, spec.target_max),
            meta: PairMeta {
                source_id: r.id.clone(),
                passage_id: r.id.clone(),
                url: r.assigned_url.clone(),
            },
        })
        .collect())
}

/// Query -> URL pairs for the single-stage baseline.
pub fn build_single_stage(
    pairs: &[PseudoQuery],
    corpus: &Corpus,
    spec: &StageSpec,
    tok: &Tokenizer,
) -> Result<Vec<TrainingPair>> {
    spec.validate()?;
    let mut counters = std::collections::HashMap::<&str, usize>::new();
    pairs
        .iter()
        .map(|q| {
            let record = corpus
                .get(&q.passage_id)
                .ok_or_else(|| Error::UnknownPassage(q.passage_id.clone()))?;
            let n = counters.entry(q.passage_id.as_str()).or_insert(0);
            let source_id = format!("{}#{}", q.passage_id, n);
            *n += 1;
            Ok(TrainingPair {
                source: tok.encode(&q.text, Role::Source, spec.source_max),
                target: tok.encode(&record.assigned_url, Role::Target, spec.target_max),
                meta: PairMeta {
                    source_id,
                    passage_id: record.id.clone(),
                    url: record.assigned_url.clone(),
                },
            })
        })
        .collect()
}

pub const DATASET_FORMAT: &str = "tome-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub spec: StageSpec,
    pub tokenizer_hash: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<TrainingPair>,
}

impl Dataset {
    pub fn new(spec: StageSpec, tok: &Tokenizer, pairs: Vec<TrainingPair>) -> Self {
        Dataset {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                version: DATASET_VERSION,
                spec,
                tokenizer_hash: tok.hash().to_string(),
                count: pairs.len(),
            },
            pairs,
        }
    }

    /// JSONL: header object on the first line, one pair per line after.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.header)?;
        out.push(b'\n');
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n").expect("vec write");
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: DatasetHeader = serde_json::from_str(lines.next().unwrap_or(""))
            .map_err(|e| Error::Parse { line: 1, message: format!("bad dataset header: {e}") })?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Schema(format!(
                "unsupported dataset {} v{}",
                header.format, header.version
            )));
        }
        let mut pairs = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            pairs.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?);
        }
        if pairs.len() != header.count {
            return Err(Error::Schema(format!(
                "dataset header announces {} pairs, found {}",
                header.count,
                pairs.len()
            )));
        }
        Ok(Dataset { header, pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    /// Load and refuse a dataset built with a different tokenizer.
    pub fn load_for(path: &Path, tok: &Tokenizer) -> Result<Self> {
        let ds = Self::load(path)?;
        if ds.header.tokenizer_hash != tok.hash() {
            return Err(Error::TokenizerMismatch {
                expected: tok.hash().to_string(),
                found: ds.header.tokenizer_hash,
            });
        }
        Ok(ds)
    }
}

/// Every sequence respects its maxima and targets end with EOS.
pub fn check_bounds(pairs: &[TrainingPair], spec: &StageSpec) -> Result<()> {
    for p in pairs {
        if p.source.len() > spec.source_max {
            return Err(Error::LengthOverflow { what: "source", len: p.source.len(), max: spec.source_max });
        }
        if p.target.len() > spec.target_max {
            return Err(Error::LengthOverflow { what: "target", len: p.target.len(), max: spec.target_max });
        }
        if p.target.ids.last() != Some(&EOS) {
            return Err(Error::Invalid(format!("target for {} lacks EOS", p.meta.source_id)));
        }
    }
    Ok(())
}
