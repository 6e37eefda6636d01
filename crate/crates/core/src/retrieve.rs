//! Greedy decoding, the two-stage and single-stage generative retrievers,
//! and the BM25 baseline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, QueryRecord};
use crate::dataset::StageSpec;
use crate::error::{Error, Result};
use crate::model::infer::IncrementalDecoder;
use crate::model::{log_prob, Scalar, Seq2SeqModel};
use crate::tokenizer::{Role, Tokenizer, BOS, EOS, NUM_SPECIALS, PASSAGE_PROMPT, TITLE_PROMPT};
use crate::util::{derived_rng, read_to_string, to_jsonl, write_atomic};

/// Anything that yields next-token logits one step at a time.
pub trait StepLogits {
    /// Feed `token` (BOS first) and return logits for the next position.
    fn next_logits(&mut self, token: u32) -> Result<Vec<f64>>;
}

impl<F: Scalar> StepLogits for IncrementalDecoder<'_, F> {
    fn next_logits(&mut self, token: u32) -> Result<Vec<f64>> {
        Ok(self.step(token)?.into_iter().map(|x| x.f64()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Emitted ids, including the final EOS when one was produced.
    pub ids: Vec<u32>,
    pub text: String,
    /// `log Pr(y_t | y_<t, x)` for every emitted id.
    pub logprobs: Vec<f64>,
}

/// Greedy choice over content tokens, lowest id on ties. EOS is taken only
/// when its logit strictly beats every content token; PAD, BOS and UNK are
/// never emitted.
pub fn pick(logits: &[f64]) -> u32 {
    let mut best = NUM_SPECIALS as usize;
    for (i, &x) in logits.iter().enumerate().skip(NUM_SPECIALS as usize + 1) {
        if x > logits[best] {
            best = i;
        }
    }
    if logits[EOS as usize] > logits[best] {
        EOS
    } else {
        best as u32
    }
}

/// Run greedy search for at most `max_len` steps.
pub fn greedy_search<S: StepLogits>(stepper: &mut S, max_len: usize) -> Result<(Vec<u32>, Vec<f64>)> {
    let mut ids = Vec::new();
    let mut logprobs = Vec::new();
    let mut prev = BOS;
    while ids.len() < max_len {
        let logits = stepper.next_logits(prev)?;
        let next = pick(&logits);
        logprobs.push(log_prob(&logits, next as usize));
        ids.push(next);
        if next == EOS {
            break;
        }
        prev = next;
    }
    Ok((ids, logprobs))
}

pub fn greedy_decode<F: Scalar>(
    model: &Seq2SeqModel<F>,
    source: &[u32],
    max_len: usize,
    tok: &Tokenizer,
) -> Result<Decoded> {
    let mut dec = IncrementalDecoder::new(model, source)?;
    let (ids, logprobs) = greedy_search(&mut dec, max_len.min(model.config().max_target_len))?;
    let text = tok.decode(&ids)?;
    Ok(Decoded { ids, text, logprobs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TwoStage,
    SingleStage,
    Bm25,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::TwoStage => "two_stage",
            Method::SingleStage => "single_stage",
            Method::Bm25 => "bm25",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub method: Method,
    pub predicted_url: String,
    pub intermediate_passage: Option<String>,
    /// Sum of all generation log-probabilities (both stages for two-stage);
    /// absent for BM25.
    pub logprob_sum: Option<f64>,
    /// Per-step log-probabilities of the URL generation.
    pub per_step_logprobs: Vec<f64>,
    /// Per-step log-probabilities of the passage generation (two-stage only).
    #[serde(default)]
    pub passage_logprobs: Vec<f64>,
}

fn check_hash<F: Scalar>(model: &Seq2SeqModel<F>, tok: &Tokenizer) -> Result<()> {
    if model.tokenizer_hash != tok.hash() {
        return Err(Error::TokenizerMismatch {
            expected: tok.hash().to_string(),
            found: model.tokenizer_hash.clone(),
        });
    }
    Ok(())
}

/// Stage 2 alone: URL from a passage text.
pub fn url_from_passage<F: Scalar>(
    stage2: &Seq2SeqModel<F>,
    passage: &str,
    spec2: &StageSpec,
    tok: &Tokenizer,
) -> Result<Decoded> {
    let src = tok.encode(passage, Role::Source, spec2.source_max);
    greedy_decode(stage2, &src.ids, spec2.target_max, tok)
}

pub fn two_stage_retrieve<F: Scalar>(
    query_id: &str,
    stage1: &Seq2SeqModel<F>,
    stage2: &Seq2SeqModel<F>,
    query: &str,
    spec1: &StageSpec,
    spec2: &StageSpec,
    tok: &Tokenizer,
) -> Result<RetrievalResult> {
    check_hash(stage1, tok)?;
    check_hash(stage2, tok)?;
    let src = tok.encode(query, Role::Source, spec1.source_max);
    let passage = greedy_decode(stage1, &src.ids, spec1.target_max.min(spec2.source_max), tok)?;
    let url = url_from_passage(stage2, &passage.text, spec2, tok)?;
    let sum = passage.logprobs.iter().chain(&url.logprobs).sum();
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        method: Method::TwoStage,
        predicted_url: url.text,
        intermediate_passage: Some(passage.text),
        logprob_sum: Some(sum),
        per_step_logprobs: url.logprobs,
        passage_logprobs: passage.logprobs,
    })
}

pub fn single_stage_retrieve<F: Scalar>(
    query_id: &str,
    model: &Seq2SeqModel<F>,
    query: &str,
    spec: &StageSpec,
    tok: &Tokenizer,
) -> Result<RetrievalResult> {
    check_hash(model, tok)?;
    let src = tok.encode(query, Role::Source, spec.source_max);
    let url = greedy_decode(model, &src.ids, spec.target_max, tok)?;
    Ok(RetrievalResult {
        query_id: query_id.to_string(),
        method: Method::SingleStage,
        predicted_url: url.text,
        intermediate_passage: None,
        logprob_sum: Some(url.logprobs.iter().sum()),
        per_step_logprobs: url.logprobs,
        passage_logprobs: Vec::new(),
    })
}

/// Retrieve for every query in parallel; output sorted by query id.
pub fn retrieve_all<T, R>(queries: &[QueryRecord], run: R) -> Result<Vec<T>>
where
    T: Send + HasQueryId,
    R: Fn(&QueryRecord) -> Result<T> + Sync,
{
    let mut out: Vec<T> = queries.par_iter().map(&run).collect::<Result<_>>()?;
    out.sort_by(|a, b| a.query_id().cmp(b.query_id()));
    Ok(out)
}

pub trait HasQueryId {
    fn query_id(&self) -> &str;
}

impl HasQueryId for RetrievalResult {
    fn query_id(&self) -> &str {
        &self.query_id
    }
}

pub fn save_results(results: &[RetrievalResult], path: &Path) -> Result<()> {
    write_atomic(path, &to_jsonl(results)?)
}

pub fn parse_results(text: &str) -> Result<Vec<RetrievalResult>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn load_results(path: &Path) -> Result<Vec<RetrievalResult>> {
    parse_results(&read_to_string(path)?)
}

/// Delete one whitespace-separated word, never a prompt marker, chosen by
/// `derived_rng(seed, key)`. Returns `None` when no deletable word exists.
pub fn drop_one_word(text: &str, seed: u64, key: &str) -> Option<String> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let markers = [TITLE_PROMPT.trim(), PASSAGE_PROMPT.trim()];
    let candidates: Vec<usize> = (0..words.len()).filter(|&i| !markers.contains(&words[i])).collect();
    if candidates.is_empty() {
        return None;
    }
    let victim = candidates[derived_rng(seed, key).gen_range(0..candidates.len())];
    let kept: Vec<&str> = words
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != victim)
        .map(|(_, w)| *w)
        .collect();
    Some(kept.join(" "))
}

/// Fraction of `(passage text, expected url)` cases for which stage 2 still
/// emits the expected URL after one word is deleted from the passage.
pub fn error_tolerance<F: Scalar>(
    stage2: &Seq2SeqModel<F>,
    cases: &[(String, String)],
    spec2: &StageSpec,
    tok: &Tokenizer,
    seed: u64,
) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::Invalid("no cases for the error-tolerance probe".into()));
    }
    check_hash(stage2, tok)?;
    let hits: Vec<bool> = cases
        .par_iter()
        .enumerate()
        .map(|(i, (passage, url))| {
            let perturbed = drop_one_word(passage, seed, &format!("tolerance/{i}")).unwrap_or_default();
            let out = url_from_passage(stage2, &perturbed, spec2, tok)?;
            Ok(crate::corpus::normalize(&out.text) == crate::corpus::normalize(url))
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / cases.len() as f64)
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Lowercase words split on non-alphanumeric characters.
pub fn bm25_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    /// Term -> (document index, term frequency), sorted by document index.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
    /// Passage ids in ascending order; document index `i` is `doc_ids[i]`.
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<u32>,
    pub avg_doc_length: f64,
    pub doc_count: usize,
    pub k1: f64,
    pub b: f64,
}

/// Index `"{title} {passage}"` of every record.
pub fn bm25_build(corpus: &Corpus, k1: f64, b: f64) -> Result<Bm25Index> {
    if corpus.is_empty() {
        return Err(Error::Invalid("cannot index an empty corpus".into()));
    }
    if !(k1 > 0.0) || !(0.0..=1.0).contains(&b) {
        return Err(Error::Config(format!("bm25 parameters k1={k1}, b={b}")));
    }
    let mut records: Vec<_> = corpus.records().iter().collect();
    records.sort_by(|x, y| x.id.cmp(&y.id));
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let terms = bm25_tokenize(&format!("{} {}", r.title, r.passage));
        if terms.is_empty() {
            return Err(Error::Invalid(format!("passage {} has no indexable terms", r.id)));
        }
        doc_lengths.push(terms.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in terms {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            postings.entry(t).or_default().push((i as u32, n));
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
    Ok(Bm25Index {
        postings,
        doc_ids: records.iter().map(|r| r.id.clone()).collect(),
        avg_doc_length: total as f64 / doc_lengths.len() as f64,
        doc_count: doc_lengths.len(),
        doc_lengths,
        k1,
        b,
    })
}

impl Bm25Index {
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.postings.get(term).map_or(0, |p| p.len()) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Top `topk` `(passage id, score)` over documents sharing at least one
/// distinct query term, by descending score then ascending id.
pub fn bm25_retrieve(index: &Bm25Index, query: &str, topk: usize) -> Vec<(String, f64)> {
    let mut terms = bm25_tokenize(query);
    terms.sort();
    terms.dedup();
    let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
    for t in &terms {
        let Some(list) = index.postings.get(t) else { continue };
        let idf = index.idf(t);
        for &(doc, tf) in list {
            let tf = tf as f64;
            let norm = 1.0 - index.b + index.b * index.doc_lengths[doc as usize] as f64 / index.avg_doc_length;
            *scores.entry(doc).or_default() += idf * tf * (index.k1 + 1.0) / (tf + index.k1 * norm);
        }
    }
    let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(topk)
        .map(|(d, s)| (index.doc_ids[d as usize].clone(), s))
        .collect()
}

/// BM25 as a URL retriever: the top passage's assigned URL, or an empty
/// prediction when no term matches.
pub fn bm25_result(index: &Bm25Index, corpus: &Corpus, query: &QueryRecord) -> RetrievalResult {
    let predicted_url = bm25_retrieve(index, &query.text, 1)
        .first()
        .and_then(|(id, _)| corpus.get(id))
        .map(|r| r.assigned_url.clone())
        .unwrap_or_default();
    RetrievalResult {
        query_id: query.query_id.clone(),
        method: Method::Bm25,
        predicted_url,
        intermediate_passage: None,
        logprob_sum: None,
        per_step_logprobs: Vec::new(),
        passage_logprobs: Vec::new(),
    }
}
