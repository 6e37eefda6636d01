//! Hits@1, corpus-membership analysis of generated passages, and trace
//! export.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, Corpus, QueryRecord};
use crate::dataset::{stage1_target_text, StageSpec};
use crate::error::{Error, Result};
use crate::retrieve::{Method, RetrievalResult};
use crate::tokenizer::Tokenizer;
use crate::util::{to_jsonl, write_atomic};

/// Query id -> acceptable URL texts.
pub type Labels = BTreeMap<String, BTreeSet<String>>;

/// Every URL of every positive passage is an acceptable answer.
pub fn labels_from_queries(queries: &[QueryRecord], corpus: &Corpus) -> Result<Labels> {
    let mut out = Labels::new();
    for q in queries {
        let mut urls = BTreeSet::new();
        for pid in &q.positive_passage_ids {
            let r = corpus.get(pid).ok_or_else(|| Error::UnknownPassage(pid.clone()))?;
            urls.extend(r.urls.iter().cloned());
        }
        out.insert(q.query_id.clone(), urls);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    query_id: String,
    urls: BTreeSet<String>,
}

/// One `{"query_id", "urls"}` object per line.
pub fn labels_to_jsonl(labels: &Labels) -> Result<Vec<u8>> {
    let lines: Vec<LabelLine> =
        labels.iter().map(|(q, u)| LabelLine { query_id: q.clone(), urls: u.clone() }).collect();
    to_jsonl(&lines)
}

pub fn parse_labels(text: &str) -> Result<Labels> {
    let mut out = Labels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: LabelLine =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if out.insert(l.query_id.clone(), l.urls).is_some() {
            return Err(Error::Parse { line: i + 1, message: format!("duplicate query_id {}", l.query_id) });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub correct: bool,
    pub predicted_url: String,
    pub label_urls: Vec<String>,
    pub passage_in_corpus: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Option<Method>,
    pub hits_at_1: f64,
    pub n_queries: usize,
    pub membership_rate: Option<f64>,
    pub membership_rate_on_misses: Option<f64>,
    /// Two-stage misses whose stage-1 output was empty; excluded from the
    /// misses denominator.
    pub empty_passages_on_misses: Option<usize>,
    pub per_query: Vec<QueryEval>,
}

fn is_correct(predicted: &str, labels: &BTreeSet<String>) -> bool {
    let p = normalize(predicted);
    labels.iter().any(|l| normalize(l) == p)
}

/// Per-query correctness by normalized exact match, ordered by query id.
pub fn hits_at_1(results: &[RetrievalResult], labels: &Labels) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::Invalid("no retrieval results to evaluate".into()));
    }
    let methods: BTreeSet<Method> = results.iter().map(|r| r.method).collect();
    let mut per_query = results
        .iter()
        .map(|r| {
            let l = labels.get(&r.query_id).ok_or_else(|| Error::MissingLabel(r.query_id.clone()))?;
            Ok(QueryEval {
                query_id: r.query_id.clone(),
                correct: is_correct(&r.predicted_url, l),
                predicted_url: r.predicted_url.clone(),
                label_urls: l.iter().cloned().collect(),
                passage_in_corpus: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let hits = per_query.iter().filter(|q| q.correct).count() as f64 / per_query.len() as f64;
    Ok(EvalReport {
        method: (methods.len() == 1).then(|| *methods.first().expect("nonempty")),
        hits_at_1: hits,
        n_queries: per_query.len(),
        membership_rate: None,
        membership_rate_on_misses: None,
        empty_passages_on_misses: None,
        per_query,
    })
}

/// Normalized formatted stage-1 targets of every record.
pub fn formatted_targets(corpus: &Corpus, spec1: &StageSpec, tok: &Tokenizer) -> HashSet<String> {
    corpus.records().iter().map(|r| normalize(&stage1_target_text(r, spec1, tok))).collect()
}

/// Fill in membership fields of a two-stage report. Returns
/// `(membership_rate, membership_rate_on_misses)`.
pub fn membership_analysis(
    report: &mut EvalReport,
    results: &[RetrievalResult],
    corpus: &Corpus,
    spec1: &StageSpec,
    tok: &Tokenizer,
) -> Result<(f64, Option<f64>)> {
    let targets = formatted_targets(corpus, spec1, tok);
    let passages: BTreeMap<&str, &str> = results
        .iter()
        .map(|r| match (&r.method, &r.intermediate_passage) {
            (Method::TwoStage, Some(p)) => Ok((r.query_id.as_str(), p.as_str())),
            _ => Err(Error::Invalid(format!(
                "membership analysis needs two-stage results; query {} is {}",
                r.query_id,
                r.method.as_str()
            ))),
        })
        .collect::<Result<_>>()?;
    let (mut members, mut miss_members, mut misses, mut empty) = (0usize, 0usize, 0usize, 0usize);
    for q in &mut report.per_query {
        let p = passages
            .get(q.query_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no result for query {}", q.query_id)))?;
        let hit = targets.contains(&normalize(p));
        q.passage_in_corpus = Some(hit);
        members += hit as usize;
        if !q.correct {
            if p.trim().is_empty() {
                empty += 1;
            } else {
                misses += 1;
                miss_members += hit as usize;
            }
        }
    }
    let rate = members as f64 / report.per_query.len() as f64;
    let on_misses = (misses > 0).then(|| miss_members as f64 / misses as f64);
    report.membership_rate = Some(rate);
    report.membership_rate_on_misses = on_misses;
    report.empty_passages_on_misses = Some(empty);
    Ok((rate, on_misses))
}

impl EvalReport {
    /// Recompute every ratio from `per_query` and compare.
    pub fn is_self_consistent(&self) -> bool {
        let n = self.per_query.len();
        if n != self.n_queries || n == 0 {
            return false;
        }
        let hits = self.per_query.iter().filter(|q| q.correct).count() as f64 / n as f64;
        if hits != self.hits_at_1 {
            return false;
        }
        let flags: Option<Vec<bool>> = self.per_query.iter().map(|q| q.passage_in_corpus).collect();
        match (flags, self.membership_rate) {
            (None, None) => true,
            (Some(f), Some(rate)) => f.iter().filter(|&&b| b).count() as f64 / n as f64 == rate,
            _ => false,
        }
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json()?)
    }

    pub fn per_query_jsonl(&self) -> Result<Vec<u8>> {
        to_jsonl(&self.per_query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub query_id: String,
    pub query: String,
    pub label_passage_ids: Vec<String>,
    pub label_passages: Vec<String>,
    pub generated_passage: Option<String>,
    pub predicted_url: String,
    pub label_urls: Vec<String>,
    pub correct: bool,
    pub passage_in_corpus: Option<bool>,
}

/// One trace per query, ordered by query id.
pub fn build_traces(
    results: &[RetrievalResult],
    queries: &[QueryRecord],
    corpus: &Corpus,
    report: &EvalReport,
) -> Result<Vec<Trace>> {
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let evals: BTreeMap<&str, &QueryEval> = report.per_query.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let mut out = results
        .iter()
        .map(|r| {
            let q = by_id.get(r.query_id.as_str()).ok_or_else(|| Error::MissingLabel(r.query_id.clone()))?;
            let e = evals.get(r.query_id.as_str()).ok_or_else(|| Error::MissingLabel(r.query_id.clone()))?;
            let label_passages = q
                .positive_passage_ids
                .iter()
                .map(|id| corpus.get(id).map(|p| p.passage.clone()).ok_or_else(|| Error::UnknownPassage(id.clone())))
                .collect::<Result<_>>()?;
            Ok(Trace {
                query_id: r.query_id.clone(),
                query: q.text.clone(),
                label_passage_ids: q.positive_passage_ids.clone(),
                label_passages,
                generated_passage: r.intermediate_passage.clone(),
                predicted_url: r.predicted_url.clone(),
                label_urls: e.label_urls.clone(),
                correct: e.correct,
                passage_in_corpus: e.passage_in_corpus,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(out)
}

pub fn export_traces(
    results: &[RetrievalResult],
    queries: &[QueryRecord],
    corpus: &Corpus,
    report: &EvalReport,
    path: &Path,
) -> Result<usize> {
    let traces = build_traces(results, queries, corpus, report)?;
    write_atomic(path, &to_jsonl(&traces)?)?;
    Ok(traces.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;
    use crate::tokenizer::{PASSAGE_PROMPT, TITLE_PROMPT};
    use proptest::prelude::*;

    fn result(id: &str, url: &str, passage: Option<&str>) -> RetrievalResult {
        RetrievalResult {
            query_id: id.into(),
            method: if passage.is_some() { Method::TwoStage } else { Method::SingleStage },
            predicted_url: url.into(),
            intermediate_passage: passage.map(String::from),
            logprob_sum: Some(-1.0),
            per_step_logprobs: vec![-1.0],
            passage_logprobs: vec![],
        }
    }

    fn labels(pairs: &[(&str, &str)]) -> Labels {
        pairs.iter().map(|(q, u)| (q.to_string(), BTreeSet::from([u.to_string()]))).collect()
    }

    #[test]
    fn half_correct() {
        let r = [result("q1", "u1", None), result("q2", "u9", None)];
        let rep = hits_at_1(&r, &labels(&[("q1", "u1"), ("q2", "u2")])).unwrap();
        assert_eq!(rep.hits_at_1, 0.5);
        assert_eq!(rep.n_queries, 2);
        assert!(rep.is_self_consistent());
    }

    #[test]
    fn normalization_and_errors() {
        let r = [result("q1", " u1 \n", None)];
        assert_eq!(hits_at_1(&r, &labels(&[("q1", "u1")])).unwrap().hits_at_1, 1.0);
        assert!(matches!(hits_at_1(&[], &labels(&[])), Err(Error::Invalid(_))));
        match hits_at_1(&r, &labels(&[("q2", "u1")])) {
            Err(Error::MissingLabel(q)) => assert_eq!(q, "q1"),
            other => panic!("{other:?}"),
        }
    }

    fn corpus() -> Corpus {
        let lines = [
            r#"{"id":"a","title":"Alpha","passage":"first passage text here","urls":["https://x/a"]}"#,
            r#"{"id":"b","title":"Beta","passage":"second passage words","urls":["https://x/b","https://y/b"]}"#,
            r#"{"id":"c","title":"Gamma","passage":"third one","urls":["https://x/c"]}"#,
        ];
        parse_corpus(&lines.join("\n"), 0).unwrap()
    }

    fn tok(c: &Corpus) -> Tokenizer {
        Tokenizer::train(c, 300, 0).unwrap()
    }

    /// Independent membership oracle: split prompt fields, then rebuild each
    /// field from a corpus record.
    fn reconstructed_member(text: &str, c: &Corpus, spec: &StageSpec, tok: &Tokenizer) -> bool {
        let t = normalize(text);
        let Some(rest) = t.strip_prefix(TITLE_PROMPT) else { return false };
        let Some((title, passage)) = rest.split_once(&format!(" {PASSAGE_PROMPT}")) else { return false };
        c.records().iter().any(|r| {
            let mut ids = tok.encode_content(&r.passage);
            ids.truncate(spec.passage_trunc);
            let cut = tok.decode(&ids).unwrap();
            r.title == title && normalize(&cut) == passage
        })
    }

    #[test]
    fn membership_two_oracles_agree() {
        let c = corpus();
        let tok = tok(&c);
        let spec = StageSpec { passage_trunc: 3, ..StageSpec::passage_gen() };
        let t_a = stage1_target_text(c.get("a").unwrap(), &spec, &tok);
        let t_b = stage1_target_text(c.get("b").unwrap(), &spec, &tok);
        let outputs = [
            t_a.clone(),
            t_b.clone(),
            format!("{t_a} extra"),
            "title: Alpha passage: unrelated".to_string(),
            String::new(),
            t_b.replace("Beta", "Gamma"),
        ];
        let results: Vec<_> = outputs
            .iter()
            .enumerate()
            .map(|(i, p)| result(&format!("q{i}"), "https://x/a", Some(p)))
            .collect();
        let l: Labels = (0..outputs.len()).map(|i| (format!("q{i}"), BTreeSet::from(["https://x/a".to_string()]))).collect();
        let mut rep = hits_at_1(&results, &l).unwrap();
        membership_analysis(&mut rep, &results, &c, &spec, &tok).unwrap();
        let flags: Vec<bool> = rep.per_query.iter().map(|q| q.passage_in_corpus.unwrap()).collect();
        let oracle: Vec<bool> = outputs.iter().map(|o| reconstructed_member(o, &c, &spec, &tok)).collect();
        assert_eq!(flags, oracle);
        assert_eq!(flags, vec![true, true, false, false, false, false]);
        assert!(rep.is_self_consistent());
        // Every query is correct, so there are no misses.
        assert_eq!(rep.membership_rate_on_misses, None);
        assert_eq!(rep.membership_rate, Some(2.0 / 6.0));
    }

    #[test]
    fn misses_exclude_empty_outputs_and_single_stage_is_rejected() {
        let c = corpus();
        let tok = tok(&c);
        let spec = StageSpec::passage_gen();
        let t_a = stage1_target_text(c.get("a").unwrap(), &spec, &tok);
        let results = vec![
            result("q1", "wrong", Some(&t_a)),
            result("q2", "wrong", Some("")),
            result("q3", "wrong", Some("nonsense")),
            result("q4", "https://x/a", Some(&t_a)),
        ];
        let l = labels(&[("q1", "https://x/a"), ("q2", "https://x/a"), ("q3", "https://x/a"), ("q4", "https://x/a")]);
        let mut rep = hits_at_1(&results, &l).unwrap();
        let (rate, misses) = membership_analysis(&mut rep, &results, &c, &spec, &tok).unwrap();
        assert_eq!(rate, 0.5);
        assert_eq!(misses, Some(0.5));
        assert_eq!(rep.empty_passages_on_misses, Some(1));
        // Correct answers with verbatim stage-1 output are members.
        assert!(rep.per_query.iter().filter(|q| q.correct).all(|q| q.passage_in_corpus == Some(true)));

        let single = vec![result("q1", "u", None)];
        let mut rep = hits_at_1(&single, &l).unwrap();
        assert!(membership_analysis(&mut rep, &single, &c, &spec, &tok).is_err());
    }

    #[test]
    fn labels_take_every_url_of_positive_passages() {
        let c = corpus();
        let q = vec![QueryRecord { query_id: "q".into(), text: "t".into(), positive_passage_ids: vec!["b".into()] }];
        let l = labels_from_queries(&q, &c).unwrap();
        assert_eq!(l["q"].len(), 2);
        let text = String::from_utf8(labels_to_jsonl(&l).unwrap()).unwrap();
        assert_eq!(parse_labels(&text).unwrap(), l);
        let dup = format!("{text}{text}");
        assert!(matches!(parse_labels(&dup), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn traces_roundtrip_label_passages() {
        let c = corpus();
        let queries = vec![
            QueryRecord { query_id: "q2".into(), text: "beta?".into(), positive_passage_ids: vec!["b".into()] },
            QueryRecord { query_id: "q1".into(), text: "alpha?".into(), positive_passage_ids: vec!["a".into()] },
        ];
        let results = vec![result("q2", "https://y/b", Some("p")), result("q1", "https://x/c", Some("p"))];
        let rep = hits_at_1(&results, &labels_from_queries(&queries, &c).unwrap()).unwrap();
        let traces = build_traces(&results, &queries, &c, &rep).unwrap();
        assert_eq!(traces.len(), 2);
        assert_eq!(traces[0].query_id, "q1");
        assert!(!traces[0].correct && traces[1].correct);
        for t in &traces {
            assert_eq!(t.label_passages[0], c.get(&t.label_passage_ids[0]).unwrap().passage);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        export_traces(&results, &queries, &c, &rep, &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        export_traces(&results, &queries, &c, &rep, &p).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
    }

    proptest! {
        #[test]
        fn hits_is_permutation_invariant(correct in prop::collection::vec(any::<bool>(), 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let results: Vec<_> = correct
                .iter()
                .enumerate()
                .map(|(i, &c)| result(&format!("q{i:03}"), if c { "u" } else { "v" }, None))
                .collect();
            let l: Labels = (0..correct.len()).map(|i| (format!("q{i:03}"), BTreeSet::from(["u".to_string()]))).collect();
            let base = hits_at_1(&results, &l).unwrap();
            let mut shuffled = results.clone();
            shuffled.shuffle(&mut crate::util::derived_rng(seed, "perm"));
            let other = hits_at_1(&shuffled, &l).unwrap();
            prop_assert_eq!(&base, &other);
            prop_assert!(base.is_self_consistent());
            prop_assert!((0.0..=1.0).contains(&base.hits_at_1));
        }
    }
}
