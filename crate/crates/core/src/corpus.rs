//! Passage corpus: ingestion, URL assignment, and exact-membership lookup.
//!
//! Every text field is normalized the same way before it is stored or
//! compared: Unicode NFC, internal whitespace runs collapsed to one space,
//! edges trimmed, case preserved. Evaluation reuses [`normalize`] so that
//! "exact match" means the same thing everywhere.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::util::{derived_rng, read_to_string, to_jsonl, write_atomic};

/// Canonical text normalization used for membership and exact-match checks.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub id: String,
    pub title: String,
    pub passage: String,
    pub urls: Vec<String>,
    pub assigned_url: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum UrlField {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    title: String,
    passage: String,
    urls: UrlField,
    #[serde(default)]
    assigned_url: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<PassageRecord>,
    by_id: HashMap<String, usize>,
    membership_index: BTreeMap<String, BTreeSet<String>>,
    url_index: BTreeMap<String, BTreeSet<String>>,
}

impl Corpus {
    /// Build a corpus from already-normalized records, validating invariants.
    pub fn from_records(records: Vec<PassageRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        let mut membership_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut url_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.id.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty id".into(),
                });
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate id {:?}", r.id),
                });
            }
            if !r.urls.contains(&r.assigned_url) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("assigned_url {:?} not among urls", r.assigned_url),
                });
            }
            membership_index
                .entry(normalize(&r.passage))
                .or_default()
                .insert(r.id.clone());
            url_index
                .entry(r.assigned_url.clone())
                .or_default()
                .insert(r.id.clone());
        }
        Ok(Corpus {
            records,
            by_id,
            membership_index,
            url_index,
        })
    }

    pub fn records(&self) -> &[PassageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PassageRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn membership_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.membership_index
    }

    pub fn ids_for_url(&self, url: &str) -> BTreeSet<String> {
        self.url_index.get(url).cloned().unwrap_or_default()
    }

    /// Ids whose normalized passage equals the normalized `text`.
    pub fn passage_in_corpus(&self, text: &str) -> BTreeSet<String> {
        self.membership_index
            .get(&normalize(text))
            .cloned()
            .unwrap_or_default()
    }

    /// Seeded nested subsample: the first `n` records of a fixed seeded
    /// permutation, returned in original corpus order. For a fixed seed a
    /// smaller `n` always yields a subset of a larger one.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Corpus> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "cannot subsample {n} records from a corpus of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derived_rng(seed, "corpus-subsample"));
        let mut keep = order[..n].to_vec();
        keep.sort_unstable();
        Corpus::from_records(keep.into_iter().map(|i| self.records[i].clone()).collect())
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        to_jsonl(&self.records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_jsonl()?)
    }

    /// Content hash of the canonical serialization.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::util::sha256_hex(&self.to_jsonl()?))
    }
}

/// Parse corpus JSONL text. A line that already carries `assigned_url`
/// (a canonical corpus written by `ingest`) keeps it; otherwise one URL is
/// chosen uniformly from the record's own seeded stream.
pub fn parse_corpus(text: &str, seed: u64) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("malformed JSON: {e}"),
        })?;
        let id = normalize(&raw.id);
        if id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if let Some(first) = seen.insert(id.clone(), line_no) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate id {id:?} (first seen on line {first})"),
            });
        }
        let title = normalize(&raw.title);
        let passage = normalize(&raw.passage);
        if title.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("empty title for {id:?}"),
            });
        }
        if passage.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("empty passage for {id:?}"),
            });
        }
        let urls: Vec<String> = match raw.urls {
            UrlField::One(u) => vec![u],
            UrlField::Many(us) => us,
        }
        .iter()
        .map(|u| normalize(u))
        .collect();
        if urls.is_empty() || urls.iter().any(|u| u.is_empty()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("empty url for {id:?}"),
            });
        }
        let assigned_url = match raw.assigned_url.map(|u| normalize(&u)) {
            Some(u) if urls.contains(&u) => u,
            Some(u) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("assigned_url {u:?} not among urls"),
                })
            }
            None => {
                let pick = derived_rng(seed, &format!("assign-url/{id}")).gen_range(0..urls.len());
                urls[pick].clone()
            }
        };
        records.push(PassageRecord {
            id,
            title,
            passage,
            urls,
            assigned_url,
        });
    }
    Corpus::from_records(records)
}

pub fn ingest_corpus(path: &Path, seed: u64) -> Result<Corpus> {
    parse_corpus(&read_to_string(path)?, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub positive_passage_ids: Vec<String>,
}

/// Parse a queries TSV: `query_id<TAB>text<TAB>id1,id2,...`. When a corpus
/// is given every positive id must resolve in it.
pub fn parse_queries(text: &str, corpus: Option<&Corpus>) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let query_id = cols[0].trim().to_string();
        if query_id.is_empty() || !seen.insert(query_id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("empty or duplicate query id {query_id:?}"),
            });
        }
        let ids: Vec<String> = cols[2]
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if ids.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "no positive passage ids".into(),
            });
        }
        if let Some(c) = corpus {
            if let Some(bad) = ids.iter().find(|id| c.get(id).is_none()) {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown passage id {bad:?}"),
                });
            }
        }
        out.push(QueryRecord {
            query_id,
            text: normalize(cols[1]),
            positive_passage_ids: ids,
        });
    }
    Ok(out)
}

pub fn load_queries(path: &Path, corpus: Option<&Corpus>) -> Result<Vec<QueryRecord>> {
    parse_queries(&read_to_string(path)?, corpus)
}

pub fn queries_to_tsv(queries: &[QueryRecord]) -> String {
    let mut s = String::new();
    for q in queries {
        s.push_str(&q.query_id);
        s.push('\t');
        s.push_str(&q.text);
        s.push('\t');
        s.push_str(&q.positive_passage_ids.join(","));
        s.push('\n');
    }
    s
}

/// Disjoint seeded split; both halves keep the input order.
pub fn split_queries(
    queries: &[QueryRecord],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>)> {
    if queries.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 queries to split, got {}",
            queries.len()
        )));
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::Config(format!(
            "dev_fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    let n = queries.len();
    let n_dev = (dev_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, "split-queries"));
    let dev_set: BTreeSet<usize> = order[..n_dev].iter().copied().collect();
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, q) in queries.iter().enumerate() {
        if dev_set.contains(&i) {
            dev.push(q.clone());
        } else {
            train.push(q.clone());
        }
    }
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, urls: &str) -> String {
        format!(r#"{{"id":"{id}","title":"T {id}","passage":"P {id}","urls":{urls}}}"#)
    }

    #[test]
    fn single_url_is_forced() {
        let c = parse_corpus(r#"{"id":"d1","title":"T","passage":"P","urls":["u1"]}"#, 0).unwrap();
        assert_eq!(c.records()[0].assigned_url, "u1");
        let c = parse_corpus(r#"{"id":"d1","title":"T","passage":"P","urls":"u1"}"#, 0).unwrap();
        assert_eq!(c.records()[0].assigned_url, "u1");
    }

    #[test]
    fn multi_url_choice_is_seeded() {
        let text = line("d1", r#"["u1","u2","u3","u4"]"#);
        let a = parse_corpus(&text, 11).unwrap();
        let b = parse_corpus(&text, 11).unwrap();
        assert_eq!(a.records()[0].assigned_url, b.records()[0].assigned_url);
        assert!(a.records()[0].urls.contains(&a.records()[0].assigned_url));
        // Across many seeds more than one URL gets picked.
        let picks: BTreeSet<String> = (0..32)
            .map(|s| parse_corpus(&text, s).unwrap().records()[0].assigned_url.clone())
            .collect();
        assert!(picks.len() > 1);
    }

    #[test]
    fn duplicate_id_names_line() {
        let text = [line("a", r#"["u"]"#), line("b", r#"["u"]"#), line("a", r#"["u"]"#)].join("\n");
        match parse_corpus(&text, 0) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_fields_and_bad_json() {
        assert!(parse_corpus(r#"{"id":"d","title":"T","passage":"  ","urls":["u"]}"#, 0).is_err());
        assert!(parse_corpus(r#"{"id":"d","title":"T","passage":"P","urls":[]}"#, 0).is_err());
        assert!(parse_corpus(r#"{"id":"d","title":"T","passage":"P","urls":[""]}"#, 0).is_err());
        assert!(matches!(
            parse_corpus("{not json", 0),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn canonical_roundtrip_keeps_assignment() {
        let text = line("d1", r#"["u1","u2","u3"]"#);
        let c = parse_corpus(&text, 5).unwrap();
        let canon = String::from_utf8(c.to_jsonl().unwrap()).unwrap();
        for seed in 0..8 {
            let again = parse_corpus(&canon, seed).unwrap();
            assert_eq!(again.records(), c.records());
        }
    }

    #[test]
    fn membership_lookup() {
        let c = parse_corpus(
            "{\"id\":\"d1\",\"title\":\"T\",\"passage\":\"the  quick fox\",\"urls\":[\"u1\"]}\n\
             {\"id\":\"d2\",\"title\":\"T2\",\"passage\":\"the quick fox\",\"urls\":[\"u2\"]}",
            0,
        )
        .unwrap();
        let both: BTreeSet<String> = ["d1", "d2"].iter().map(|s| s.to_string()).collect();
        assert_eq!(c.passage_in_corpus("the quick fox"), both);
        assert_eq!(c.passage_in_corpus("the quick fox  \n"), both);
        assert!(c.passage_in_corpus("zzz").is_empty());
        assert_eq!(c.membership_index().len(), 1);
        assert_eq!(c.ids_for_url("u2").len(), 1);
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("  a \t b\n\nc  "), "a b c");
        // Combining acute accent composes under NFC.
        assert_eq!(normalize("e\u{0301}"), "\u{e9}");
        assert_eq!(normalize("ABC"), "ABC");
    }

    fn queries(n: usize) -> Vec<QueryRecord> {
        (0..n)
            .map(|i| QueryRecord {
                query_id: format!("q{i}"),
                text: format!("query {i}"),
                positive_passage_ids: vec![format!("d{i}")],
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let qs = queries(10);
        let (train, dev) = split_queries(&qs, 0.2, 3).unwrap();
        assert_eq!((train.len(), dev.len()), (8, 2));
        let (train2, dev2) = split_queries(&qs, 0.2, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
        let ids: BTreeSet<_> = train.iter().chain(&dev).map(|q| q.query_id.clone()).collect();
        assert_eq!(ids.len(), 10);
        assert!(split_queries(&queries(1), 0.5, 0).is_err());
        assert!(split_queries(&qs, 1.0, 0).is_err());
    }

    #[test]
    fn queries_tsv_roundtrip_and_validation() {
        let c = parse_corpus(&line("d1", r#"["u"]"#), 0).unwrap();
        let qs = parse_queries("q1\tthe query\td1\n", Some(&c)).unwrap();
        assert_eq!(qs[0].positive_passage_ids, vec!["d1"]);
        assert_eq!(parse_queries(&queries_to_tsv(&qs), Some(&c)).unwrap(), qs);
        assert!(parse_queries("q1\tthe query\tdX\n", Some(&c)).is_err());
        assert!(parse_queries("q1\tno ids\n", None).is_err());
    }

    #[test]
    fn subsample_is_nested() {
        let text: Vec<String> = (0..40).map(|i| line(&format!("d{i}"), r#"["u"]"#)).collect();
        let c = parse_corpus(&text.join("\n"), 0).unwrap();
        let small = c.subsample(10, 4).unwrap();
        let big = c.subsample(25, 4).unwrap();
        for r in small.records() {
            assert!(big.get(&r.id).is_some());
        }
        assert!(c.subsample(41, 4).is_err());
    }
}
