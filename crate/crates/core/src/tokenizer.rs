//! Byte-level BPE tokenizer.
//!
//! Ids 0..4 are the specials (PAD, BOS, EOS, UNK), ids 4..260 are the 256
//! raw bytes, and every further id is a learned merge of two earlier ids.
//! URLs go through exactly the same pre-tokenizer and merge table as
//! passage text; identifiers need no alphabet of their own.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::util::{read_bytes, sha256_hex, write_atomic};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
pub const MIN_VOCAB: usize = 260;
pub const FORMAT_VERSION: u32 = 1;

const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// The literal prompts placed in front of titles and passages.
pub const TITLE_PROMPT: &str = "title: ";
pub const PASSAGE_PROMPT: &str = "passage: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

/// Encoded ids. Every encoded sequence ends with EOS (sources too, as in
/// T5-style encoders, which also keeps the encoder input nonempty).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub role: Role,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids before the first EOS, with specials removed.
    pub fn content(&self) -> &[u32] {
        let end = self.ids.iter().position(|&t| t == EOS).unwrap_or(self.ids.len());
        &self.ids[..end]
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Specials {
    pad: u32,
    bos: u32,
    eos: u32,
    unk: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    byte_fallback: bool,
    specials: Specials,
    vocab: Vec<String>,
    merges: Vec<[u32; 2]>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Alpha,
    Digit,
    Space,
    Punct,
}

fn class(b: u8) -> ByteClass {
    if b.is_ascii_alphabetic() || b >= 0x80 {
        ByteClass::Alpha
    } else if b.is_ascii_digit() {
        ByteClass::Digit
    } else if b.is_ascii_whitespace() {
        ByteClass::Space
    } else {
        ByteClass::Punct
    }
}

/// Split bytes into merge-independent chunks: runs of one byte class, where
/// a single space immediately before a non-space run joins that run. The
/// chunks concatenate back to the input.
pub fn pretokenize(bytes: &[u8]) -> Vec<&[u8]> {
    let n = bytes.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let start = i;
        if bytes[i] == b' ' && i + 1 < n && class(bytes[i + 1]) != ByteClass::Space {
            i += 1;
        }
        let c = class(bytes[i]);
        if c == ByteClass::Space {
            while i < n && class(bytes[i]) == ByteClass::Space {
                let lends_space = bytes[i] == b' '
                    && i > start
                    && i + 1 < n
                    && class(bytes[i + 1]) != ByteClass::Space;
                if lends_space {
                    break;
                }
                i += 1;
            }
        } else {
            while i < n && class(bytes[i]) == c {
                i += 1;
            }
        }
        out.push(&bytes[start..i]);
    }
    out
}

/// GPT-2 style reversible byte -> printable char table, used only for the
/// human-readable vocab strings in the JSON file.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || b >= 0xAE;
        table[b as usize] = if printable {
            char::from(b)
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

impl Tokenizer {
    /// Learn a byte-level BPE vocabulary of exactly `vocab_size` entries
    /// from the corpus titles, passages, URLs and the prompt literals.
    /// Training is a pure function of the corpus; `_seed` is accepted for
    /// interface symmetry with the other seeded stages.
    pub fn train(corpus: &Corpus, vocab_size: usize, _seed: u64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot train a tokenizer on an empty corpus".into()));
        }
        let mut texts: Vec<&str> = Vec::new();
        for r in corpus.records() {
            texts.push(&r.title);
            texts.push(&r.passage);
            for u in &r.urls {
                texts.push(u);
            }
            texts.push(TITLE_PROMPT);
            texts.push(PASSAGE_PROMPT);
        }
        Self::train_on_texts(&texts, vocab_size)
    }

    pub fn train_on_texts(texts: &[&str], vocab_size: usize) -> Result<Self> {
        if vocab_size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} below the floor of {MIN_VOCAB}"
            )));
        }
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));

        let mut word_counts: HashMap<&[u8], i64> = HashMap::new();
        for t in texts {
            for chunk in pretokenize(t.as_bytes()) {
                *word_counts.entry(chunk).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, i64)> = {
            let mut sorted: Vec<(&[u8], i64)> = word_counts.into_iter().collect();
            sorted.sort_unstable();
            sorted
                .into_iter()
                .map(|(w, c)| (w.iter().map(|&b| b as u32 + BYTE_OFFSET).collect(), c))
                .collect()
        };

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
            }
        }

        let specials: HashSet<&[u8]> = SPECIAL_NAMES.iter().map(|s| s.as_bytes()).collect();
        let mut merges: Vec<(u32, u32)> = Vec::new();
        let mut known: HashSet<Vec<u8>> = tokens.iter().skip(NUM_SPECIALS as usize).cloned().collect();
        let mut banned: HashSet<(u32, u32)> = HashSet::new();

        while tokens.len() < vocab_size {
            let best = pair_counts
                .iter()
                .filter(|(p, &c)| c > 0 && !banned.contains(p))
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        // Lexicographically smaller pair wins, so it must
                        // compare as "greater" here.
                        let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                        let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(p, _)| *p);

            let pair = match best {
                Some(p) => {
                    let mut merged = tokens[p.0 as usize].clone();
                    merged.extend_from_slice(&tokens[p.1 as usize]);
                    if specials.contains(merged.as_slice()) {
                        banned.insert(p);
                        continue;
                    }
                    p
                }
                None => match zero_frequency_pair(&known, &specials) {
                    Some(p) => p,
                    None => {
                        return Err(Error::Config(format!(
                            "cannot reach vocab_size {vocab_size}"
                        )))
                    }
                },
            };

            let new_id = tokens.len() as u32;
            let mut merged = tokens[pair.0 as usize].clone();
            merged.extend_from_slice(&tokens[pair.1 as usize]);
            known.insert(merged.clone());
            tokens.push(merged);
            merges.push(pair);

            for (w, c) in words.iter_mut() {
                if !w.windows(2).any(|p| (p[0], p[1]) == pair) {
                    continue;
                }
                for p in w.windows(2) {
                    *pair_counts.get_mut(&(p[0], p[1])).expect("counted") -= *c;
                }
                *w = merge_word(w, pair, new_id);
                for p in w.windows(2) {
                    *pair_counts.entry((p[0], p[1])).or_insert(0) += *c;
                }
            }
            pair_counts.retain(|_, c| *c > 0);
        }
        Self::from_parts(tokens, merges)
    }

    fn from_parts(tokens: Vec<Vec<u8>>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, MIN_VOCAB as u32 + i as u32))
            .collect();
        let mut tok = Tokenizer {
            tokens,
            merges,
            ranks,
            hash: String::new(),
        };
        tok.hash = sha256_hex(&tok.to_json_bytes()?);
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// SHA-256 of the serialized tokenizer; embedded in datasets and
    /// checkpoints to catch mismatched artifacts.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    /// Subword ids for raw bytes, without EOS or truncation.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(bytes.len());
        for chunk in pretokenize(bytes) {
            let mut word: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
            while word.len() > 1 {
                let best = word
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&id| (id, (p[0], p[1]))))
                    .min();
                match best {
                    Some((id, pair)) => word = merge_word(&word, pair, id),
                    None => break,
                }
            }
            out.extend_from_slice(&word);
        }
        out
    }

    pub fn encode_content(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Encode with truncation: content is cut to `max_len - 1` ids and EOS
    /// fills the final slot.
    pub fn encode(&self, text: &str, role: Role, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must be at least 2");
        self.finish(self.encode_content(text), role, max_len)
    }

    /// Append EOS to already-encoded content, truncating to `max_len`.
    pub fn finish(&self, mut ids: Vec<u32>, role: Role, max_len: usize) -> TokenSequence {
        ids.truncate(max_len.saturating_sub(1));
        ids.push(EOS);
        TokenSequence { ids, role }
    }

    /// Bytes of the ids up to the first EOS, specials skipped.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.tokens.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.tokens.len(),
                });
            }
            if id == EOS {
                break;
            }
            if Self::is_special(id) {
                continue;
            }
            out.extend_from_slice(&self.tokens[id as usize]);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let table = byte_to_char_table();
        let vocab = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i < NUM_SPECIALS as usize {
                    SPECIAL_NAMES[i].to_string()
                } else {
                    t.iter().map(|&b| table[b as usize]).collect()
                }
            })
            .collect();
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            byte_fallback: true,
            specials: Specials {
                pad: PAD,
                bos: BOS,
                eos: EOS,
                unk: UNK,
            },
            vocab,
            merges: self.merges.iter().map(|&(a, b)| [a, b]).collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&file)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        self.to_json_bytes()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_json_bytes()?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_slice(bytes)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported tokenizer version {}",
                file.version
            )));
        }
        if (file.specials.pad, file.specials.bos, file.specials.eos, file.specials.unk)
            != (PAD, BOS, EOS, UNK)
        {
            return Err(Error::Invalid("special ids must be 0..4".into()));
        }
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let mut merges = Vec::with_capacity(file.merges.len());
        for [a, b] in file.merges {
            let n = tokens.len() as u32;
            if a >= n || b >= n || a < BYTE_OFFSET || b < BYTE_OFFSET {
                return Err(Error::Invalid(format!("merge [{a}, {b}] references an unknown id")));
            }
            let mut t = tokens[a as usize].clone();
            t.extend_from_slice(&tokens[b as usize]);
            tokens.push(t);
            merges.push((a, b));
        }
        let tok = Self::from_parts(tokens, merges)?;
        let table = byte_to_char_table();
        for (i, v) in file.vocab.iter().enumerate().skip(NUM_SPECIALS as usize) {
            let expect: String = tok
                .tokens
                .get(i)
                .map(|t| t.iter().map(|&b| table[b as usize]).collect())
                .unwrap_or_default();
            if *v != expect {
                return Err(Error::Invalid(format!("vocab entry {i} disagrees with merges")));
            }
        }
        if file.vocab.len() != tok.vocab_size() {
            return Err(Error::Invalid("vocab length disagrees with merges".into()));
        }
        Ok(tok)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_bytes(path)?)
    }
}

fn merge_word(word: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

/// Once every observed pair is merged, keep filling the vocabulary with
/// unseen two-byte tokens in byte order so the size contract still holds.
fn zero_frequency_pair(
    known: &HashSet<Vec<u8>>,
    specials: &HashSet<&[u8]>,
) -> Option<(u32, u32)> {
    for a in 0..=255u8 {
        for b in 0..=255u8 {
            let cand = [a, b];
            if !known.contains(&cand[..]) && !specials.contains(&cand[..]) {
                return Some((a as u32 + BYTE_OFFSET, b as u32 + BYTE_OFFSET));
            }
        }
    }
    None
}
