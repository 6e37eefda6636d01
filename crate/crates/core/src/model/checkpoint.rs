//! Binary checkpoint.
//!
//! ```text
//! magic        8 bytes  "TOMECKPT"
//! version      u32 LE   1
//! config_len   u32 LE   then ModelConfig as JSON
//! hash_len     u32 LE   then tokenizer hash (ASCII hex)
//! step         u64 LE
//! n_params     u64 LE   then n_params × f32 LE in Layout order
//! has_optim    u8       1 => Adam m then v, each n_params × f32 LE
//! ```

use std::path::Path;

use super::{ModelConfig, Seq2SeqModel, Trainer};
use crate::error::{Error, Result};
use crate::util::{read_bytes, sha256_hex, write_atomic};

pub const MAGIC: &[u8; 8] = b"TOMECKPT";
pub const VERSION: u32 = 1;

/// Adam moments carried alongside the weights for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptimState {
    pub fn of(trainer: &Trainer) -> Self {
        OptimState { m: trainer.m.clone(), v: trainer.v.clone() }
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(model: &Seq2SeqModel<f32>, optim: Option<&OptimState>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let hash = model.tokenizer_hash.as_bytes();
    let mut out = Vec::with_capacity(64 + config.len() + model.params.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
    out.extend_from_slice(hash);
    out.extend_from_slice(&model.step.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    put_f32s(&mut out, &model.params);
    match optim {
        Some(o) => {
            if o.m.len() != model.params.len() || o.v.len() != model.params.len() {
                return Err(Error::Checkpoint("optimizer state size mismatch".into()));
            }
            out.push(1);
            put_f32s(&mut out, &o.m);
            put_f32s(&mut out, &o.v);
        }
        None => out.push(0),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

/// Parse a checkpoint, refusing it unless it was trained against the
/// tokenizer with hash `expected_tokenizer_hash`.
pub fn from_bytes(bytes: &[u8], expected_tokenizer_hash: &str) -> Result<(Seq2SeqModel<f32>, Option<OptimState>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let n = r.u32()? as usize;
    let hash = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("hash is not UTF-8".into()))?;
    if hash != expected_tokenizer_hash {
        return Err(Error::TokenizerMismatch { expected: expected_tokenizer_hash.to_string(), found: hash });
    }
    let step = r.u64()?;
    let n_params = r.u64()? as usize;
    let params = r.f32s(n_params)?;
    let optim = match r.take(1)?[0] {
        0 => None,
        1 => Some(OptimState { m: r.f32s(n_params)?, v: r.f32s(n_params)? }),
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = Seq2SeqModel::from_parts(config, params, step, hash)?;
    if !model.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    Ok((model, optim))
}

pub fn save_checkpoint(model: &Seq2SeqModel<f32>, optim: Option<&OptimState>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model, optim)?)
}

pub fn load_checkpoint(path: &Path, expected_tokenizer_hash: &str) -> Result<(Seq2SeqModel<f32>, Option<OptimState>)> {
    from_bytes(&read_bytes(path)?, expected_tokenizer_hash)
}

/// SHA-256 of the checkpoint file contents.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_bytes(path)?))
}
