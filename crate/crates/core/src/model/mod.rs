//! Encoder-decoder transformer trained with teacher forcing.
//!
//! Pre-LN blocks, learned absolute positions, one token embedding shared by
//! the encoder and decoder inputs, and (by default) the same matrix reused
//! as the output projection. All parameters live in one flat vector whose
//! order is given by [`Layout`]; checkpoints store that vector verbatim.

pub mod checkpoint;
pub mod infer;
pub mod optim;
pub mod scalar;
pub mod tape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingPair;
use crate::error::{Error, Result};
use crate::tokenizer::{BOS, PAD};
use crate::util::derived_rng;

pub use optim::{lr_at, Trainer};
pub use scalar::Scalar;
use tape::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeTag {
    Tiny,
    Small,
    Medium,
}

impl SizeTag {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(SizeTag::Tiny),
            "small" => Ok(SizeTag::Small),
            "medium" => Ok(SizeTag::Medium),
            other => Err(Error::Config(format!("unknown model size {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeTag::Tiny => "tiny",
            SizeTag::Small => "small",
            SizeTag::Medium => "medium",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub param_init_scale: f64,
    pub size_tag: SizeTag,
    pub tie_output: bool,
}

impl ModelConfig {
    pub fn preset(tag: SizeTag, vocab_size: usize, max_source_len: usize, max_target_len: usize) -> Self {
        let (d_model, n_heads, layers) = match tag {
            SizeTag::Tiny => (64, 4, 2),
            SizeTag::Small => (128, 4, 4),
            SizeTag::Medium => (256, 8, 6),
        };
        ModelConfig {
            d_model,
            n_heads,
            n_enc_layers: layers,
            n_dec_layers: layers,
            d_ff: 4 * d_model,
            vocab_size,
            max_source_len,
            max_target_len,
            dropout: 0.0,
            param_init_scale: 0.02,
            size_tag: tag,
            tie_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("d_model, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.max_source_len == 0 || self.max_target_len == 0 {
            return bad("sequence maxima must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.param_init_scale > 0.0 && self.param_init_scale.is_finite()) {
            return bad(format!("param_init_scale {} must be positive", self.param_init_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct P {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ln {
    pub g: P,
    pub b: P,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Attn {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Ff {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayer {
    pub ln1: Ln,
    pub attn: Attn,
    pub ln2: Ln,
    pub ff: Ff,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayer {
    pub ln1: Ln,
    pub self_attn: Attn,
    pub ln2: Ln,
    pub cross: Attn,
    pub ln3: Ln,
    pub ff: Ff,
}

/// Named parameter tensors and their offsets in the flat vector.
#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<ParamSpec>,
    total: usize,
    pub(crate) tok_emb: P,
    pub(crate) enc_pos: P,
    pub(crate) dec_pos: P,
    pub(crate) enc: Vec<EncLayer>,
    pub(crate) enc_ln: Ln,
    pub(crate) dec: Vec<DecLayer>,
    pub(crate) dec_ln: Ln,
    pub(crate) out_proj: Option<P>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> P {
        let p = P { off: self.total, rows, cols };
        self.specs.push(ParamSpec { name, offset: self.total, rows, cols, init });
        self.total += rows * cols;
        p
    }

    fn ln(&mut self, prefix: &str, d: usize) -> Ln {
        Ln {
            g: self.add(format!("{prefix}.g"), 1, d, Init::Ones),
            b: self.add(format!("{prefix}.b"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, s: f64, out_s: f64) -> Attn {
        Attn {
            wq: self.add(format!("{prefix}.wq"), d, d, Init::Normal(s)),
            bq: self.add(format!("{prefix}.bq"), 1, d, Init::Zeros),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::Normal(s)),
            bk: self.add(format!("{prefix}.bk"), 1, d, Init::Zeros),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::Normal(s)),
            bv: self.add(format!("{prefix}.bv"), 1, d, Init::Zeros),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::Normal(out_s)),
            bo: self.add(format!("{prefix}.bo"), 1, d, Init::Zeros),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, dff: usize, s: f64, out_s: f64) -> Ff {
        Ff {
            w1: self.add(format!("{prefix}.w1"), d, dff, Init::Normal(s)),
            b1: self.add(format!("{prefix}.b1"), 1, dff, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), dff, d, Init::Normal(out_s)),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let s = cfg.param_init_scale;
        let mut b = Builder { specs: Vec::new(), total: 0 };
        let tok_emb = b.add("tok_emb".into(), cfg.vocab_size, d, Init::Normal(s));
        let enc_pos = b.add("enc_pos".into(), cfg.max_source_len, d, Init::Normal(s));
        let dec_pos = b.add("dec_pos".into(), cfg.max_target_len, d, Init::Normal(s));
        let enc_out_s = s / (2.0 * cfg.n_enc_layers.max(1) as f64).sqrt();
        let enc = (0..cfg.n_enc_layers)
            .map(|i| EncLayer {
                ln1: b.ln(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d, s, enc_out_s),
                ln2: b.ln(&format!("enc.{i}.ln2"), d),
                ff: b.ff(&format!("enc.{i}.ff"), d, cfg.d_ff, s, enc_out_s),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec_out_s = s / (3.0 * cfg.n_dec_layers.max(1) as f64).sqrt();
        let dec = (0..cfg.n_dec_layers)
            .map(|i| DecLayer {
                ln1: b.ln(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), d, s, dec_out_s),
                ln2: b.ln(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross"), d, s, dec_out_s),
                ln3: b.ln(&format!("dec.{i}.ln3"), d),
                ff: b.ff(&format!("dec.{i}.ff"), d, cfg.d_ff, s, dec_out_s),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let out_proj = (!cfg.tie_output).then(|| b.add("out_proj".into(), d, cfg.vocab_size, Init::Normal(s)));
        Layout {
            specs: b.specs,
            total: b.total,
            tok_emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_proj,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }
}

#[derive(Debug, Clone)]
pub struct Seq2SeqModel<F: Scalar = f32> {
    config: ModelConfig,
    layout: Layout,
    pub params: Vec<F>,
    pub step: u64,
    pub tokenizer_hash: String,
}

/// Seeded initialization: scaled normals for weights, zeros for biases,
/// ones for layer-norm gains.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Seq2SeqModel<f32>> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0f32; layout.total];
    for spec in &layout.specs {
        let dst = &mut params[spec.offset..spec.offset + spec.rows * spec.cols];
        match spec.init {
            Init::Zeros => {}
            Init::Ones => dst.fill(1.0),
            Init::Normal(std) => {
                let dist = Normal::new(0.0f64, std).expect("positive std");
                for x in dst.iter_mut() {
                    *x = dist.sample(&mut rng) as f32;
                }
            }
        }
    }
    Ok(Seq2SeqModel {
        config: cfg.clone(),
        layout,
        params,
        step: 0,
        tokenizer_hash: String::new(),
    })
}

/// Per-example forward options.
pub(crate) struct Mode<'r> {
    pub dropout: Option<(&'r mut ChaCha8Rng, f64)>,
}

impl<F: Scalar> Seq2SeqModel<F> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn with_tokenizer_hash(mut self, hash: &str) -> Self {
        self.tokenizer_hash = hash.to_string();
        self
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<F>, step: u64, tokenizer_hash: String) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                layout.total
            )));
        }
        Ok(Seq2SeqModel { config, layout, params, step, tokenizer_hash })
    }

    /// Same model in another precision (e.g. `f64` for gradient probes).
    pub fn cast<G: Scalar>(&self) -> Seq2SeqModel<G> {
        Seq2SeqModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&x| G::of(x.f64())).collect(),
            step: self.step,
            tokenizer_hash: self.tokenizer_hash.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    fn check_lengths(&self, src: usize, tgt: usize) -> Result<()> {
        if src == 0 {
            return Err(Error::Invalid("empty source sequence".into()));
        }
        if src > self.config.max_source_len {
            return Err(Error::LengthOverflow { what: "source", len: src, max: self.config.max_source_len });
        }
        if tgt > self.config.max_target_len {
            return Err(Error::LengthOverflow { what: "target", len: tgt, max: self.config.max_target_len });
        }
        if tgt == 0 {
            return Err(Error::Invalid("empty target sequence".into()));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    fn p(g: &mut Graph<'_, F>, p: P) -> NodeId {
        g.param(p.off, p.rows, p.cols)
    }

    fn ln(g: &mut Graph<'_, F>, x: NodeId, ln: &Ln) -> NodeId {
        let gamma = Self::p(g, ln.g);
        let beta = Self::p(g, ln.b);
        g.layer_norm(x, gamma, beta)
    }

    fn attn(&self, g: &mut Graph<'_, F>, x: NodeId, mem: NodeId, a: &Attn, causal: bool) -> NodeId {
        let (wq, bq) = (Self::p(g, a.wq), Self::p(g, a.bq));
        let (wk, bk) = (Self::p(g, a.wk), Self::p(g, a.bk));
        let (wv, bv) = (Self::p(g, a.wv), Self::p(g, a.bv));
        let (wo, bo) = (Self::p(g, a.wo), Self::p(g, a.bo));
        let q = g.linear(x, wq, Some(bq));
        let k = g.linear(mem, wk, Some(bk));
        let v = g.linear(mem, wv, Some(bv));
        let o = g.attention(q, k, v, self.config.n_heads, causal);
        g.linear(o, wo, Some(bo))
    }

    fn ff(g: &mut Graph<'_, F>, x: NodeId, f: &Ff) -> NodeId {
        let (w1, b1) = (Self::p(g, f.w1), Self::p(g, f.b1));
        let (w2, b2) = (Self::p(g, f.w2), Self::p(g, f.b2));
        let h = g.linear(x, w1, Some(b1));
        let h = g.relu(h);
        g.linear(h, w2, Some(b2))
    }

    fn drop(g: &mut Graph<'_, F>, x: NodeId, mode: &mut Mode<'_>) -> NodeId {
        match mode.dropout.as_mut() {
            Some((rng, p)) => g.dropout(x, *p, *rng),
            None => x,
        }
    }

    /// Encoder stack; returns the final-normed memory `[src_len, d]`.
    pub(crate) fn encode_graph(&self, g: &mut Graph<'_, F>, src: &[u32], mode: &mut Mode<'_>) -> NodeId {
        let l = &self.layout;
        let emb = Self::p(g, l.tok_emb);
        let pos = Self::p(g, l.enc_pos);
        let x = g.embed(emb, src);
        let x = g.add_rows(x, pos);
        let mut x = Self::drop(g, x, mode);
        for layer in &l.enc {
            let h = Self::ln(g, x, &layer.ln1);
            let a = self.attn(g, h, h, &layer.attn, false);
            let a = Self::drop(g, a, mode);
            x = g.add(x, a);
            let h = Self::ln(g, x, &layer.ln2);
            let f = Self::ff(g, h, &layer.ff);
            let f = Self::drop(g, f, mode);
            x = g.add(x, f);
        }
        Self::ln(g, x, &l.enc_ln)
    }

    /// Decoder stack and output projection; returns logits `[len, vocab]`.
    pub(crate) fn decode_graph(&self, g: &mut Graph<'_, F>, mem: NodeId, dec_in: &[u32], mode: &mut Mode<'_>) -> NodeId {
        let l = &self.layout;
        let emb = Self::p(g, l.tok_emb);
        let pos = Self::p(g, l.dec_pos);
        let y = g.embed(emb, dec_in);
        let y = g.add_rows(y, pos);
        let mut y = Self::drop(g, y, mode);
        for layer in &l.dec {
            let h = Self::ln(g, y, &layer.ln1);
            let a = self.attn(g, h, h, &layer.self_attn, true);
            let a = Self::drop(g, a, mode);
            y = g.add(y, a);
            let h = Self::ln(g, y, &layer.ln2);
            let c = self.attn(g, h, mem, &layer.cross, false);
            let c = Self::drop(g, c, mode);
            y = g.add(y, c);
            let h = Self::ln(g, y, &layer.ln3);
            let f = Self::ff(g, h, &layer.ff);
            let f = Self::drop(g, f, mode);
            y = g.add(y, f);
        }
        let y = Self::ln(g, y, &l.dec_ln);
        match l.out_proj {
            Some(w) => {
                let w = Self::p(g, w);
                g.linear(y, w, None)
            }
            None => g.linear_t(y, emb),
        }
    }

    /// Teacher-forced logits: row `t` is the distribution over `target[t]`
    /// given the source and `target[..t]`. Eval mode (no dropout).
    pub fn forward(&self, source: &[u32], target: &[u32]) -> Result<Vec<F>> {
        self.check_lengths(source.len(), target.len())?;
        self.check_ids(source)?;
        self.check_ids(target)?;
        let mut g = Graph::new(&self.params);
        let mut mode = Mode { dropout: None };
        let mem = self.encode_graph(&mut g, source, &mut mode);
        let logits = self.decode_graph(&mut g, mem, &shift_right(target), &mut mode);
        Ok(g.value(logits).to_vec())
    }

    /// ReLU activation pattern of a teacher-forced pass. Central finite
    /// differences are only meaningful between points sharing a pattern.
    pub fn relu_pattern(&self, source: &[u32], target: &[u32]) -> Result<Vec<bool>> {
        self.check_lengths(source.len(), target.len())?;
        self.check_ids(source)?;
        self.check_ids(target)?;
        let mut g = Graph::new(&self.params);
        let mut mode = Mode { dropout: None };
        let mem = self.encode_graph(&mut g, source, &mut mode);
        self.decode_graph(&mut g, mem, &shift_right(target), &mut mode);
        Ok(g.relu_pattern())
    }

    /// Summed target cross-entropy (non-PAD positions) and its token count
    /// for one pair, in eval mode.
    pub fn pair_loss(&self, pair: &TrainingPair) -> Result<(f64, usize)> {
        let logits = self.forward(&pair.source.ids, &pair.target.ids)?;
        Ok(cross_entropy(&logits, self.config.vocab_size, &pair.target.ids))
    }

    /// Sum of per-token losses of one example and its gradient, scaled by
    /// `scale`, accumulated into `grads`.
    pub(crate) fn accumulate_grad(
        &self,
        pair: &TrainingPair,
        scale: F,
        grads: &mut [F],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, usize)> {
        let (src, tgt) = (&pair.source.ids, &pair.target.ids);
        self.check_lengths(src.len(), tgt.len())?;
        self.check_ids(src)?;
        self.check_ids(tgt)?;
        let mut g = Graph::new(&self.params);
        let mut mode = Mode {
            dropout: match dropout_rng {
                Some(rng) if self.config.dropout > 0.0 => Some((rng, self.config.dropout)),
                _ => None,
            },
        };
        let mem = self.encode_graph(&mut g, src, &mut mode);
        let logits = self.decode_graph(&mut g, mem, &shift_right(tgt), &mut mode);
        let (loss, count, dlogits) = cross_entropy_grad(g.value(logits), self.config.vocab_size, tgt, scale);
        g.backward(logits, dlogits, grads);
        Ok((loss, count))
    }

    /// Gradient of the mean per-token cross-entropy over `batch`.
    pub fn batch_gradient(&self, batch: &[&TrainingPair], dropout_key: Option<(u64, u64)>) -> Result<(Vec<F>, f64, usize)> {
        let tokens: usize = batch.iter().map(|p| p.target.ids.iter().filter(|&&t| t != PAD).count()).sum();
        if tokens == 0 {
            return Err(Error::Invalid("batch has no target tokens".into()));
        }
        let scale = F::one() / F::of(tokens as f64);
        let mut grads = vec![F::zero(); self.params.len()];
        let mut loss = 0.0;
        for (i, pair) in batch.iter().enumerate() {
            let mut rng = dropout_key.map(|(seed, step)| derived_rng(seed, &format!("dropout/{step}/{i}")));
            let (l, _) = self.accumulate_grad(pair, scale, &mut grads, rng.as_mut())?;
            loss += l;
        }
        Ok((grads, loss / tokens as f64, tokens))
    }
}

/// Decoder input for teacher forcing: `[BOS, y_1, …, y_{n-1}]`.
pub fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(target.len());
    if !target.is_empty() {
        v.push(BOS);
        v.extend_from_slice(&target[..target.len() - 1]);
    }
    v
}

/// `log softmax(row)[idx]`, computed stably in `f64`.
pub fn log_prob<F: Scalar>(row: &[F], idx: usize) -> f64 {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        // Infinite margin: the target either is the (unique) maximum or
        // carries no mass.
        return if row[idx].f64() == f64::INFINITY { 0.0 } else { f64::NEG_INFINITY };
    }
    let lse = row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln() + max;
    row[idx].f64() - lse
}

/// `-Σ log softmax(logits_t)[target_t]` over non-PAD targets, plus the
/// number of positions counted. `logits` is `[target.len(), vocab]`.
pub fn cross_entropy<F: Scalar>(logits: &[F], vocab: usize, target: &[u32]) -> (f64, usize) {
    assert_eq!(logits.len(), target.len() * vocab, "logits shape");
    let mut loss = 0.0;
    let mut count = 0;
    for (row, &t) in logits.chunks_exact(vocab).zip(target) {
        if t == PAD {
            continue;
        }
        loss -= log_prob(row, t as usize);
        count += 1;
    }
    (loss, count)
}

fn cross_entropy_grad<F: Scalar>(logits: &[F], vocab: usize, target: &[u32], scale: F) -> (f64, usize, Vec<F>) {
    let mut grad = vec![F::zero(); logits.len()];
    let mut loss = 0.0;
    let mut count = 0;
    for ((row, g), &t) in logits.chunks_exact(vocab).zip(grad.chunks_exact_mut(vocab)).zip(target) {
        if t == PAD {
            continue;
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - max).exp();
            sum += *gi;
        }
        let inv = F::one() / sum;
        for gi in g.iter_mut() {
            *gi = *gi * inv * scale;
        }
        g[t as usize] -= scale;
        loss -= (row[t as usize] - max).f64() - sum.f64().ln();
        count += 1;
    }
    (loss, count, grad)
}

/// `exp(total cross-entropy / total non-PAD target tokens)`.
pub fn perplexity<F: Scalar>(model: &Seq2SeqModel<F>, data: &[TrainingPair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("perplexity needs at least one pair".into()));
    }
    let mut loss = 0.0;
    let mut count = 0usize;
    for p in data {
        let (l, c) = model.pair_loss(p)?;
        loss += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::Invalid("no target tokens".into()));
    }
    Ok((loss / count as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn stage1_default() -> Self {
        TrainConfig {
            lr_peak: 3e-4,
            warmup_steps: 200,
            max_steps: 2000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 100,
        }
    }

    pub fn stage2_default() -> Self {
        TrainConfig { warmup_steps: 50, ..Self::stage1_default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.max_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_peak > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub ppl: Option<f64>,
}

#[cfg(test)]
mod tests;
