//! Step-wise decoding with cached keys and values.
//!
//! The encoder runs once through the tape; each decoder step then touches
//! only the new position. Logits match the teacher-forced [`forward`] rows
//! up to floating-point reassociation.
//!
//! [`forward`]: super::Seq2SeqModel::forward

use super::scalar::{gemm, Scalar, View, ViewMut};
use super::tape::{softmax_prefix, Graph, LN_EPS};
use super::{Attn, Ln, Mode, Seq2SeqModel, P};
use crate::error::{Error, Result};

pub struct IncrementalDecoder<'m, F: Scalar> {
    model: &'m Seq2SeqModel<F>,
    mem_len: usize,
    cross_k: Vec<Vec<F>>,
    cross_v: Vec<Vec<F>>,
    self_k: Vec<Vec<F>>,
    self_v: Vec<Vec<F>>,
    pos: usize,
}

fn slice<F: Scalar>(params: &[F], p: P) -> &[F] {
    &params[p.off..p.off + p.rows * p.cols]
}

/// `x · w + b` for `rows` row vectors.
fn affine<F: Scalar>(params: &[F], x: &[F], rows: usize, w: P, b: Option<P>) -> Vec<F> {
    let mut out = match b {
        Some(b) => slice(params, b).repeat(rows),
        None => vec![F::zero(); rows * w.cols],
    };
    gemm(
        F::one(),
        View::new(x, rows, w.rows),
        View::new(slice(params, w), w.rows, w.cols),
        F::one(),
        ViewMut::new(&mut out, rows, w.cols),
    );
    out
}

fn layer_norm<F: Scalar>(params: &[F], x: &[F], ln: &Ln) -> Vec<F> {
    let d = x.len();
    let (g, b) = (slice(params, ln.g), slice(params, ln.b));
    let inv_d = F::one() / F::of(d as f64);
    let mean = x.iter().copied().sum::<F>() * inv_d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
    let r = F::one() / (var + F::of(LN_EPS)).sqrt();
    (0..d).map(|j| (x[j] - mean) * r * g[j] + b[j]).collect()
}

fn add_in<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl<'m, F: Scalar> IncrementalDecoder<'m, F> {
    pub fn new(model: &'m Seq2SeqModel<F>, source: &[u32]) -> Result<Self> {
        let cfg = model.config();
        if source.is_empty() || source.len() > cfg.max_source_len {
            return Err(Error::LengthOverflow { what: "source", len: source.len(), max: cfg.max_source_len });
        }
        if let Some(&id) = source.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        let mut g = Graph::new(&model.params);
        let mem = model.encode_graph(&mut g, source, &mut Mode { dropout: None });
        let mem = g.value(mem);
        let m = source.len();
        let params = &model.params;
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for layer in &model.layout().dec {
            cross_k.push(affine(params, mem, m, layer.cross.wk, Some(layer.cross.bk)));
            cross_v.push(affine(params, mem, m, layer.cross.wv, Some(layer.cross.bv)));
        }
        let n_layers = model.layout().dec.len();
        Ok(IncrementalDecoder {
            model,
            mem_len: m,
            cross_k,
            cross_v,
            self_k: vec![Vec::new(); n_layers],
            self_v: vec![Vec::new(); n_layers],
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn attend(&self, q: &[F], keys: &[F], values: &[F], len: usize, a: &Attn) -> Vec<F> {
        let cfg = self.model.config();
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut concat = vec![F::zero(); d];
        let mut scores = vec![F::zero(); len];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(&x, &y)| x * y).sum::<F>() * scale;
            }
            softmax_prefix(&mut scores, len);
            let out = &mut concat[h * dh..(h + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &v) in out.iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
        }
        affine(&self.model.params, &concat, 1, a.wo, Some(a.bo))
    }

    /// Feed the token at the current position (BOS first) and return the
    /// logits for the next one.
    pub fn step(&mut self, token: u32) -> Result<Vec<F>> {
        let model = self.model;
        let cfg = model.config();
        if self.pos >= cfg.max_target_len {
            return Err(Error::LengthOverflow { what: "target", len: self.pos + 1, max: cfg.max_target_len });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, vocab: cfg.vocab_size });
        }
        let d = cfg.d_model;
        let params = &model.params;
        let layout = model.layout();
        let emb = slice(params, layout.tok_emb);
        let pos = slice(params, layout.dec_pos);
        let t = token as usize;
        let mut x: Vec<F> = (0..d).map(|j| emb[t * d + j] + pos[self.pos * d + j]).collect();
        for (li, layer) in layout.dec.iter().enumerate() {
            let h = layer_norm(params, &x, &layer.ln1);
            let sa = &layer.self_attn;
            let q = affine(params, &h, 1, sa.wq, Some(sa.bq));
            let k = affine(params, &h, 1, sa.wk, Some(sa.bk));
            let v = affine(params, &h, 1, sa.wv, Some(sa.bv));
            self.self_k[li].extend_from_slice(&k);
            self.self_v[li].extend_from_slice(&v);
            let a = self.attend(&q, &self.self_k[li], &self.self_v[li], self.pos + 1, sa);
            add_in(&mut x, &a);

            let h = layer_norm(params, &x, &layer.ln2);
            let ca = &layer.cross;
            let q = affine(params, &h, 1, ca.wq, Some(ca.bq));
            let c = self.attend(&q, &self.cross_k[li], &self.cross_v[li], self.mem_len, ca);
            add_in(&mut x, &c);

            let h = layer_norm(params, &x, &layer.ln3);
            let ff = &layer.ff;
            let mut f = affine(params, &h, 1, ff.w1, Some(ff.b1));
            f.iter_mut().for_each(|v| *v = v.max(F::zero()));
            let f = affine(params, &f, 1, ff.w2, Some(ff.b2));
            add_in(&mut x, &f);
        }
        let y = layer_norm(params, &x, &layout.dec_ln);
        let logits = match layout.out_proj {
            Some(w) => affine(params, &y, 1, w, None),
            None => {
                let mut out = vec![F::zero(); cfg.vocab_size];
                gemm(
                    F::one(),
                    View::new(&y, 1, d),
                    View::new(emb, cfg.vocab_size, d).t(),
                    F::zero(),
                    ViewMut::new(&mut out, 1, cfg.vocab_size),
                );
                out
            }
        };
        self.pos += 1;
        Ok(logits)
    }
}
