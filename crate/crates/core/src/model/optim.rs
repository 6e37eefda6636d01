//! Adam with linear warmup, deterministic batch selection and the training
//! loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{perplexity, Seq2SeqModel, TrainConfig, TrainStats};
use crate::dataset::TrainingPair;
use crate::error::{Error, Result};
use crate::tokenizer::PAD;
use crate::util::derived_rng;

/// `lr_peak * min(1, step / warmup_steps)`; constant after warmup.
pub fn lr_at(tcfg: &TrainConfig, step: u64) -> f64 {
    if tcfg.warmup_steps == 0 {
        return tcfg.lr_peak;
    }
    tcfg.lr_peak * (step as f64 / tcfg.warmup_steps as f64).min(1.0)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub tcfg: TrainConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Number of fixed batch shards whose gradients are computed
    /// independently and summed in shard order. Results depend on this
    /// value but never on the thread count.
    pub grad_shards: usize,
}

impl Trainer {
    pub fn new(tcfg: TrainConfig, model: &Seq2SeqModel<f32>) -> Result<Self> {
        tcfg.validate()?;
        Ok(Trainer {
            tcfg,
            m: vec![0.0; model.num_params()],
            v: vec![0.0; model.num_params()],
            grad_shards: 1,
        })
    }

    /// Dataset indices for the batch at `step`: consecutive slices of a
    /// per-epoch seeded permutation, so the batch is a pure function of
    /// `(seed, step)` and resuming reproduces the same stream.
    pub fn batch_indices(&self, n_data: usize, step: u64) -> Vec<usize> {
        let b = self.tcfg.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..b as u64 {
            let pos = step * b as u64 + j;
            let epoch = pos / n_data as u64;
            let within = (pos % n_data as u64) as usize;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n_data).collect();
                perm.shuffle(&mut derived_rng(self.tcfg.seed, &format!("epoch/{epoch}")));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("filled").1[within]);
        }
        out
    }

    /// One optimizer step on the batch selected for `model.step`.
    pub fn step(&mut self, model: &mut Seq2SeqModel<f32>, data: &[TrainingPair]) -> Result<TrainStats> {
        if data.is_empty() {
            return Err(Error::Invalid("no training pairs".into()));
        }
        let idx = self.batch_indices(data.len(), model.step);
        let batch: Vec<&TrainingPair> = idx.iter().map(|&i| &data[i]).collect();
        self.backward_and_step(model, &batch)
    }

    /// Exact gradient of the mean per-token cross-entropy, optional global
    /// norm clipping, one Adam update at `lr_at(step + 1)`.
    pub fn backward_and_step(&mut self, model: &mut Seq2SeqModel<f32>, batch: &[&TrainingPair]) -> Result<TrainStats> {
        if model.step >= self.tcfg.max_steps {
            return Err(Error::Invalid(format!(
                "model already at step {} of {}",
                model.step, self.tcfg.max_steps
            )));
        }
        let step = model.step;
        let dropout_key = (model.config().dropout > 0.0).then_some((self.tcfg.seed, step));
        let (mut grads, loss) = if self.grad_shards <= 1 {
            let (g, l, _) = model.batch_gradient(batch, dropout_key)?;
            (g, l)
        } else {
            sharded_gradient(model, batch, self.grad_shards, dropout_key)?
        };
        let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        if let Some(clip) = self.tcfg.grad_clip {
            if norm > clip {
                let s = (clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= s);
            }
        }

        let t = step + 1;
        let lr = lr_at(&self.tcfg, t);
        let (b1, b2) = (self.tcfg.beta1, self.tcfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let step_size = (lr / c1) as f32;
        let sqrt_c2 = c2.sqrt() as f32;
        let eps = self.tcfg.eps as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in model.params.iter_mut().zip(&grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = b1f * *m + (1.0 - b1f) * g;
            *v = b2f * *v + (1.0 - b2f) * g * g;
            *p -= step_size * *m / (v.sqrt() / sqrt_c2 + eps);
        }
        model.step = t;
        Ok(TrainStats { step: t, loss, lr, ppl: None })
    }
}

fn sharded_gradient(
    model: &Seq2SeqModel<f32>,
    batch: &[&TrainingPair],
    shards: usize,
    dropout_key: Option<(u64, u64)>,
) -> Result<(Vec<f32>, f64)> {
    let tokens: usize = batch.iter().map(|p| p.target.ids.iter().filter(|&&t| t != PAD).count()).sum();
    if tokens == 0 {
        return Err(Error::Invalid("batch has no target tokens".into()));
    }
    let scale = 1.0 / tokens as f32;
    let chunk = batch.len().div_ceil(shards);
    let parts: Vec<(Vec<f32>, f64)> = batch
        .par_chunks(chunk)
        .enumerate()
        .map(|(s, pairs)| {
            let mut g = vec![0f32; model.num_params()];
            let mut loss = 0.0;
            for (j, pair) in pairs.iter().enumerate() {
                let i = s * chunk + j;
                let mut rng = dropout_key.map(|(seed, step)| derived_rng(seed, &format!("dropout/{step}/{i}")));
                loss += model.accumulate_grad(pair, scale, &mut g, rng.as_mut())?.0;
            }
            Ok((g, loss))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut loss) = iter.next().expect("at least one shard");
    for (g, l) in iter {
        for (a, b) in total.iter_mut().zip(g) {
            *a += b;
        }
        loss += l;
    }
    Ok((total, loss / tokens as f64))
}

/// Train until `tcfg.max_steps`, evaluating perplexity on `eval` every
/// `eval_every` steps and at the final step. `on_stats` sees each step's
/// stats after the update.
pub fn train<C>(
    model: &mut Seq2SeqModel<f32>,
    trainer: &mut Trainer,
    data: &[TrainingPair],
    eval: Option<&[TrainingPair]>,
    mut on_stats: C,
) -> Result<Vec<TrainStats>>
where
    C: FnMut(&TrainStats, &Seq2SeqModel<f32>, &Trainer) -> Result<()>,
{
    let mut history = Vec::new();
    while model.step < trainer.tcfg.max_steps {
        let mut stats = trainer.step(model, data)?;
        let last = stats.step == trainer.tcfg.max_steps;
        if let Some(ev) = eval {
            if stats.step % trainer.tcfg.eval_every == 0 || last {
                stats.ppl = Some(perplexity(model, ev)?);
            }
        }
        on_stats(&stats, model, trainer)?;
        history.push(stats);
    }
    Ok(history)
}
