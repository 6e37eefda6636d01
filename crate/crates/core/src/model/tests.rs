use super::checkpoint::{from_bytes, to_bytes, OptimState};
use super::infer::IncrementalDecoder;
use super::optim::train;
use super::*;
use crate::dataset::PairMeta;
use crate::tokenizer::{Role, TokenSequence, EOS};

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig::preset(SizeTag::Tiny, vocab, 16, 16)
}

fn pair(src: &[u32], tgt: &[u32]) -> TrainingPair {
    TrainingPair {
        source: TokenSequence { ids: src.to_vec(), role: Role::Source },
        target: TokenSequence { ids: tgt.to_vec(), role: Role::Target },
        meta: PairMeta { source_id: "q".into(), passage_id: "d".into(), url: "u".into() },
    }
}

#[test]
fn init_is_seeded_and_validated() {
    let cfg = tiny(40);
    let a = init_model(&cfg, 3).unwrap();
    let b = init_model(&cfg, 3).unwrap();
    let c = init_model(&cfg, 4).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert_eq!(a.step, 0);
    let bad = ModelConfig { d_model: 8, n_heads: 3, ..cfg };
    assert!(matches!(init_model(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn tiny_parameter_count_matches_hand_count() {
    // d = 64, d_ff = 256, V = 300, S = 32, T = 64:
    //   tok_emb 300·64 = 19200, positions (32 + 64)·64 = 6144
    //   attention 4·64² + 4·64 = 16640, layer norm 128, ff 2·64·256 + 256 + 64 = 33088
    //   encoder layer 2·128 + 16640 + 33088 = 49984
    //   decoder layer 3·128 + 2·16640 + 33088 = 66752
    //   total 19200 + 6144 + 2·49984 + 128 + 2·66752 + 128 = 259072
    let cfg = ModelConfig::preset(SizeTag::Tiny, 300, 32, 64);
    assert_eq!(init_model(&cfg, 0).unwrap().num_params(), 259_072);
    assert_eq!(init_model(&cfg, 1).unwrap().num_params(), 259_072);
    let untied = ModelConfig { tie_output: false, ..cfg };
    assert_eq!(init_model(&untied, 0).unwrap().num_params(), 259_072 + 64 * 300);
}

#[test]
fn forward_is_causal_normalized_and_deterministic() {
    let cfg = tiny(30);
    let m = init_model(&cfg, 1).unwrap().cast::<f64>();
    let src = [5, 6, 7, EOS];
    let tgt = [8, 9, 10, 11, EOS];
    let base = m.forward(&src, &tgt).unwrap();
    assert_eq!(base, m.forward(&src, &tgt).unwrap());
    for row in base.chunks_exact(30) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let total: f64 = row.iter().map(|x| (x - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    // Changing target token t only affects rows > t.
    for t in 0..tgt.len() {
        let mut changed = tgt;
        changed[t] = 20;
        let out = m.forward(&src, &changed).unwrap();
        assert_eq!(&out[..(t + 1) * 30], &base[..(t + 1) * 30], "row <= {t} changed");
        if t + 1 < tgt.len() {
            assert_ne!(&out[(t + 1) * 30..], &base[(t + 1) * 30..]);
        }
    }
}

#[test]
fn forward_rejects_overflow() {
    let m = init_model(&tiny(30), 1).unwrap();
    assert!(matches!(m.forward(&[5; 17], &[EOS]), Err(Error::LengthOverflow { what: "source", .. })));
    assert!(matches!(m.forward(&[5], &[6; 17]), Err(Error::LengthOverflow { what: "target", .. })));
    assert!(matches!(m.forward(&[31], &[EOS]), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn cross_entropy_closed_forms() {
    let (loss, n) = cross_entropy(&[0.0f64; 12], 4, &[1, 2, 3]);
    assert_eq!(n, 3);
    assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
    assert!((loss - 4.158883).abs() < 1e-6);

    let mut logits = vec![0.0f64; 12];
    for (t, &y) in [1usize, 2, 3].iter().enumerate() {
        logits[t * 4 + y] = f64::INFINITY;
    }
    assert_eq!(cross_entropy(&logits, 4, &[1, 2, 3]).0, 0.0);

    // PAD positions are excluded.
    let (l2, n2) = cross_entropy(&[0.0f64; 12], 4, &[1, PAD, 3]);
    assert_eq!(n2, 2);
    assert!((l2 - 2.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_equals_chained_step_probabilities() {
    let m = init_model(&tiny(25), 9).unwrap().cast::<f64>();
    let src = [4, 9, 12, EOS];
    let tgt = [7, 7, 13, 21, EOS];
    let (loss, _) = cross_entropy(&m.forward(&src, &tgt).unwrap(), 25, &tgt);

    // Oracle 1: forward on each growing prefix, read the last row.
    let mut chained = 0.0;
    for t in 0..tgt.len() {
        let rows = m.forward(&src, &tgt[..=t]).unwrap();
        chained += log_prob(&rows[t * 25..(t + 1) * 25], tgt[t] as usize);
    }
    assert!(((-chained) - loss).abs() <= 1e-9 * loss.abs());

    // Oracle 2: incremental decoding with cached keys and values.
    let mut dec = IncrementalDecoder::new(&m, &src).unwrap();
    let mut inc = 0.0;
    let mut prev = BOS;
    for &y in &tgt {
        let row = dec.step(prev).unwrap();
        inc += log_prob(&row, y as usize);
        prev = y;
    }
    assert!(((-inc) - loss).abs() <= 1e-9 * loss.abs());
}

#[test]
fn incremental_logits_match_teacher_forcing_in_f32() {
    let cfg = ModelConfig { tie_output: false, ..tiny(40) };
    let m = init_model(&cfg, 2).unwrap();
    let src = [4, 5, 6, 7, EOS];
    let tgt = [10, 11, 12, EOS];
    let full = m.forward(&src, &tgt).unwrap();
    let mut dec = IncrementalDecoder::new(&m, &src).unwrap();
    for (t, prev) in shift_right(&tgt).into_iter().enumerate() {
        let row = dec.step(prev).unwrap();
        for (a, b) in row.iter().zip(&full[t * 40..(t + 1) * 40]) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let m32 = init_model(&tiny(24), 5).unwrap();
    let m = m32.cast::<f64>();
    let batch = [pair(&[4, 5, 6, EOS], &[7, 8, EOS]), pair(&[9, 10, EOS], &[11, 12, 13, EOS])];
    let refs: Vec<&TrainingPair> = batch.iter().collect();
    let (grads, _, tokens) = m.batch_gradient(&refs, None).unwrap();
    let objective = |model: &Seq2SeqModel<f64>| -> f64 {
        batch.iter().map(|p| model.pair_loss(p).unwrap().0).sum::<f64>() / tokens as f64
    };
    let pattern = |model: &Seq2SeqModel<f64>| {
        batch.iter().map(|p| model.relu_pattern(&p.source.ids, &p.target.ids).unwrap()).collect::<Vec<_>>()
    };
    let mut rng = derived_rng(1, "fd-probe");
    let mut probe = m.clone();
    let h = 1e-4;
    let (mut worst, mut checked) = (0.0f64, 0);
    use rand::Rng;
    while checked < 120 {
        let i = rng.gen_range(0..probe.params.len());
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let (up, up_pattern) = (objective(&probe), pattern(&probe));
        probe.params[i] = orig - h;
        let (down, down_pattern) = (objective(&probe), pattern(&probe));
        probe.params[i] = orig;
        // Straddling a ReLU kink: the difference quotient is not a derivative.
        if up_pattern != down_pattern {
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        let rel = (grads[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn lr_schedule_endpoints() {
    let t = TrainConfig { warmup_steps: 100, max_steps: 1000, ..TrainConfig::stage1_default() };
    assert_eq!(lr_at(&t, 0), 0.0);
    assert!((lr_at(&t, 50) - t.lr_peak / 2.0).abs() < 1e-15);
    assert_eq!(lr_at(&t, 100), t.lr_peak);
    assert_eq!(lr_at(&t, 900), t.lr_peak);
    let none = TrainConfig { warmup_steps: 0, ..t };
    assert_eq!(lr_at(&none, 0), none.lr_peak);
    assert!(TrainConfig { warmup_steps: 2001, ..TrainConfig::stage1_default() }.validate().is_err());
}

#[test]
fn memorizes_a_single_pair() {
    let mut m = init_model(&tiny(32), 0).unwrap();
    let data = vec![pair(&[4, 5, 6, EOS], &[20, 21, 22, 23, EOS])];
    let tcfg = TrainConfig { lr_peak: 1e-3, warmup_steps: 10, max_steps: 200, batch_size: 1, ..TrainConfig::stage1_default() };
    let mut trainer = Trainer::new(tcfg, &m).unwrap();
    let before = perplexity(&m, &data).unwrap();
    let hist = train(&mut m, &mut trainer, &data, Some(&data), |_, _, _| Ok(())).unwrap();
    assert_eq!(hist.len(), 200);
    let first = hist[0].loss;
    let last = hist.last().unwrap().loss;
    assert!(last < first * 0.1, "loss {first} -> {last}");
    let after = perplexity(&m, &data).unwrap();
    assert!(after < before);
    // Perplexity is bounded by e^(mean loss).
    let (l, c) = m.pair_loss(&data[0]).unwrap();
    assert!((after - (l / c as f64).exp()).abs() < 1e-9);
    assert!(after >= 1.0);
}

#[test]
fn untrained_perplexity_is_near_vocab_size_and_additive() {
    let vocab = 300;
    let m = init_model(&ModelConfig::preset(SizeTag::Tiny, vocab, 16, 16), 3).unwrap();
    let data = vec![pair(&[10, 11, EOS], &[40, 41, 42, EOS]), pair(&[50, EOS], &[60, 61, EOS])];
    let ppl = perplexity(&m, &data).unwrap();
    assert!((ppl - vocab as f64).abs() < 0.2 * vocab as f64, "ppl {ppl}");
    let (mut l, mut c) = (0.0, 0);
    for p in &data {
        let (a, b) = m.pair_loss(p).unwrap();
        l += a;
        c += b;
    }
    assert!((ppl - (l / c as f64).exp()).abs() < 1e-9 * ppl);
    assert!(perplexity(&m, &[]).is_err());
}

#[test]
fn training_is_bit_deterministic_and_shard_reduction_is_thread_independent() {
    let data = vec![
        pair(&[4, 5, EOS], &[6, 7, EOS]),
        pair(&[8, EOS], &[9, 10, 11, EOS]),
        pair(&[12, 13, 14, EOS], &[15, EOS]),
    ];
    let tcfg = TrainConfig { max_steps: 5, warmup_steps: 2, batch_size: 3, ..TrainConfig::stage1_default() };
    let run = |shards: usize, threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut m = init_model(&tiny(20), 7).unwrap();
            let mut tr = Trainer::new(tcfg.clone(), &m).unwrap();
            tr.grad_shards = shards;
            let hist = train(&mut m, &mut tr, &data, None, |_, _, _| Ok(())).unwrap();
            (m.params, hist)
        })
    };
    let a = run(1, 1);
    assert_eq!(a, run(1, 1));
    let b = run(3, 1);
    assert_eq!(b, run(3, 2));
    for (x, y) in a.0.iter().zip(&b.0) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn dropout_training_is_seeded() {
    let cfg = ModelConfig { dropout: 0.1, ..tiny(20) };
    let data = vec![pair(&[4, 5, EOS], &[6, 7, EOS])];
    let tcfg = TrainConfig { max_steps: 3, warmup_steps: 1, batch_size: 2, ..TrainConfig::stage1_default() };
    let run = || {
        let mut m = init_model(&cfg, 1).unwrap();
        let mut tr = Trainer::new(tcfg.clone(), &m).unwrap();
        train(&mut m, &mut tr, &data, None, |_, _, _| Ok(())).unwrap();
        m.params
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_roundtrip_guard_and_resume() {
    let data = vec![pair(&[4, 5, EOS], &[6, 7, EOS]), pair(&[8, EOS], &[9, 10, EOS])];
    let tcfg = TrainConfig { max_steps: 6, warmup_steps: 2, batch_size: 2, ..TrainConfig::stage1_default() };
    let fresh = || init_model(&tiny(20), 2).unwrap().with_tokenizer_hash("abc");

    // Straight run.
    let mut full = fresh();
    let mut tr = Trainer::new(tcfg.clone(), &full).unwrap();
    let hist_full = train(&mut full, &mut tr, &data, None, |_, _, _| Ok(())).unwrap();

    // Interrupted at step 3, saved, reloaded, resumed.
    let mut part = fresh();
    let mut tr = Trainer::new(TrainConfig { max_steps: 3, ..tcfg.clone() }, &part).unwrap();
    train(&mut part, &mut tr, &data, None, |_, _, _| Ok(())).unwrap();
    let bytes = to_bytes(&part, Some(&OptimState::of(&tr))).unwrap();
    let (mut back, optim) = from_bytes(&bytes, "abc").unwrap();
    assert_eq!(back.params, part.params);
    assert_eq!(back.step, 3);
    assert_eq!(back.forward(&[4, EOS], &[6, EOS]).unwrap(), part.forward(&[4, EOS], &[6, EOS]).unwrap());
    let optim = optim.unwrap();
    let mut tr = Trainer::new(tcfg.clone(), &back).unwrap();
    tr.m = optim.m;
    tr.v = optim.v;
    let hist_rest = train(&mut back, &mut tr, &data, None, |_, _, _| Ok(())).unwrap();
    assert_eq!(back.params, full.params);
    assert_eq!(&hist_full[3..], &hist_rest[..]);
    assert_eq!(hist_rest[0].lr, lr_at(&tcfg, 4));

    assert!(matches!(from_bytes(&bytes, "other"), Err(Error::TokenizerMismatch { .. })));
    assert!(from_bytes(&bytes[..bytes.len() - 3], "abc").is_err());
    let plain = to_bytes(&part, None).unwrap();
    assert!(from_bytes(&plain, "abc").unwrap().1.is_none());
}

#[test]
fn step_past_budget_is_rejected() {
    let data = vec![pair(&[4, EOS], &[5, EOS])];
    let mut m = init_model(&tiny(10), 0).unwrap();
    let tcfg = TrainConfig { max_steps: 1, warmup_steps: 0, batch_size: 1, ..TrainConfig::stage1_default() };
    let mut tr = Trainer::new(tcfg, &m).unwrap();
    tr.step(&mut m, &data).unwrap();
    assert!(tr.step(&mut m, &data).is_err());
}
