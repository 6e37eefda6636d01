//! Acceptance suite. Runs every criterion in order, printing one
//! PASS/FAIL line each; soft criteria print WARN instead of failing.
//!
//! `ACCEPTANCE_ONLY=3,11` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::collection::vec;
use proptest::prelude::any;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tome::augment::{build_augmented_set, PseudoQuery};
use tome::config::RunConfig;
use tome::corpus::{parse_corpus, Corpus, QueryRecord};
use tome::dataset::TrainingPair;
use tome::eval::{hits_at_1, labels_from_queries};
use tome::harness::{ablation_variants, run_grid, sign_consistency, Axes, ExperimentGrid, Manifest};
use tome::model::infer::IncrementalDecoder;
use tome::model::{cross_entropy, init_model, log_prob, SizeTag, Seq2SeqModel};
use tome::pipeline::{
    build_all, evaluate_two_stage, fit, fit_spec, retrieve_two_stage, run_pipeline, split_for, training_sources,
    StageData, TwoStageModels,
};
use tome::retrieve::{
    bm25_build, bm25_retrieve, error_tolerance, greedy_decode, retrieve_all, single_stage_retrieve, RetrievalResult,
    BM25_B, BM25_K1,
};
use tome::synth::synth_corpus;
use tome::tokenizer::{Role, Tokenizer, BOS};

const DESK_VOCAB: usize = 512;

enum Verdict {
    Pass(String),
    Warn(String),
    Fail(String),
}

fn say(line: &str) {
    let mut e = std::io::stderr();
    let _ = writeln!(e, "{line}");
    let _ = e.flush();
}

fn desk_config(seed: u64) -> RunConfig {
    let mut c = RunConfig { vocab_size: DESK_VOCAB, ..RunConfig::default() };
    c.corpus.synth_records = 50;
    c.augment.k = 20;
    for t in [&mut c.train_stage1, &mut c.train_single] {
        t.lr_peak = 1e-3;
        t.batch_size = 16;
        t.max_steps = 1000;
        t.warmup_steps = 100;
    }
    c.train_stage2.lr_peak = 1e-3;
    c.train_stage2.batch_size = 16;
    c.train_stage2.max_steps = 600;
    c.train_stage2.warmup_steps = 20;
    c.with_seed(seed)
}

struct Desk {
    corpus: Corpus,
    queries: Vec<QueryRecord>,
    tok: Tokenizer,
}

impl Desk {
    fn new() -> Self {
        let (corpus, queries) = synth_corpus(50, 0).unwrap();
        let tok = Tokenizer::train(&corpus, DESK_VOCAB, 0).unwrap();
        Desk { corpus, queries, tok }
    }

    fn inputs(&self, cfg: &RunConfig) -> (Vec<PseudoQuery>, Vec<QueryRecord>, StageData) {
        let (train_q, dev_q) = split_for(cfg, &self.queries).unwrap();
        let pseudo = build_augmented_set(&self.corpus, &cfg.augment).unwrap();
        let data = build_all(cfg, &self.corpus, &training_sources(&pseudo, &train_q), &self.tok).unwrap();
        (pseudo, dev_q, data)
    }

    fn train_stage(&self, cfg: &RunConfig, which: &str, data: &[TrainingPair]) -> Seq2SeqModel<f32> {
        let (spec, tcfg) = match which {
            "stage1" => (cfg.stage1.clone(), &cfg.train_stage1),
            "stage2" => (cfg.stage2(), &cfg.train_stage2),
            _ => (cfg.single(), &cfg.train_single),
        };
        let start = Instant::now();
        let (m, _) = fit(&fit_spec(cfg, &spec, tcfg, which, &self.tok, None), data, None, |_| Ok(())).unwrap();
        say(&format!("    trained {which} (seed {}) in {:.0}s", cfg.seed, start.elapsed().as_secs_f64()));
        m
    }

    fn dev_hits(&self, cfg: &RunConfig, models: &TwoStageModels, dev_q: &[QueryRecord]) -> f64 {
        let results = retrieve_two_stage(cfg, models, dev_q, &self.tok).unwrap();
        hits_at_1(&results, &labels_from_queries(dev_q, &self.corpus).unwrap()).unwrap().hits_at_1
    }
}

/// Models and outputs of the criterion-3 run, reused by 4, 5 and 11.
struct Memorized {
    cfg: RunConfig,
    models: TwoStageModels,
    pseudo: Vec<PseudoQuery>,
    results: Vec<RetrievalResult>,
    dev_q: Vec<QueryRecord>,
    data: StageData,
}

fn pseudo_as_queries(pseudo: &[PseudoQuery]) -> Vec<QueryRecord> {
    pseudo
        .iter()
        .enumerate()
        .map(|(i, p)| QueryRecord {
            query_id: format!("pq{i:05}"),
            text: p.text.clone(),
            positive_passage_ids: vec![p.passage_id.clone()],
        })
        .collect()
}

fn criterion_1(desk: &Desk) -> Verdict {
    let start = Instant::now();
    let cfg = desk_config(0);
    let (_, _, data) = desk.inputs(&cfg);
    let model = init_model(&cfg.model_config(desk.tok.vocab_size(), &cfg.stage1), 11).unwrap().cast::<f64>();
    let batch: Vec<&TrainingPair> = data.stage1.iter().take(2).collect();
    let (grads, _, tokens) = model.batch_gradient(&batch, None).unwrap();
    let objective = |m: &Seq2SeqModel<f64>| batch.iter().map(|p| m.pair_loss(p).unwrap().0).sum::<f64>() / tokens as f64;

    // Probes alternate between uniform draws over all parameters and draws
    // over those the batch touches. A probe whose +h and -h points differ
    // in ReLU activation pattern straddles a kink, where the central
    // difference is not an estimate of the derivative; those are redrawn.
    let pattern = |m: &Seq2SeqModel<f64>| {
        batch.iter().map(|p| m.relu_pattern(&p.source.ids, &p.target.ids).unwrap()).collect::<Vec<_>>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let touched: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].abs() > 1e-6).collect();
    let h = 1e-4;
    let mut probe = model.clone();
    let (mut worst, mut checked, mut kinks) = (0.0f64, 0usize, 0usize);
    while checked < 120 && kinks < 500 {
        let i = if (checked + kinks) % 2 == 0 { rng.gen_range(0..grads.len()) } else { *touched.choose(&mut rng).unwrap() };
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let (up, up_pattern) = (objective(&probe), pattern(&probe));
        probe.params[i] = orig - h;
        let (down, down_pattern) = (objective(&probe), pattern(&probe));
        probe.params[i] = orig;
        if up_pattern != down_pattern {
            kinks += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((grads[i] - fd).abs() / (fd.abs() + 1e-8));
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "{checked} parameters ({kinks} kink-straddling draws redrawn), worst relative error {worst:.2e}, {secs:.1}s"
    );
    if worst < 1e-3 && secs < 60.0 && checked >= 100 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn criterion_2(desk: &Desk) -> Verdict {
    let cfg = desk_config(0);
    let (_, _, data) = desk.inputs(&cfg);
    let mcfg = cfg.model_config(desk.tok.vocab_size(), &cfg.stage1);
    let vocab = mcfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let model = init_model(&mcfg, 100 + case).unwrap().cast::<f64>();
        let pair = data.stage1.choose(&mut rng).unwrap();
        // Even cases score the gold target, odd cases the model's own
        // greedy output with the log-probabilities the decoder reported.
        let (target, chained) = if case % 2 == 0 {
            let mut dec = IncrementalDecoder::new(&model, &pair.source.ids).unwrap();
            let mut sum = 0.0;
            let mut prev = BOS;
            for &y in &pair.target.ids {
                sum += log_prob(&dec.step(prev).unwrap(), y as usize);
                prev = y;
            }
            (pair.target.ids.clone(), sum)
        } else {
            let d = greedy_decode(&model, &pair.source.ids, cfg.stage1.target_max, &desk.tok).unwrap();
            (d.ids.clone(), d.logprobs.iter().sum())
        };
        let (ce, _) = cross_entropy(&model.forward(&pair.source.ids, &target).unwrap(), vocab, &target);
        // exp(-ce) / exp(chained) - 1, computed without underflow.
        worst = worst.max((chained + ce).exp_m1().abs());
    }
    let msg = format!("20 cases, worst relative difference {worst:.2e}");
    if worst < 1e-6 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn criterion_3(desk: &Desk) -> (Verdict, Memorized) {
    let start = Instant::now();
    let cfg = desk_config(0);
    let (pseudo, dev_q, data) = desk.inputs(&cfg);
    let stage1 = desk.train_stage(&cfg, "stage1", &data.stage1);
    let stage2 = desk.train_stage(&cfg, "stage2", &data.stage2);
    let models = TwoStageModels { stage1, stage2 };
    let queries = pseudo_as_queries(&pseudo);
    let results = retrieve_two_stage(&cfg, &models, &queries, &desk.tok).unwrap();
    let report = evaluate_two_stage(&cfg, &results, &queries, &desk.corpus, &desk.tok).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let member = report.membership_rate.unwrap_or(0.0);
    let msg = format!(
        "{} training pseudo-queries, hits@1 {:.4}, membership {member:.4}, {secs:.0}s",
        queries.len(),
        report.hits_at_1
    );
    let verdict = if report.hits_at_1 >= 0.90 && member >= 0.90 && secs <= 15.0 * 60.0 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    };
    (verdict, Memorized { cfg, models, pseudo, results, dev_q, data })
}

fn criterion_11(desk: &Desk, mem: &Memorized) -> Verdict {
    // One stage-1 output per record: the one produced for its first pseudo query.
    let mut seen = BTreeSet::new();
    let mut cases = Vec::new();
    for (i, p) in mem.pseudo.iter().enumerate() {
        if seen.insert(p.passage_id.clone()) {
            let r = mem.results.iter().find(|r| r.query_id == format!("pq{i:05}")).unwrap();
            let url = desk.corpus.get(&p.passage_id).unwrap().assigned_url.clone();
            cases.push((r.intermediate_passage.clone().unwrap_or_default(), url));
        }
    }
    let rate = error_tolerance(&mem.models.stage2, &cases, &mem.cfg.stage2(), &desk.tok, 0).unwrap();
    let msg = format!("{} records, correct URL after one-word deletion {rate:.4}", cases.len());
    if rate >= 0.80 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

/// Per-seed two-stage and single-stage dev Hits@1.
fn criterion_4(desk: &Desk, mem: &Memorized, base_rows: &mut Vec<(RunConfig, TwoStageModels, f64)>) -> Verdict {
    let labels = labels_from_queries(&mem.dev_q, &desk.corpus).unwrap();
    let (mut two, mut single) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let cfg = desk_config(seed);
        let (models, dev_q, data) = if seed == 0 {
            let m = TwoStageModels { stage1: mem.models.stage1.clone(), stage2: mem.models.stage2.clone() };
            (m, mem.dev_q.clone(), mem.data.single.clone())
        } else {
            let (_, dev_q, data) = desk.inputs(&cfg);
            let stage1 = desk.train_stage(&cfg, "stage1", &data.stage1);
            let stage2 = desk.train_stage(&cfg, "stage2", &data.stage2);
            (TwoStageModels { stage1, stage2 }, dev_q, data.single)
        };
        let single_model = desk.train_stage(&cfg, "single", &data);
        let labels = if seed == 0 { labels.clone() } else { labels_from_queries(&dev_q, &desk.corpus).unwrap() };
        let s = cfg.single();
        let sr = retrieve_all(&dev_q, |q| single_stage_retrieve(&q.query_id, &single_model, &q.text, &s, &desk.tok))
            .unwrap();
        let sh = hits_at_1(&sr, &labels).unwrap().hits_at_1;
        let th = desk.dev_hits(&cfg, &models, &dev_q);
        say(&format!("    seed {seed}: two-stage {th:.4}, single-stage {sh:.4} on {} dev queries", dev_q.len()));
        two.push(th);
        single.push(sh);
        base_rows.push((cfg, models, th));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let inverted = sign_consistency(&two, &single);
    let msg = format!(
        "two-stage {:?} (mean {:.4}) vs single-stage {:?} (mean {:.4}), inverted on {inverted}/3 seeds",
        rounded(&two),
        mean(&two),
        rounded(&single),
        mean(&single)
    );
    if mean(&two) >= mean(&single) {
        Verdict::Pass(msg)
    } else if inverted < 2 {
        Verdict::Warn(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn criterion_5(desk: &Desk, base_rows: &[(RunConfig, TwoStageModels, f64)]) -> Verdict {
    let mut lines = Vec::new();
    let mut all_hold = true;
    let base: Vec<f64> = base_rows.iter().map(|r| r.2).collect();
    for name in ["prompts_off", "queries_halved"] {
        let mut hits = Vec::new();
        for (base_cfg, base_models, _) in base_rows {
            let (_, _, cfg) = ablation_variants(base_cfg).into_iter().find(|v| v.0 == name).unwrap();
            let (_, dev_q, data) = desk.inputs(&cfg);
            let stage1 = desk.train_stage(&cfg, "stage1", &data.stage1);
            // Halving k leaves the stage-2 data and config untouched, so
            // the base run's stage-2 model is the one this run would train.
            let stage2 = if cfg.stage2() == base_cfg.stage2() && cfg.train_stage2 == base_cfg.train_stage2 {
                base_models.stage2.clone()
            } else {
                desk.train_stage(&cfg, "stage2", &data.stage2)
            };
            let h = desk.dev_hits(&cfg, &TwoStageModels { stage1, stage2 }, &dev_q);
            say(&format!("    {name} seed {}: {h:.4}", cfg.seed));
            hits.push(h);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // Prompts-off must not beat the base; halving k must fall below it.
        let strict = name == "queries_halved";
        let holds = if strict { mean(&base) > mean(&hits) } else { mean(&base) >= mean(&hits) };
        let consistent = base.iter().zip(&hits).filter(|(b, h)| if strict { b > h } else { b >= h }).count();
        all_hold &= holds;
        lines.push(format!(
            "base {:.4} vs {name} {:.4} ({:?}), direction holds on {consistent}/3 seeds",
            mean(&base),
            mean(&hits),
            rounded(&hits)
        ));
    }
    let msg = lines.join("; ");
    if all_hold {
        Verdict::Pass(msg)
    } else {
        Verdict::Warn(msg)
    }
}

fn grid_1000(axes: Axes, budget: u64, batch: usize) -> Manifest {
    let (corpus, _) = synth_corpus(1000, 0).unwrap();
    let mut base = RunConfig { vocab_size: DESK_VOCAB, ..RunConfig::default() };
    base.train_stage1.lr_peak = 1e-3;
    base.train_stage1.batch_size = batch;
    base.train_stage1.warmup_steps = budget / 10;
    let grid = ExperimentGrid {
        axes,
        base,
        base_corpus_size: 1000,
        seeds: vec![0, 1, 2],
        budget,
        eval_every: budget / 4,
        eval_pairs: 64,
    };
    let dir = tempfile::tempdir().unwrap();
    let m = run_grid(&grid, &corpus, dir.path(), &mut std::io::sink()).unwrap();
    assert!(m.cells.iter().all(|c| c.status == "ok"), "grid cell failed");
    m
}

fn criterion_6() -> Verdict {
    let m = grid_1000(Axes { passage_truncs: vec![16, 64], ..Axes::default() }, 100, 16);
    let ppl = |v: &str| (0..3).map(|s| m.final_of("trunc", v, s, true).unwrap()).collect::<Vec<_>>();
    let (short, long) = (ppl("16"), ppl("64"));
    let wins = sign_consistency(&short, &long);
    let msg = format!("stage-1 PPL after 100 steps, trunc 16 {:?} vs trunc 64 {:?}, lower on {wins}/3 seeds", rounded(&short), rounded(&long));
    if wins >= 2 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn criterion_7() -> Verdict {
    let m = grid_1000(Axes { model_tags: vec![SizeTag::Tiny, SizeTag::Medium], ..Axes::default() }, 60, 8);
    let loss = |v: &str| (0..3).map(|s| m.final_of("model", v, s, false).unwrap()).collect::<Vec<_>>();
    let (medium, tiny) = (loss("medium"), loss("tiny"));
    let wins = sign_consistency(&medium, &tiny);
    let msg = format!("training loss after 60 steps, medium {:?} vs tiny {:?}, lower on {wins}/3 seeds", rounded(&medium), rounded(&tiny));
    if wins >= 2 {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn criterion_8() -> Verdict {
    let lines = [
        r#"{"id":"d1","title":"apple","passage":"apple pie","urls":["u1"]}"#,
        r#"{"id":"d2","title":"banana","passage":"split","urls":["u2"]}"#,
        r#"{"id":"d3","title":"cherry","passage":"apple apple tart with cream","urls":["u3"]}"#,
    ];
    let docs: [&[&str]; 3] = [
        &["apple", "apple", "pie"],
        &["banana", "split"],
        &["cherry", "apple", "apple", "tart", "with", "cream"],
    ];
    // Independent oracle straight from the scoring formula.
    let oracle = |query: &[&str]| -> Vec<f64> {
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.len()).sum::<usize>() as f64 / n;
        let terms: BTreeSet<&str> = query.iter().copied().collect();
        docs.iter()
            .map(|d| {
                terms
                    .iter()
                    .map(|t| {
                        let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                        let tf = d.iter().filter(|w| *w == t).count() as f64;
                        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                        idf * tf * (1.2 + 1.0) / (tf + 1.2 * (1.0 - 0.75 + 0.75 * d.len() as f64 / avg))
                    })
                    .sum()
            })
            .collect()
    };
    let corpus = parse_corpus(&lines.join("\n"), 0).unwrap();
    let index = bm25_build(&corpus, BM25_K1, BM25_B).unwrap();
    let mut worst = 0.0f64;
    for q in ["apple", "apple split", "Cream, banana!", "apple apple tart"] {
        let words: Vec<String> = q.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect();
        let expect = oracle(&words.iter().map(String::as_str).collect::<Vec<_>>());
        for (id, score) in bm25_retrieve(&index, q, 10) {
            let i: usize = id[1..].parse::<usize>().unwrap() - 1;
            worst = worst.max((score - expect[i]).abs());
        }
    }
    let pinned = bm25_retrieve(&index, "apple", 10);
    let pinned_ok = pinned.len() == 2
        && pinned[0].0 == "d1"
        && (pinned[0].1 - 0.6810831).abs() < 1e-7
        && (pinned[1].1 - 0.5481488).abs() < 1e-7;

    let reversed = parse_corpus(&lines.iter().rev().copied().collect::<Vec<_>>().join("\n"), 0).unwrap();
    let rindex = bm25_build(&reversed, BM25_K1, BM25_B).unwrap();
    let (big, _) = synth_corpus(200, 3).unwrap();
    let mut shuffled = big.records().to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
    let (bi, si) = (
        bm25_build(&big, BM25_K1, BM25_B).unwrap(),
        bm25_build(&Corpus::from_records(shuffled).unwrap(), BM25_K1, BM25_B).unwrap(),
    );
    let queries = ["apple", "apple pie cream", "banana split"];
    let toy_invariant = queries.iter().all(|q| bm25_retrieve(&index, q, 3) == bm25_retrieve(&rindex, q, 3));
    let big_invariant = big.records().iter().take(40).all(|r| {
        let q = r.passage.split_whitespace().take(6).collect::<Vec<_>>().join(" ");
        let a = bm25_retrieve(&bi, &q, 10);
        a == bm25_retrieve(&si, &q, 10) && a == bm25_retrieve(&bi, &q, 10)
    });
    let msg = format!(
        "max deviation from oracle {worst:.1e}, pinned values {}, order invariant {}",
        if pinned_ok { "match" } else { "differ" },
        toy_invariant && big_invariant
    );
    if worst <= 1e-9 && pinned_ok && toy_invariant && big_invariant {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn criterion_9(desk: &Desk) -> Verdict {
    let tok = &desk.tok;
    let mut runner = TestRunner::new_with_rng(
        PtConfig { cases: 1000, failure_persistence: None, ..PtConfig::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let random = runner.run(&vec(any::<u8>(), 0..256), |bytes| {
        let mut ids = tok.encode_bytes(&bytes);
        ids.push(tome::tokenizer::EOS);
        proptest::prop_assert_eq!(tok.decode_bytes(&ids).unwrap(), bytes);
        Ok(())
    });
    let (big, _) = synth_corpus(1000, 0).unwrap();
    let mut texts = 0usize;
    let mut bad = Vec::new();
    for r in desk.corpus.records().iter().chain(big.records()) {
        for t in std::iter::once(&r.passage).chain(&r.urls).chain(std::iter::once(&r.title)) {
            texts += 1;
            let seq = tok.encode(t, Role::Target, usize::MAX);
            if tok.decode(&seq.ids).unwrap() != *t {
                bad.push(t.clone());
            }
        }
    }
    let msg = format!(
        "1000 random byte strings {}, {texts} corpus texts with {} mismatches",
        if random.is_ok() { "round-trip" } else { "FAILED" },
        bad.len()
    );
    if random.is_ok() && bad.is_empty() {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(format!("{msg} {random:?}"))
    }
}

fn criterion_10() -> Verdict {
    let cfg = RunConfig::from_json(
        r#"{"seed": 5, "vocab_size": 320, "corpus": {"synth_records": 16}, "augment": {"k": 4}, "grad_shards": 2,
            "train_stage1": {"max_steps": 20, "warmup_steps": 4, "batch_size": 4},
            "train_stage2": {"max_steps": 20, "warmup_steps": 4, "batch_size": 4},
            "train_single": {"max_steps": 20, "warmup_steps": 4, "batch_size": 4}}"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = run_pipeline(&cfg, &a, &mut std::io::sink()).unwrap();
    let rb = run_pipeline(&cfg, &b, &mut std::io::sink()).unwrap();
    let same_report = std::fs::read(a.join("report.json")).unwrap() == std::fs::read(b.join("report.json")).unwrap();
    let eval_a = ra.two_stage.as_ref().unwrap().to_json().unwrap();
    let same_eval = eval_a == rb.two_stage.as_ref().unwrap().to_json().unwrap();
    let same_ckpt = ra.checkpoints == rb.checkpoints
        && ra.checkpoints.len() == 3
        && ra.checkpoints.keys().all(|k| std::fs::read(a.join(k)).unwrap() == std::fs::read(b.join(k)).unwrap());
    let msg = format!(
        "report.json identical {same_report}, EvalReport identical {same_eval}, {} checkpoint hashes identical {same_ckpt}",
        ra.checkpoints.len()
    );
    if same_report && same_eval && same_ckpt {
        Verdict::Pass(msg)
    } else {
        Verdict::Fail(msg)
    }
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())
    })
}

#[test]
fn acceptance_criteria() {
    let only: Option<BTreeSet<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().map_or(true, |o| o.contains(&n));
    let names = [
        "",
        "gradient check",
        "loss/decoding consistency",
        "memorization",
        "two-stage vs single-stage",
        "ablation direction",
        "truncation scaling",
        "model-scale trend",
        "BM25 oracle",
        "tokenizer round-trip",
        "determinism",
        "error tolerance",
    ];
    let desk = Desk::new();
    let mut failed = Vec::new();
    let mut report = |n: u32, elapsed: Duration, v: Result<Verdict, String>| {
        let (tag, msg) = match v {
            Ok(Verdict::Pass(m)) => ("PASS", m),
            Ok(Verdict::Warn(m)) => ("WARN", format!("{m} (soft criterion)")),
            Ok(Verdict::Fail(m)) => ("FAIL", m),
            Err(p) => ("FAIL", format!("panicked: {p}")),
        };
        if tag == "FAIL" {
            failed.push(n);
        }
        say(&format!("criterion {n:>2} {tag} {}: {msg} [{:.0}s]", names[n as usize], elapsed.as_secs_f64()));
    };
    let timed = |f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = guarded(f);
        (t.elapsed(), v)
    };

    for (n, f) in [
        (1u32, &mut (|| criterion_1(&desk)) as &mut dyn FnMut() -> Verdict),
        (2, &mut || criterion_2(&desk)),
        (8, &mut criterion_8),
        (9, &mut || criterion_9(&desk)),
        (10, &mut criterion_10),
    ] {
        if wanted(n) {
            let (t, v) = timed(f);
            report(n, t, v);
        }
    }

    if [3, 4, 5, 11].iter().any(|&n| wanted(n)) {
        let t = Instant::now();
        match guarded(|| criterion_3(&desk)) {
            Ok((v, mem)) => {
                if wanted(3) {
                    report(3, t.elapsed(), Ok(v));
                }
                if wanted(11) {
                    let (t, v) = timed(&mut || criterion_11(&desk, &mem));
                    report(11, t, v);
                }
                let mut base_rows = Vec::new();
                if wanted(4) || wanted(5) {
                    let (t, v) = timed(&mut || criterion_4(&desk, &mem, &mut base_rows));
                    if wanted(4) {
                        report(4, t, v);
                    }
                }
                if wanted(5) && base_rows.len() == 3 {
                    let (t, v) = timed(&mut || criterion_5(&desk, &base_rows));
                    report(5, t, v);
                } else if wanted(5) {
                    report(5, Duration::ZERO, Err("base runs unavailable".into()));
                }
            }
            Err(p) => {
                for n in [3, 11, 4, 5] {
                    if wanted(n) {
                        report(n, t.elapsed(), Err(format!("memorization run failed: {p}")));
                    }
                }
            }
        }
    }
    for (n, f) in [(6u32, criterion_6 as fn() -> Verdict), (7, criterion_7)] {
        if wanted(n) {
            let (t, v) = timed(&mut || f());
            report(n, t, v);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
