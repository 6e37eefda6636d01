//! The end-to-end flow: corpus, tokenizer, pseudo queries, datasets, the
//! three retrievers, evaluation. Also the shared training driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented_set, save_tsv, PseudoQuery};
use crate::config::RunConfig;
use crate::corpus::{ingest_corpus, load_queries, queries_to_tsv, split_queries, Corpus, QueryRecord};
use crate::dataset::{build_single_stage, build_stage1, build_stage2, check_bounds, Dataset, StageSpec, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::{export_traces, hits_at_1, labels_from_queries, membership_analysis, EvalReport};
use crate::model::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint, OptimState};
use crate::model::optim::train;
use crate::model::{init_model, ModelConfig, Seq2SeqModel, TrainConfig, TrainStats, Trainer};
use crate::retrieve::{
    bm25_build, bm25_result, retrieve_all, save_results, single_stage_retrieve, two_stage_retrieve, Method,
    RetrievalResult, BM25_B, BM25_K1,
};
use crate::synth::synth_corpus;
use crate::tokenizer::Tokenizer;
use crate::util::{derived_rng, write_atomic};

/// Independent sub-seed for `key`.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    derived_rng(seed, key).next_u64()
}

/// Everything needed to train one model.
#[derive(Debug, Clone)]
pub struct FitSpec<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub tokenizer_hash: &'a str,
    pub grad_shards: usize,
    /// Save weights and optimizer state here every `checkpoint_every` steps
    /// and at the end.
    pub checkpoint: Option<&'a Path>,
    pub checkpoint_every: Option<u64>,
    /// Continue from `checkpoint` when it exists.
    pub resume: bool,
}

/// Train (or resume) a model. `on_stats` sees every step.
pub fn fit<C>(
    spec: &FitSpec<'_>,
    data: &[TrainingPair],
    eval: Option<&[TrainingPair]>,
    mut on_stats: C,
) -> Result<(Seq2SeqModel<f32>, Vec<TrainStats>)>
where
    C: FnMut(&TrainStats) -> Result<()>,
{
    let mut trainer_state = None;
    let mut model = match spec.checkpoint {
        Some(p) if spec.resume && p.exists() => {
            let (m, optim) = load_checkpoint(p, spec.tokenizer_hash)?;
            if m.config() != &spec.model {
                return Err(Error::Checkpoint(format!("{} was trained with a different model config", p.display())));
            }
            trainer_state = Some(optim.ok_or_else(|| Error::Checkpoint("no optimizer state to resume".into()))?);
            m
        }
        _ => init_model(&spec.model, spec.init_seed)?.with_tokenizer_hash(spec.tokenizer_hash),
    };
    let mut trainer = Trainer::new(spec.train.clone(), &model)?;
    trainer.grad_shards = spec.grad_shards;
    if let Some(o) = trainer_state {
        trainer.m = o.m;
        trainer.v = o.v;
    }
    if model.step > spec.train.max_steps {
        return Err(Error::Checkpoint(format!(
            "checkpoint at step {} is past max_steps {}",
            model.step, spec.train.max_steps
        )));
    }
    let every = spec.checkpoint_every.unwrap_or(u64::MAX);
    let history = train(&mut model, &mut trainer, data, eval, |stats, m, tr| {
        on_stats(stats)?;
        if let Some(p) = spec.checkpoint {
            if stats.step % every == 0 && stats.step != tr.tcfg.max_steps {
                save_checkpoint(m, Some(&OptimState::of(tr)), p)?;
            }
        }
        Ok(())
    })?;
    if let Some(p) = spec.checkpoint {
        save_checkpoint(&model, Some(&OptimState::of(&trainer)), p)?;
    }
    Ok((model, history))
}

/// The corpus and labeled queries named by the config, or a synthetic pair.
pub fn load_inputs(cfg: &RunConfig) -> Result<(Corpus, Vec<QueryRecord>)> {
    match (&cfg.corpus.path, &cfg.corpus.queries) {
        (Some(c), Some(q)) => {
            let corpus = ingest_corpus(c, cfg.seed)?;
            let queries = load_queries(q, Some(&corpus))?;
            Ok((corpus, queries))
        }
        _ => synth_corpus(cfg.corpus.synth_records, cfg.seed),
    }
}

/// `(train, dev)`; everything is dev when `dev_fraction` is 1.
pub fn split_for(cfg: &RunConfig, queries: &[QueryRecord]) -> Result<(Vec<QueryRecord>, Vec<QueryRecord>)> {
    if cfg.corpus.dev_fraction >= 1.0 {
        return Ok((Vec::new(), queries.to_vec()));
    }
    split_queries(queries, cfg.corpus.dev_fraction, cfg.seed)
}

/// Pseudo queries followed by training queries (one source per positive).
pub fn training_sources(pseudo: &[PseudoQuery], train_queries: &[QueryRecord]) -> Vec<PseudoQuery> {
    let mut out = pseudo.to_vec();
    for q in train_queries {
        for pid in &q.positive_passage_ids {
            out.push(PseudoQuery { text: q.text.clone(), passage_id: pid.clone(), method: "query".into() });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub hits_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub corpus_hash: String,
    pub tokenizer_hash: String,
    pub n_dev_queries: usize,
    pub rows: Vec<MethodRow>,
    /// Checkpoint file name -> SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
    pub two_stage: Option<EvalReport>,
    pub single_stage: Option<EvalReport>,
    pub bm25: EvalReport,
}

impl PipelineReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:>8}\n", "method", "hits@1");
        for r in &self.rows {
            s.push_str(&format!("{:<14} {:>8.4}\n", r.method.as_str(), r.hits_at_1));
        }
        s
    }
}

/// Artifact paths inside the output directory.
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(Error::in_stage(name))
}

fn fit_logged(
    name: &'static str,
    spec: &FitSpec<'_>,
    data: &[TrainingPair],
    log: &mut dyn Write,
) -> Result<Seq2SeqModel<f32>> {
    let start = Instant::now();
    let every = spec.train.eval_every;
    let (model, _) = fit(spec, data, None, |s| {
        if s.step % every == 0 || s.step == spec.train.max_steps {
            let _ = writeln!(log, "[{name}] step {:>5} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
        Ok(())
    })?;
    let _ = writeln!(log, "[{name}] done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(model)
}

/// Trained models of a two-stage run.
pub struct TwoStageModels {
    pub stage1: Seq2SeqModel<f32>,
    pub stage2: Seq2SeqModel<f32>,
}

/// Datasets for one run.
pub struct StageData {
    pub stage1: Vec<TrainingPair>,
    pub stage2: Vec<TrainingPair>,
    pub single: Vec<TrainingPair>,
}

pub fn build_all(
    cfg: &RunConfig,
    corpus: &Corpus,
    sources: &[PseudoQuery],
    tok: &Tokenizer,
) -> Result<StageData> {
    let (s1, s2, s3) = (cfg.stage1.clone(), cfg.stage2(), cfg.single());
    let data = StageData {
        stage1: build_stage1(sources, corpus, &s1, tok)?,
        stage2: build_stage2(corpus, &s2, tok)?,
        single: build_single_stage(sources, corpus, &s3, tok)?,
    };
    check_bounds(&data.stage1, &s1)?;
    check_bounds(&data.stage2, &s2)?;
    check_bounds(&data.single, &s3)?;
    Ok(data)
}

pub fn fit_spec<'a>(
    cfg: &RunConfig,
    spec: &StageSpec,
    tcfg: &TrainConfig,
    key: &str,
    tok: &'a Tokenizer,
    checkpoint: Option<&'a Path>,
) -> FitSpec<'a> {
    FitSpec {
        model: cfg.model_config(tok.vocab_size(), spec),
        train: tcfg.clone(),
        init_seed: derive_seed(cfg.seed, &format!("init/{key}")),
        tokenizer_hash: tok.hash(),
        grad_shards: cfg.grad_shards,
        checkpoint,
        checkpoint_every: None,
        resume: false,
    }
}

/// Train stage 1 and stage 2.
pub fn train_two_stage(
    cfg: &RunConfig,
    data: &StageData,
    tok: &Tokenizer,
    art: Option<&Artifacts>,
    log: &mut dyn Write,
) -> Result<TwoStageModels> {
    let p1 = art.map(|a| a.path("stage1.ckpt"));
    let p2 = art.map(|a| a.path("stage2.ckpt"));
    let f1 = fit_spec(cfg, &cfg.stage1, &cfg.train_stage1, "stage1", tok, p1.as_deref());
    let stage1 = stage("train-stage1", fit_logged("stage1", &f1, &data.stage1, log))?;
    let s2 = cfg.stage2();
    let f2 = fit_spec(cfg, &s2, &cfg.train_stage2, "stage2", tok, p2.as_deref());
    let stage2 = stage("train-stage2", fit_logged("stage2", &f2, &data.stage2, log))?;
    Ok(TwoStageModels { stage1, stage2 })
}

pub fn retrieve_two_stage(
    cfg: &RunConfig,
    models: &TwoStageModels,
    queries: &[QueryRecord],
    tok: &Tokenizer,
) -> Result<Vec<RetrievalResult>> {
    let (s1, s2) = (cfg.stage1.clone(), cfg.stage2());
    retrieve_all(queries, |q| {
        two_stage_retrieve(&q.query_id, &models.stage1, &models.stage2, &q.text, &s1, &s2, tok)
    })
}

/// Two-stage Hits@1 with membership analysis.
pub fn evaluate_two_stage(
    cfg: &RunConfig,
    results: &[RetrievalResult],
    queries: &[QueryRecord],
    corpus: &Corpus,
    tok: &Tokenizer,
) -> Result<EvalReport> {
    let labels = labels_from_queries(queries, corpus)?;
    let mut report = hits_at_1(results, &labels)?;
    membership_analysis(&mut report, results, corpus, &cfg.stage1, tok)?;
    Ok(report)
}

/// Run the whole flow into `out`, writing every artifact and `report.json`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, log: &mut dyn Write) -> Result<PipelineReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let art = Artifacts { dir: out.to_path_buf() };
    write_atomic(&art.path("config.json"), cfg.to_json()?.as_bytes())?;

    let (corpus, queries) = stage("ingest", load_inputs(cfg))?;
    corpus.write(&art.path("corpus.jsonl"))?;
    write_atomic(&art.path("queries.tsv"), queries_to_tsv(&queries).as_bytes())?;
    let (train_q, dev_q) = stage("ingest", split_for(cfg, &queries))?;
    write_atomic(&art.path("dev_queries.tsv"), queries_to_tsv(&dev_q).as_bytes())?;
    let _ = writeln!(log, "corpus: {} records, {} train / {} dev queries", corpus.len(), train_q.len(), dev_q.len());

    let tok = stage("train-tokenizer", Tokenizer::train(&corpus, cfg.vocab_size, cfg.seed))?;
    tok.save(&art.path("tokenizer.json"))?;

    let labels = labels_from_queries(&dev_q, &corpus)?;
    write_atomic(&art.path("dev_labels.jsonl"), &crate::eval::labels_to_jsonl(&labels)?)?;
    let bm25 = stage("retrieve", bm25_build(&corpus, BM25_K1, BM25_B))?;
    let bm25_results = retrieve_all(&dev_q, |q| Ok(bm25_result(&bm25, &corpus, q)))?;
    save_results(&bm25_results, &art.path("results_bm25.jsonl"))?;
    let bm25_report = stage("eval", hits_at_1(&bm25_results, &labels))?;

    let mut rows = Vec::new();
    let mut checkpoints = BTreeMap::new();
    let (mut two_report, mut single_report) = (None, None);
    if !cfg.skip_training {
        let pseudo = stage("augment", build_augmented_set(&corpus, &cfg.augment))?;
        save_tsv(&pseudo, &art.path("pseudo_queries.tsv"))?;
        let sources = training_sources(&pseudo, &train_q);
        let data = stage("build-data", build_all(cfg, &corpus, &sources, &tok))?;
        Dataset::new(cfg.stage1.clone(), &tok, data.stage1.clone()).save(&art.path("stage1.jsonl"))?;
        Dataset::new(cfg.stage2(), &tok, data.stage2.clone()).save(&art.path("stage2.jsonl"))?;
        Dataset::new(cfg.single(), &tok, data.single.clone()).save(&art.path("single.jsonl"))?;

        let models = train_two_stage(cfg, &data, &tok, Some(&art), log)?;
        let results = stage("retrieve", retrieve_two_stage(cfg, &models, &dev_q, &tok))?;
        save_results(&results, &art.path("results_two_stage.jsonl"))?;
        let report = stage("eval", evaluate_two_stage(cfg, &results, &dev_q, &corpus, &tok))?;
        export_traces(&results, &dev_q, &corpus, &report, &art.path("traces.jsonl"))?;
        rows.push(MethodRow { method: Method::TwoStage, hits_at_1: report.hits_at_1 });
        two_report = Some(report);
        for name in ["stage1.ckpt", "stage2.ckpt"] {
            checkpoints.insert(name.to_string(), checkpoint_hash(&art.path(name))?);
        }

        if cfg.train_single_stage {
            let p = art.path("single.ckpt");
            let spec = fit_spec(cfg, &cfg.single(), &cfg.train_single, "single", &tok, Some(&p));
            let model = stage("train-single", fit_logged("single", &spec, &data.single, log))?;
            let s3 = cfg.single();
            let results = stage(
                "retrieve",
                retrieve_all(&dev_q, |q| single_stage_retrieve(&q.query_id, &model, &q.text, &s3, &tok)),
            )?;
            save_results(&results, &art.path("results_single_stage.jsonl"))?;
            let report = stage("eval", hits_at_1(&results, &labels))?;
            rows.push(MethodRow { method: Method::SingleStage, hits_at_1: report.hits_at_1 });
            single_report = Some(report);
            checkpoints.insert("single.ckpt".to_string(), checkpoint_hash(&p)?);
        }
    }
    rows.push(MethodRow { method: Method::Bm25, hits_at_1: bm25_report.hits_at_1 });

    let report = PipelineReport {
        config_hash: cfg.hash()?,
        corpus_hash: corpus.content_hash()?,
        tokenizer_hash: tok.hash().to_string(),
        n_dev_queries: dev_q.len(),
        rows,
        checkpoints,
        two_stage: two_report,
        single_stage: single_report,
        bm25: bm25_report,
    };
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    write_atomic(&art.path("report.json"), &bytes)?;
    let _ = write!(log, "{}", report.table());
    Ok(report)
}
