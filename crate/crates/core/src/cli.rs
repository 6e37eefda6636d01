//! Command-line entry point: one subcommand per stage plus `pipeline`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::augment::{build_augmented_set, load_tsv, save_tsv};
use crate::config::RunConfig;
use crate::corpus::{ingest_corpus, load_queries, queries_to_tsv};
use crate::dataset::{build_single_stage, build_stage1, build_stage2, check_bounds, Dataset, Stage};
use crate::error::{Error, Result};
use crate::eval::{hits_at_1, labels_from_queries, membership_analysis, parse_labels};
use crate::harness::{run_ablations, run_grid, ExperimentGrid};
use crate::model::checkpoint::load_checkpoint;
use crate::pipeline::{fit, fit_spec, load_inputs, run_pipeline, split_for, training_sources, FitSpec};
use crate::plot::plot_files;
use crate::retrieve::{
    bm25_build, bm25_result, load_results, retrieve_all, save_results, single_stage_retrieve, two_stage_retrieve,
    Method, BM25_B, BM25_K1,
};
use crate::synth::synth_corpus;
use crate::tokenizer::Tokenizer;
use crate::util::{read_to_string, write_atomic};

#[derive(Debug, Parser)]
#[command(name = "tome", version, about = "Two-stage generative retrieval at desk scale")]
pub struct Cli {
    /// JSON run config, merged over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Validate and print the resolved plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    Stage1,
    Stage2,
    Single,
}

impl StageArg {
    fn name(self) -> &'static str {
        match self {
            StageArg::Stage1 => "stage1",
            StageArg::Stage2 => "stage2",
            StageArg::Single => "single",
        }
    }

    fn of(stage: Stage) -> Self {
        match stage {
            Stage::PassageGen => StageArg::Stage1,
            Stage::UrlGen => StageArg::Stage2,
            Stage::QueryUrl => StageArg::Single,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    TwoStage,
    SingleStage,
    Bm25,
}

impl MethodArg {
    fn method(self) -> Method {
        match self {
            MethodArg::TwoStage => Method::TwoStage,
            MethodArg::SingleStage => Method::SingleStage,
            MethodArg::Bm25 => Method::Bm25,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and one labeled query per record.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Canonicalize a corpus JSONL, assigning one URL per record.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the byte-level BPE tokenizer on a corpus.
    TrainTokenizer {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate pseudo queries for every record.
    Augment {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Build one stage's training pairs.
    BuildData {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Pseudo queries TSV (stage1 and single).
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Labeled queries; the training split joins the sources.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Train a model on a dataset built by `build-data`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Answer queries with one retriever.
    Retrieve {
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
        /// Single-stage checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Corpus for BM25.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score retrieval results; membership analysis needs corpus and tokenizer.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Labels JSONL (`{"query_id", "urls"}` per line).
        #[arg(long, conflicts_with = "queries")]
        labels: Option<PathBuf>,
        /// Labeled queries TSV; needs `--corpus`.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Run a one-axis-at-a-time experiment grid.
    Grid {
        /// Grid definition JSON; its `base` defaults to the run config.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Corpus to subsample; the run config's corpus otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Base config against single-field variants, Hits@1 over seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Render study CSVs as SVG line charts.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
    /// The whole flow, from corpus to a three-method report.
    Pipeline,
}

#[derive(Debug, Serialize)]
struct Plan {
    command: &'static str,
    config: RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<Value>,
}

impl Plan {
    fn check_inputs(&self) -> Result<()> {
        for p in &self.inputs {
            if !p.exists() {
                return Err(Error::Config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_grid(path: Option<&Path>, cfg: &RunConfig) -> Result<ExperimentGrid> {
    let Some(path) = path else {
        return Ok(ExperimentGrid { base: cfg.clone(), ..ExperimentGrid::default() });
    };
    let mut v: Value = serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))?;
    let obj = v.as_object_mut().ok_or_else(|| Error::Config("grid must be an object".into()))?;
    let base = match obj.remove("base") {
        Some(b) => RunConfig::from_json(&b.to_string())?,
        None => cfg.clone(),
    };
    let known = ["axes", "base_corpus_size", "seeds", "budget", "eval_every", "eval_pairs"];
    if let Some(k) = obj.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown grid key {k}")));
    }
    let mut grid: ExperimentGrid = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    grid.base = base;
    Ok(grid)
}

fn stage_train<'a>(cfg: &'a RunConfig, stage: StageArg) -> &'a crate::model::TrainConfig {
    match stage {
        StageArg::Stage1 => &cfg.train_stage1,
        StageArg::Stage2 => &cfg.train_stage2,
        StageArg::Single => &cfg.train_single,
    }
}

fn load_model(path: &Path, tok: &Tokenizer) -> Result<crate::model::Seq2SeqModel<f32>> {
    Ok(load_checkpoint(path, tok.hash())?.0)
}

/// Run the parsed command; progress goes to `log`, results to `stdout`.
pub fn run(cli: &Cli, stdout: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    let o = |name: &str| out.join(name);
    let plan = |command, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>| Plan {
        command,
        config: cfg.clone(),
        inputs,
        outputs,
        detail: None,
    };

    let mut p = match &cli.command {
        Command::Synth { n } => {
            let n = n.unwrap_or(cfg.corpus.synth_records);
            if n == 0 {
                return Err(Error::Config("--n must be >= 1".into()));
            }
            let mut p = plan("synth", vec![], vec![o("corpus.jsonl"), o("queries.tsv")]);
            p.detail = Some(serde_json::json!({ "n": n }));
            p
        }
        Command::Ingest { input } => plan("ingest", vec![input.clone()], vec![o("corpus.jsonl")]),
        Command::TrainTokenizer { corpus } => plan("train-tokenizer", vec![corpus.clone()], vec![o("tokenizer.json")]),
        Command::Augment { corpus } => plan("augment", vec![corpus.clone()], vec![o("pseudo_queries.tsv")]),
        Command::BuildData { stage, corpus, tokenizer, pseudo, queries } => {
            let mut inputs = vec![corpus.clone(), tokenizer.clone()];
            match (stage, pseudo) {
                (StageArg::Stage2, _) => {}
                (_, Some(ps)) => inputs.push(ps.clone()),
                (_, None) => return Err(Error::Config(format!("{} needs --pseudo", stage.name()))),
            }
            inputs.extend(queries.clone());
            plan("build-data", inputs, vec![o(&format!("{}.jsonl", stage.name()))])
        }
        Command::Train { data, tokenizer, .. } => {
            let mut p = plan("train", vec![data.clone(), tokenizer.clone()], vec![]);
            if data.exists() {
                let ds = Dataset::load(data)?;
                let s = StageArg::of(ds.header.spec.stage);
                p.outputs.push(o(&format!("{}.ckpt", s.name())));
                p.detail = Some(serde_json::json!({ "stage": s, "pairs": ds.pairs.len(), "train": stage_train(&cfg, s) }));
            }
            p
        }
        Command::Retrieve { method, queries, tokenizer, stage1, stage2, model, corpus } => {
            let need = |x: &Option<PathBuf>, flag: &str| {
                x.clone().ok_or_else(|| Error::Config(format!("{method:?} retrieval needs --{flag}")))
            };
            let inputs = match method {
                MethodArg::TwoStage => {
                    vec![queries.clone(), need(tokenizer, "tokenizer")?, need(stage1, "stage1")?, need(stage2, "stage2")?]
                }
                MethodArg::SingleStage => vec![queries.clone(), need(tokenizer, "tokenizer")?, need(model, "model")?],
                MethodArg::Bm25 => vec![queries.clone(), need(corpus, "corpus")?],
            };
            plan("retrieve", inputs, vec![o(&format!("results_{}.jsonl", method.method().as_str()))])
        }
        Command::Eval { results, labels, queries, corpus, tokenizer } => {
            let mut inputs = vec![results.clone()];
            match (labels, queries, corpus) {
                (Some(l), None, _) => inputs.push(l.clone()),
                (None, Some(q), Some(_)) => inputs.push(q.clone()),
                (None, Some(_), None) => return Err(Error::Config("--queries needs --corpus".into())),
                _ => return Err(Error::Config("eval needs --labels or --queries".into())),
            }
            inputs.extend(corpus.clone());
            inputs.extend(tokenizer.clone());
            plan("eval", inputs, vec![o("eval_report.json"), o("eval_per_query.jsonl")])
        }
        Command::Grid { grid, corpus } => {
            let g = load_grid(grid.as_deref(), &cfg)?;
            g.validate()?;
            let mut inputs: Vec<PathBuf> = grid.iter().cloned().collect();
            inputs.extend(corpus.clone());
            let mut p = plan("grid", inputs, vec![o("manifest.json"), o("tokenizer.json"), o("cells")]);
            p.detail = Some(serde_json::json!({ "cells": g.cells().iter().map(|c| &c.cell_id).collect::<Vec<_>>() }));
            p
        }
        Command::Ablate { seeds } => {
            if seeds.is_empty() {
                return Err(Error::Config("--seeds needs at least one seed".into()));
            }
            let mut p = plan("ablate", vec![], vec![o("ablations.csv"), o("ablations.json")]);
            let variants: Vec<_> = crate::harness::ablation_variants(&cfg).into_iter().map(|v| (v.0, v.1)).collect();
            p.detail = Some(serde_json::json!({ "seeds": seeds, "variants": variants }));
            p
        }
        Command::Plot { csv } => {
            let outputs = csv
                .iter()
                .map(|c| o(&format!("{}.svg", c.file_stem().and_then(|s| s.to_str()).unwrap_or("plot"))))
                .collect();
            plan("plot", csv.clone(), outputs)
        }
        Command::Pipeline => plan("pipeline", vec![], vec![o("report.json")]),
    };
    if let Some(path) = &cfg.corpus.path {
        if matches!(cli.command, Command::Pipeline | Command::Ablate { .. } | Command::Grid { corpus: None, .. }) {
            p.inputs.push(path.clone());
            p.inputs.extend(cfg.corpus.queries.clone());
        }
    }
    p.check_inputs()?;
    if cli.dry_run {
        writeln!(stdout, "{}", serde_json::to_string_pretty(&p)?).map_err(|e| Error::io("stdout", e))?;
        return Ok(());
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    execute(cli, &cfg, stdout, log)
}

fn execute(cli: &Cli, cfg: &RunConfig, stdout: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let out = &cli.out;
    let o = |name: &str| out.join(name);
    let say = |stdout: &mut dyn Write, msg: String| writeln!(stdout, "{msg}").map_err(|e| Error::io("stdout", e));
    match &cli.command {
        Command::Synth { n } => {
            let (corpus, queries) = synth_corpus(n.unwrap_or(cfg.corpus.synth_records), cfg.seed)?;
            corpus.write(&o("corpus.jsonl"))?;
            write_atomic(&o("queries.tsv"), queries_to_tsv(&queries).as_bytes())?;
            say(stdout, format!("wrote {} records and {} queries to {}", corpus.len(), queries.len(), out.display()))
        }
        Command::Ingest { input } => {
            let corpus = ingest_corpus(input, cfg.seed)?;
            corpus.write(&o("corpus.jsonl"))?;
            say(stdout, format!("ingested {} records", corpus.len()))
        }
        Command::TrainTokenizer { corpus } => {
            let corpus = ingest_corpus(corpus, cfg.seed)?;
            let tok = Tokenizer::train(&corpus, cfg.vocab_size, cfg.seed)?;
            tok.save(&o("tokenizer.json"))?;
            say(stdout, format!("tokenizer {} ({} tokens)", tok.hash(), tok.vocab_size()))
        }
        Command::Augment { corpus } => {
            let corpus = ingest_corpus(corpus, cfg.seed)?;
            let pseudo = build_augmented_set(&corpus, &cfg.augment)?;
            save_tsv(&pseudo, &o("pseudo_queries.tsv"))?;
            say(stdout, format!("{} pseudo queries", pseudo.len()))
        }
        Command::BuildData { stage, corpus, tokenizer, pseudo, queries } => {
            let corpus = ingest_corpus(corpus, cfg.seed)?;
            let tok = Tokenizer::load(tokenizer)?;
            let mut sources = match pseudo {
                Some(p) if *stage != StageArg::Stage2 => load_tsv(p)?,
                _ => Vec::new(),
            };
            if let Some(q) = queries {
                let (train_q, _) = split_for(cfg, &load_queries(q, Some(&corpus))?)?;
                sources = training_sources(&sources, &train_q);
            }
            let (spec, pairs) = match stage {
                StageArg::Stage1 => (cfg.stage1.clone(), build_stage1(&sources, &corpus, &cfg.stage1, &tok)?),
                StageArg::Stage2 => (cfg.stage2(), build_stage2(&corpus, &cfg.stage2(), &tok)?),
                StageArg::Single => (cfg.single(), build_single_stage(&sources, &corpus, &cfg.single(), &tok)?),
            };
            check_bounds(&pairs, &spec)?;
            let n = pairs.len();
            Dataset::new(spec, &tok, pairs).save(&o(&format!("{}.jsonl", stage.name())))?;
            say(stdout, format!("{n} {} pairs", stage.name()))
        }
        Command::Train { data, tokenizer, resume, checkpoint_every } => {
            let tok = Tokenizer::load(tokenizer)?;
            let ds = Dataset::load_for(data, &tok)?;
            let stage = StageArg::of(ds.header.spec.stage);
            let ckpt = o(&format!("{}.ckpt", stage.name()));
            let tcfg = stage_train(cfg, stage);
            let spec = FitSpec {
                checkpoint_every: *checkpoint_every,
                resume: *resume,
                ..fit_spec(cfg, &ds.header.spec, tcfg, stage.name(), &tok, Some(&ckpt))
            };
            let every = tcfg.eval_every;
            let (model, _) = fit(&spec, &ds.pairs, None, |s| {
                if s.step % every == 0 || s.step == tcfg.max_steps {
                    let _ = writeln!(log, "[{}] step {:>5} loss {:.4} lr {:.2e}", stage.name(), s.step, s.loss, s.lr);
                }
                Ok(())
            })?;
            say(stdout, format!("{} trained to step {} -> {}", stage.name(), model.step, ckpt.display()))
        }
        Command::Retrieve { method, queries, tokenizer, stage1, stage2, model, corpus } => {
            let qs = load_queries(queries, None)?;
            let results = match method {
                MethodArg::TwoStage => {
                    let tok = Tokenizer::load(tokenizer.as_deref().expect("checked"))?;
                    let m1 = load_model(stage1.as_deref().expect("checked"), &tok)?;
                    let m2 = load_model(stage2.as_deref().expect("checked"), &tok)?;
                    let (s1, s2) = (cfg.stage1.clone(), cfg.stage2());
                    retrieve_all(&qs, |q| two_stage_retrieve(&q.query_id, &m1, &m2, &q.text, &s1, &s2, &tok))?
                }
                MethodArg::SingleStage => {
                    let tok = Tokenizer::load(tokenizer.as_deref().expect("checked"))?;
                    let m = load_model(model.as_deref().expect("checked"), &tok)?;
                    let s = cfg.single();
                    retrieve_all(&qs, |q| single_stage_retrieve(&q.query_id, &m, &q.text, &s, &tok))?
                }
                MethodArg::Bm25 => {
                    let c = ingest_corpus(corpus.as_deref().expect("checked"), cfg.seed)?;
                    let index = bm25_build(&c, BM25_K1, BM25_B)?;
                    retrieve_all(&qs, |q| Ok(bm25_result(&index, &c, q)))?
                }
            };
            let path = o(&format!("results_{}.jsonl", method.method().as_str()));
            save_results(&results, &path)?;
            say(stdout, format!("{} results -> {}", results.len(), path.display()))
        }
        Command::Eval { results, labels, queries, corpus, tokenizer } => {
            let results = load_results(results)?;
            let corpus = corpus.as_deref().map(|c| ingest_corpus(c, cfg.seed)).transpose()?;
            let labels = match (labels, queries, &corpus) {
                (Some(l), _, _) => parse_labels(&read_to_string(l)?)?,
                (None, Some(q), Some(c)) => labels_from_queries(&load_queries(q, Some(c))?, c)?,
                _ => unreachable!("checked in the plan"),
            };
            let mut report = hits_at_1(&results, &labels)?;
            if let (Some(c), Some(t)) = (&corpus, tokenizer) {
                if report.method == Some(Method::TwoStage) {
                    membership_analysis(&mut report, &results, c, &cfg.stage1, &Tokenizer::load(t)?)?;
                }
            }
            report.save(&o("eval_report.json"))?;
            write_atomic(&o("eval_per_query.jsonl"), &report.per_query_jsonl()?)?;
            let mut msg = format!("hits@1 {:.4} over {} queries", report.hits_at_1, report.n_queries);
            if let Some(m) = report.membership_rate {
                msg.push_str(&format!(", membership {m:.4}"));
            }
            say(stdout, msg)
        }
        Command::Grid { grid, corpus } => {
            let g = load_grid(grid.as_deref(), cfg)?;
            let corpus = match corpus {
                Some(c) => ingest_corpus(c, cfg.seed)?,
                None => load_inputs(cfg)?.0,
            };
            let m = run_grid(&g, &corpus, out, log)?;
            let failed = m.cells.iter().filter(|c| c.status != "ok").count();
            say(stdout, format!("{} cells, {failed} failed -> {}", m.cells.len(), o("manifest.json").display()))
        }
        Command::Ablate { seeds } => {
            let (corpus, queries) = load_inputs(cfg)?;
            let rows = run_ablations(cfg, &corpus, &queries, seeds, out, log)?;
            let mut s = format!("{:<16} {:>8}\n", "variant", "hits@1");
            for r in &rows {
                s.push_str(&format!("{:<16} {:>8.4}\n", r.variant, r.mean_hits_at_1));
            }
            write!(stdout, "{s}").map_err(|e| Error::io("stdout", e))
        }
        Command::Plot { csv } => {
            for p in plot_files(csv, out)? {
                say(stdout, p.display().to_string())?;
            }
            Ok(())
        }
        Command::Pipeline => {
            let report = run_pipeline(cfg, out, log)?;
            write!(stdout, "{}", report.table()).map_err(|e| Error::io("stdout", e))
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit code: 0 success,
/// 1 validation error, 2 runtime failure.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (mut stdout, mut stderr) = (std::io::stdout(), std::io::stderr());
    match run(&cli, &mut stdout, &mut stderr) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
