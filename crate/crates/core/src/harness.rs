//! Experiment grids (one axis varied at a time) and the ablation table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::build_augmented_set;
use crate::config::RunConfig;
use crate::corpus::{Corpus, QueryRecord};
use crate::dataset::{build_stage1, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::{hits_at_1, labels_from_queries};
use crate::model::{perplexity, SizeTag};
use crate::pipeline::{build_all, derive_seed, fit, fit_spec, retrieve_two_stage, split_for, training_sources, train_two_stage, FitSpec};
use crate::tokenizer::Tokenizer;
use crate::util::{derived_rng, read_to_string, sha256_hex, write_atomic};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Axes {
    pub corpus_sizes: Vec<usize>,
    pub model_tags: Vec<SizeTag>,
    pub passage_truncs: Vec<usize>,
    pub pseudo_query_counts: Vec<usize>,
    pub prompts: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub axes: Axes,
    pub base: RunConfig,
    /// Corpus size of cells that do not vary it.
    pub base_corpus_size: usize,
    pub seeds: Vec<u64>,
    /// Stage-1 steps per cell.
    pub budget: u64,
    pub eval_every: u64,
    /// Training pairs sampled per cell for perplexity.
    pub eval_pairs: usize,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            axes: Axes {
                corpus_sizes: vec![100, 1000, 5000],
                model_tags: vec![SizeTag::Tiny, SizeTag::Small, SizeTag::Medium],
                passage_truncs: vec![16, 32, 64],
                pseudo_query_counts: vec![5, 10, 20],
                prompts: Vec::new(),
            },
            base: RunConfig::default(),
            base_corpus_size: 1000,
            seeds: vec![0, 1, 2],
            budget: 500,
            eval_every: 50,
            eval_pairs: 128,
        }
    }
}

/// One grid cell: a single axis set to a single value, under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: String,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub corpus_size: usize,
    pub config: RunConfig,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        let a = &self.axes;
        if a.corpus_sizes.is_empty()
            && a.model_tags.is_empty()
            && a.passage_truncs.is_empty()
            && a.pseudo_query_counts.is_empty()
            && a.prompts.is_empty()
        {
            return Err(Error::Config("grid has no axes".into()));
        }
        if self.seeds.is_empty() || self.budget == 0 || self.eval_every == 0 || self.eval_pairs == 0 {
            return Err(Error::Config("grid needs seeds, a positive budget, eval_every and eval_pairs".into()));
        }
        for c in self.cells() {
            c.config.validate().map_err(|e| Error::Config(format!("cell {}: {e}", c.cell_id)))?;
        }
        Ok(())
    }

    fn cell(&self, axis: &str, value: String, seed: u64, corpus_size: usize, mut config: RunConfig) -> Cell {
        config = config.with_seed(seed);
        config.train_stage1.max_steps = self.budget;
        config.train_stage1.warmup_steps = config.train_stage1.warmup_steps.min(self.budget);
        config.train_stage1.eval_every = self.eval_every;
        Cell { cell_id: format!("{axis}-{value}-s{seed}"), axis: axis.into(), value, seed, corpus_size, config }
    }

    /// Cells in axis order, then value order, then seed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &n in &self.axes.corpus_sizes {
                out.push(self.cell("corpus", n.to_string(), seed, n, self.base.clone()));
            }
            for &tag in &self.axes.model_tags {
                let mut c = self.base.clone();
                c.model.size = tag;
                out.push(self.cell("model", tag.as_str().into(), seed, self.base_corpus_size, c));
            }
            for &t in &self.axes.passage_truncs {
                let mut c = self.base.clone();
                c.stage1.passage_trunc = t;
                c.stage1.target_max = c.stage1.target_max.max(t + 16);
                out.push(self.cell("trunc", t.to_string(), seed, self.base_corpus_size, c));
            }
            for &k in &self.axes.pseudo_query_counts {
                let mut c = self.base.clone();
                c.augment.k = k;
                out.push(self.cell("queries", k.to_string(), seed, self.base_corpus_size, c));
            }
            for &p in &self.axes.prompts {
                let mut c = self.base.clone();
                c.stage1.use_prompts = p;
                out.push(self.cell("prompts", p.to_string(), seed, self.base_corpus_size, c));
            }
        }
        let order = ["corpus", "model", "trunc", "queries", "prompts"];
        out.sort_by_key(|c| order.iter().position(|a| *a == c.axis).expect("known axis"));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cell_id: String,
    pub step: u64,
    /// Mean training loss over the steps since the previous point.
    pub loss: f64,
    pub ppl: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: Cell,
    pub config_hash: String,
    pub corpus_hash: Option<String>,
    pub status: String,
    pub error: Option<String>,
    pub final_loss: Option<f64>,
    pub final_ppl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: ExperimentGrid,
    pub tokenizer_hash: String,
    pub cells: Vec<CellRecord>,
}

fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(&cell.cell_id)
}

fn eval_sample(pairs: &[TrainingPair], n: usize, seed: u64) -> Vec<TrainingPair> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut derived_rng(seed, "eval-sample"));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Train one cell's stage-1 model, resuming from its checkpoint if present.
pub fn run_cell(
    grid: &ExperimentGrid,
    cell: &Cell,
    corpus: &Corpus,
    tok: &Tokenizer,
    out: &Path,
) -> Result<(Vec<CurvePoint>, String)> {
    let cfg = &cell.config;
    let sub = corpus.subsample(cell.corpus_size, cell.seed)?;
    let corpus_hash = sub.content_hash()?;
    let pseudo = build_augmented_set(&sub, &cfg.augment)?;
    let pairs = build_stage1(&pseudo, &sub, &cfg.stage1, tok)?;
    let eval = eval_sample(&pairs, grid.eval_pairs, cell.seed);

    let dir = cell_dir(out, cell);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = dir.join("stage1.ckpt");
    let points_path = dir.join("points.json");
    let mut points: Vec<CurvePoint> = if ckpt.exists() && points_path.exists() {
        serde_json::from_str(&read_to_string(&points_path)?)?
    } else {
        Vec::new()
    };
    let spec = FitSpec {
        checkpoint: Some(&ckpt),
        checkpoint_every: Some(grid.eval_every),
        resume: true,
        ..fit_spec(cfg, &cfg.stage1, &cfg.train_stage1, "grid-stage1", tok, None)
    };
    if ckpt.exists() {
        let (m, _) = crate::model::checkpoint::load_checkpoint(&ckpt, tok.hash())?;
        points.retain(|p| p.step <= m.step);
    }

    let start = Instant::now();
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let max_steps = cfg.train_stage1.max_steps;
    let every = grid.eval_every;
    fit(&spec, &pairs, Some(&eval), |s| {
        loss_sum += s.loss;
        loss_n += 1;
        if let Some(ppl) = s.ppl {
            if s.step % every == 0 || s.step == max_steps {
                points.push(CurvePoint {
                    cell_id: cell.cell_id.clone(),
                    step: s.step,
                    loss: loss_sum / loss_n as f64,
                    ppl,
                    wall_ms: start.elapsed().as_millis() as u64,
                });
                loss_sum = 0.0;
                loss_n = 0;
                write_atomic(&points_path, serde_json::to_string(&points)?.as_bytes())?;
            }
        }
        Ok(())
    })?;
    write_atomic(&points_path, serde_json::to_string(&points)?.as_bytes())?;
    Ok((points, corpus_hash))
}

pub const CSV_COLUMNS: [&str; 12] = [
    "cell_id", "axis", "value", "seed", "corpus_size", "model_tag", "passage_trunc", "pseudo_queries", "prompts",
    "step", "loss", "ppl",
];

fn write_csv(path: &Path, rows: &[(&Cell, &CurvePoint)], with_wall: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if with_wall {
        header.push("wall_ms");
    }
    w.write_record(&header)?;
    for (c, p) in rows {
        let cfg = &c.config;
        let mut rec = vec![
            c.cell_id.clone(),
            c.axis.clone(),
            c.value.clone(),
            c.seed.to_string(),
            c.corpus_size.to_string(),
            cfg.model.size.as_str().to_string(),
            cfg.stage1.passage_trunc.to_string(),
            cfg.augment.k.to_string(),
            cfg.stage1.use_prompts.to_string(),
            p.step.to_string(),
            format!("{:.6}", p.loss),
            format!("{:.6}", p.ppl),
        ];
        if with_wall {
            rec.push(p.wall_ms.to_string());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Run every cell, writing `study_{axis}.csv`, `cells/{id}/curve.csv` and
/// `manifest.json`. A failing cell is recorded and the rest proceed.
pub fn run_grid(grid: &ExperimentGrid, corpus: &Corpus, out: &Path, log: &mut dyn Write) -> Result<Manifest> {
    grid.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tok = Tokenizer::train(corpus, grid.base.vocab_size, grid.base.seed)?;
    tok.save(&out.join("tokenizer.json"))?;
    let cells = grid.cells();
    let mut records = Vec::new();
    let mut curves: BTreeMap<String, Vec<CurvePoint>> = BTreeMap::new();
    for cell in &cells {
        let _ = writeln!(log, "[grid] cell {}", cell.cell_id);
        let outcome = run_cell(grid, cell, corpus, &tok, out);
        let config_hash = cell.config.hash()?;
        let rec = match outcome {
            Ok((points, corpus_hash)) => {
                let last = points.last().cloned();
                let csv_rows: Vec<(&Cell, &CurvePoint)> = points.iter().map(|p| (cell, p)).collect();
                write_csv(&cell_dir(out, cell).join("curve.csv"), &csv_rows, true)?;
                curves.insert(cell.cell_id.clone(), points);
                CellRecord {
                    cell: cell.clone(),
                    config_hash,
                    corpus_hash: Some(corpus_hash),
                    status: "ok".into(),
                    error: None,
                    final_loss: last.as_ref().map(|p| p.loss),
                    final_ppl: last.as_ref().map(|p| p.ppl),
                }
            }
            Err(e) => {
                let _ = writeln!(log, "[grid] cell {} failed: {e}", cell.cell_id);
                CellRecord {
                    cell: cell.clone(),
                    config_hash,
                    corpus_hash: None,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    final_loss: None,
                    final_ppl: None,
                }
            }
        };
        records.push(rec);
    }
    let mut by_axis: BTreeMap<&str, Vec<(&Cell, &CurvePoint)>> = BTreeMap::new();
    for c in &cells {
        if let Some(points) = curves.get(&c.cell_id) {
            by_axis.entry(c.axis.as_str()).or_default().extend(points.iter().map(|p| (c, p)));
        }
    }
    for (axis, rows) in &by_axis {
        write_csv(&out.join(format!("study_{axis}.csv")), rows, true)?;
    }
    let manifest = Manifest { grid: grid.clone(), tokenizer_hash: tok.hash().to_string(), cells: records };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&out.join("manifest.json"), &bytes)?;
    Ok(manifest)
}

impl Manifest {
    /// Final metric of the `axis=value` cell for `seed`.
    pub fn final_of(&self, axis: &str, value: &str, seed: u64, ppl: bool) -> Option<f64> {
        self.cells
            .iter()
            .find(|r| r.cell.axis == axis && r.cell.value == value && r.cell.seed == seed)
            .and_then(|r| if ppl { r.final_ppl } else { r.final_loss })
    }
}

/// Number of paired entries with `a[i] < b[i]`.
pub fn sign_consistency(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x < y).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// The one config field changed from the base, with its new value.
    pub field: Option<String>,
    pub value: Option<String>,
    pub seeds: Vec<u64>,
    pub hits_at_1: Vec<f64>,
    pub mean_hits_at_1: f64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

/// Base config plus the three single-field variants.
pub fn ablation_variants(base: &RunConfig) -> Vec<(String, Option<(String, String)>, RunConfig)> {
    let mut prompts_off = base.clone();
    prompts_off.stage1.use_prompts = false;
    let mut trunc = base.clone();
    trunc.stage1.passage_trunc = base.stage1.target_max;
    let mut fewer = base.clone();
    fewer.augment.k = (base.augment.k / 2).max(1);
    vec![
        ("base".into(), None, base.clone()),
        ("prompts_off".into(), Some(("stage1.use_prompts".into(), "false".into())), prompts_off),
        ("trunc_raised".into(), Some(("stage1.passage_trunc".into(), trunc.stage1.passage_trunc.to_string())), trunc),
        ("queries_halved".into(), Some(("augment.k".into(), fewer.augment.k.to_string())), fewer),
    ]
}

/// Dev-query Hits@1 of the full two-stage pipeline under `cfg`.
pub fn two_stage_dev_hits(
    cfg: &RunConfig,
    corpus: &Corpus,
    queries: &[QueryRecord],
    tok: &Tokenizer,
    log: &mut dyn Write,
) -> Result<f64> {
    let (train_q, dev_q) = split_for(cfg, queries)?;
    let pseudo = build_augmented_set(corpus, &cfg.augment)?;
    let data = build_all(cfg, corpus, &training_sources(&pseudo, &train_q), tok)?;
    let models = train_two_stage(cfg, &data, tok, None, log)?;
    let results = retrieve_two_stage(cfg, &models, &dev_q, tok)?;
    Ok(hits_at_1(&results, &labels_from_queries(&dev_q, corpus)?)?.hits_at_1)
}

/// Train and evaluate every variant under every seed; writes
/// `ablations.csv` and `ablations.json`.
pub fn run_ablations(
    base: &RunConfig,
    corpus: &Corpus,
    queries: &[QueryRecord],
    seeds: &[u64],
    out: &Path,
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablations need at least one seed".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tok = Tokenizer::train(corpus, base.vocab_size, base.seed)?;
    let mut rows = Vec::new();
    for (variant, change, cfg) in ablation_variants(base) {
        cfg.validate()?;
        let mut hits = Vec::new();
        for &seed in seeds {
            let _ = writeln!(log, "[ablate] {variant} seed {seed}");
            hits.push(two_stage_dev_hits(&cfg.clone().with_seed(seed), corpus, queries, &tok, log)?);
        }
        let (field, value) = change.map_or((None, None), |(f, v)| (Some(f), Some(v)));
        rows.push(AblationRow {
            variant,
            field,
            value,
            seeds: seeds.to_vec(),
            mean_hits_at_1: hits.iter().sum::<f64>() / hits.len() as f64,
            hits_at_1: hits,
            stage1_steps: cfg.train_stage1.max_steps,
            stage2_steps: cfg.train_stage2.max_steps,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "field", "value", "seeds", "hits_at_1", "mean_hits_at_1", "stage1_steps", "stage2_steps"])?;
    for r in &rows {
        let join = |xs: Vec<String>| xs.join(";");
        w.write_record([
            r.variant.clone(),
            r.field.clone().unwrap_or_default(),
            r.value.clone().unwrap_or_default(),
            join(r.seeds.iter().map(|s| s.to_string()).collect()),
            join(r.hits_at_1.iter().map(|h| format!("{h:.4}")).collect()),
            format!("{:.4}", r.mean_hits_at_1),
            r.stage1_steps.to_string(),
            r.stage2_steps.to_string(),
        ])?;
    }
    write_atomic(&out.join("ablations.csv"), &w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)?;
    write_atomic(&out.join("ablations.json"), &serde_json::to_vec_pretty(&rows)?)?;
    Ok(rows)
}

/// Stage-1 perplexity of a freshly trained cell-style model, for callers
/// that need a single number without the grid bookkeeping.
pub fn stage1_ppl(cfg: &RunConfig, corpus: &Corpus, tok: &Tokenizer, eval_pairs: usize) -> Result<(f64, f64)> {
    let pseudo = build_augmented_set(corpus, &cfg.augment)?;
    let pairs = build_stage1(&pseudo, corpus, &cfg.stage1, tok)?;
    let eval = eval_sample(&pairs, eval_pairs, derive_seed(cfg.seed, "eval"));
    let spec = fit_spec(cfg, &cfg.stage1, &cfg.train_stage1, "stage1", tok, None);
    let (model, hist) = fit(&spec, &pairs, None, |_| Ok(()))?;
    let tail = hist.len().min(cfg.train_stage1.eval_every as usize).max(1);
    let loss = hist[hist.len() - tail..].iter().map(|s| s.loss).sum::<f64>() / tail as f64;
    Ok((perplexity(&model, &eval)?, loss))
}

/// Content hash of a grid definition, as recorded alongside results.
pub fn grid_hash(grid: &ExperimentGrid) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(grid)?.as_bytes()))
}
