//! Experiment drivers: configuration, cross-validation, ablation, grid
//! search and stage timing, plus the files they write.
//!
//! Configuration is a flat set of `key=value` pairs. [`ExperimentConfig::set`]
//! accepts every key listed in [`KEYS`]; config files use one pair per line
//! with `#` comments.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, make_folds, synthesize_pml, Dataset, FoldPlan, SynthConfig};
use crate::error::{Error, ErrorKind, Result};
use crate::graph::GraphConfig;
use crate::metrics::{ranking_loss, EvalReport};
use crate::network::{LossKind, OptimizerConfig, Risk};
use crate::propagation::PropagationConfig;
use crate::trainer::{train_with_monitor, EpochRecord, Graphs, TrainConfig, TrainState, Variant};

pub const ALPHA_GRID: [f64; 3] = [0.001, 0.01, 0.1];
pub const BETA_GRID: [f64; 3] = [0.001, 0.01, 0.1];
pub const ETA_GRID: [f64; 3] = [0.1, 1.0, 10.0];

/// Datasets at least this large use the short propagation schedule.
pub const LARGE_SCALE_N: usize = 50_000;
pub const SMALL_SCALE_STEPS: usize = 200;
pub const LARGE_SCALE_STEPS: usize = 50;

/// Inner folds used by grid search; one of them is the validation split.
pub const GRID_INNER_FOLDS: usize = 5;

/// Every accepted configuration key.
pub const KEYS: &[&str] = &[
    "dataset",
    "variant",
    "k",
    "rho",
    "alpha",
    "beta",
    "eta",
    "gamma",
    "steps",
    "lr",
    "weight_decay",
    "loss",
    "epochs",
    "batch_size",
    "hidden",
    "folds",
    "seed",
    "r",
    "normalize",
    "normalize_features",
    "mse_on_logits",
    "propagate_on_logits",
    "label_graph_self_loops",
    "resample_per_fold",
    "grid",
    "threshold",
    "jobs",
    "out_dir",
    "dump_graphs",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub variant: Variant,
    pub k: usize,
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    /// Propagation steps per epoch; `None` picks by dataset size.
    pub steps: Option<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Option<[usize; 2]>,
    pub folds: usize,
    pub seed: u64,
    /// When set, the input is clean and `r` false positives are injected.
    pub r: Option<usize>,
    /// Min-max normalize pseudo-labels after each propagation.
    pub normalize: bool,
    pub normalize_features: bool,
    pub mse_on_logits: bool,
    pub propagate_on_logits: bool,
    pub label_graph_self_loops: bool,
    /// Re-draw the injected false positives for every fold.
    pub resample_per_fold: bool,
    /// Pick `alpha`, `beta`, `eta` by grid search before cross-validation.
    pub grid: bool,
    pub threshold: f64,
    pub jobs: usize,
    pub out_dir: PathBuf,
    pub dump_graphs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            variant: Variant::Plain,
            k: 10,
            rho: 3.0,
            alpha: 0.01,
            beta: 0.01,
            eta: 1.0,
            gamma: 0.01,
            steps: None,
            lr: 0.01,
            weight_decay: 5e-5,
            loss: LossKind::Bce,
            epochs: 100,
            batch_size: 128,
            hidden: None,
            folds: 10,
            seed: 0,
            r: None,
            normalize: true,
            normalize_features: true,
            mse_on_logits: true,
            propagate_on_logits: false,
            label_graph_self_loops: false,
            resample_per_fold: false,
            grid: false,
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            jobs: 1,
            out_dir: PathBuf::from("."),
            dump_graphs: false,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

fn is_auto(value: &str) -> bool {
    matches!(value.to_ascii_lowercase().as_str(), "auto" | "none" | "")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = PathBuf::from(v),
            "variant" => self.variant = v.parse()?,
            "k" => self.k = parse_num(key, v)?,
            "rho" => self.rho = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "eta" => self.eta = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "steps" => self.steps = if is_auto(v) { None } else { Some(parse_num(key, v)?) },
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "loss" => self.loss = v.parse()?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "hidden" => {
                self.hidden = if is_auto(v) {
                    None
                } else {
                    let (a, b) = v
                        .split_once(',')
                        .ok_or_else(|| Error::config("hidden: expected `auto` or `h1,h2`"))?;
                    Some([parse_num(key, a.trim())?, parse_num(key, b.trim())?])
                }
            }
            "folds" => self.folds = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "r" => self.r = if is_auto(v) { None } else { Some(parse_num(key, v)?) },
            "normalize" => self.normalize = parse_bool(key, v)?,
            "normalize_features" => self.normalize_features = parse_bool(key, v)?,
            "mse_on_logits" => self.mse_on_logits = parse_bool(key, v)?,
            "propagate_on_logits" => self.propagate_on_logits = parse_bool(key, v)?,
            "label_graph_self_loops" => self.label_graph_self_loops = parse_bool(key, v)?,
            "resample_per_fold" => self.resample_per_fold = parse_bool(key, v)?,
            "grid" => self.grid = parse_bool(key, v)?,
            "threshold" => self.threshold = parse_num(key, v)?,
            "jobs" => self.jobs = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "dump_graphs" => self.dump_graphs = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let opt = |o: Option<usize>| o.map_or("auto".to_string(), |v| v.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.display().to_string()),
            ("variant", self.variant.to_string()),
            ("k", self.k.to_string()),
            ("rho", format!("{:?}", self.rho)),
            ("alpha", format!("{:?}", self.alpha)),
            ("beta", format!("{:?}", self.beta)),
            ("eta", format!("{:?}", self.eta)),
            ("gamma", format!("{:?}", self.gamma)),
            ("steps", opt(self.steps)),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("loss", self.loss.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "hidden",
                self.hidden.map_or("auto".into(), |[a, b]| format!("{a},{b}")),
            ),
            ("folds", self.folds.to_string()),
            ("seed", self.seed.to_string()),
            ("r", opt(self.r)),
            ("normalize", self.normalize.to_string()),
            ("normalize_features", self.normalize_features.to_string()),
            ("mse_on_logits", self.mse_on_logits.to_string()),
            ("propagate_on_logits", self.propagate_on_logits.to_string()),
            ("label_graph_self_loops", self.label_graph_self_loops.to_string()),
            ("resample_per_fold", self.resample_per_fold.to_string()),
            ("grid", self.grid.to_string()),
            ("threshold", format!("{:?}", self.threshold)),
            ("jobs", self.jobs.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("dump_graphs", self.dump_graphs.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected key=value", no + 1))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be positive, got {}", self.rho));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if self.folds < 2 {
            return bad("folds must be >= 2".into());
        }
        if self.jobs == 0 {
            return bad("jobs must be >= 1".into());
        }
        if self.r == Some(0) {
            return bad("r must be >= 1".into());
        }
        if self.hidden.is_some_and(|[a, b]| a == 0 || b == 0) {
            return bad("hidden widths must be positive".into());
        }
        self.propagation(0).validate()?;
        self.optimizer(0).validate()
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            k: self.k,
            rho: self.rho,
        }
    }

    /// Steps per epoch for a dataset of `n` examples.
    pub fn steps_for(&self, n: usize) -> usize {
        self.steps.unwrap_or(if n >= LARGE_SCALE_N {
            LARGE_SCALE_STEPS
        } else {
            SMALL_SCALE_STEPS
        })
    }

    pub fn propagation(&self, n: usize) -> PropagationConfig {
        PropagationConfig {
            eta: self.eta,
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            steps: self.steps_for(n),
            normalize: self.normalize,
        }
    }

    pub fn optimizer(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed,
        }
    }

    /// Trainer settings; `n` is the full dataset size and `seed` the run's
    /// initialization seed.
    pub fn train_config(&self, n: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            propagation: self.propagation(n),
            optimizer: self.optimizer(seed),
            risk: Risk {
                kind: self.loss,
                mse_on_logits: self.mse_on_logits,
            },
            epochs: self.epochs,
            hidden: self.hidden,
            propagate_on_logits: self.propagate_on_logits,
            track_objective: false,
        }
    }

    fn with_hyper(&self, h: Hyper) -> Self {
        Self {
            alpha: h.alpha,
            beta: h.beta,
            eta: h.eta,
            ..self.clone()
        }
    }
}

/// The three propagation weights picked by grid search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

/// Seed of fold `fold`'s network initialization and batch order.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(fold as u64)
}

/// Loads the configured dataset and, when `r` is set, injects false
/// positives once with the run seed.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = load_dataset(&cfg.dataset, cfg.normalize_features)?;
    match cfg.r {
        Some(r) => synthesize_pml(&data, &SynthConfig { r, seed: cfg.seed }),
        None => Ok(data),
    }
}

/// The candidate sets used for one fold: the shared corruption, or a fresh
/// one drawn from the clean data when `resample_per_fold` is on.
struct DataSource {
    shared: Dataset,
    clean: Option<Dataset>,
}

impl DataSource {
    fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let raw = load_dataset(&cfg.dataset, cfg.normalize_features)?;
        let Some(r) = cfg.r else {
            return Ok(Self { shared: raw, clean: None });
        };
        let shared = synthesize_pml(&raw, &SynthConfig { r, seed: cfg.seed })?;
        let clean = cfg.resample_per_fold.then_some(raw);
        Ok(Self { shared, clean })
    }

    fn for_fold(&self, cfg: &ExperimentConfig, fold: usize) -> Result<Dataset> {
        match (&self.clean, cfg.r) {
            (Some(clean), Some(r)) => synthesize_pml(
                clean,
                &SynthConfig {
                    r,
                    seed: cfg.seed.wrapping_add(1000 + fold as u64),
                },
            ),
            _ => Ok(self.shared.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub graph_seconds: f64,
    pub propagation_seconds: f64,
    pub training_seconds: f64,
}

impl std::ops::AddAssign for StageTimings {
    fn add_assign(&mut self, o: Self) {
        self.graph_seconds += o.graph_seconds;
        self.propagation_seconds += o.propagation_seconds;
        self.training_seconds += o.training_seconds;
    }
}

/// How well the final pseudo-labels separate true from injected labels on
/// the training split: mean per-instance AUC against the ground truth, for
/// `Z` and for the raw candidate matrix `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disambiguation {
    pub pseudo_label_auc: f64,
    pub candidate_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub report: EvalReport,
    pub timing: StageTimings,
    pub disambiguation: Option<Disambiguation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ranking_loss: MeanStd,
    pub average_precision: MeanStd,
    pub hamming_loss: MeanStd,
}

impl Aggregate {
    pub fn of(folds: &[FoldResult]) -> Option<Self> {
        if folds.is_empty() {
            return None;
        }
        let col = |f: fn(&EvalReport) -> f64| {
            MeanStd::of(&folds.iter().map(|r| f(&r.report)).collect::<Vec<_>>())
        };
        Some(Self {
            ranking_loss: col(|r| r.ranking_loss),
            average_precision: col(|r| r.average_precision),
            hamming_loss: col(|r| r.hamming_loss),
        })
    }
}

/// One epoch of one fold, as written to `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub variant: Variant,
    pub fold: usize,
    pub record: EpochRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub hyper: Hyper,
    /// Validation average precision.
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub points: Vec<GridPoint>,
    pub best: GridPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    /// Config echo; feeding it back through [`ExperimentConfig::from_pairs`]
    /// reproduces the run.
    pub config: BTreeMap<String, String>,
    /// Propagation weights actually used.
    pub hyper: Hyper,
    pub grid: Option<GridResult>,
    /// Hex hash of the fold assignment.
    pub fold_fingerprint: String,
    pub folds: Vec<FoldResult>,
    pub aggregate: Option<Aggregate>,
    pub timing: StageTimings,
    /// Set when a fold failed; completed folds are still reported.
    pub truncated: bool,
    pub error: Option<String>,
    pub error_kind: Option<String>,
    #[serde(skip)]
    pub curves: Vec<CurveRow>,
}

impl RunResult {
    pub fn failure_kind(&self) -> Option<ErrorKind> {
        self.error_kind.as_deref().map(|k| match k {
            "usage" => ErrorKind::Usage,
            "numerical" => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        })
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn require_truth(data: &Dataset) -> Result<&ndarray::Array2<u8>> {
    data.truth()
        .ok_or_else(|| Error::data("evaluation needs ground-truth labels in the dataset"))
}

/// Trains one variant on `train` and evaluates on `test` after every epoch.
fn fit_and_evaluate(
    cfg: &ExperimentConfig,
    n_total: usize,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    variant: Variant,
    dump: Option<&Path>,
) -> Result<(TrainState, EvalReport, StageTimings)> {
    let test_truth = require_truth(test)?.view();
    let t0 = Instant::now();
    let graphs = if variant == Variant::DnnOnly {
        Graphs::trivial(train.len(), train.meta().labels)
    } else {
        Graphs::build(train, &cfg.graph(), cfg.label_graph_self_loops)?
    };
    let graph_seconds = t0.elapsed().as_secs_f64();
    if let Some(prefix) = dump {
        dump_graphs(&graphs, prefix)?;
    }

    let tc = cfg.train_config(n_total, seed);
    let threshold = cfg.threshold;
    let state = train_with_monitor(train, &graphs, &tc, variant, |s| {
        s.predict(test.features().view())
            .ok()
            .map(|scores| EvalReport::evaluate(scores.view(), test_truth, threshold))
    })?;
    let report = match state.history.last().and_then(|r| r.metrics) {
        Some(r) => r,
        None => {
            let scores = state.predict(test.features().view())?;
            EvalReport::evaluate(scores.view(), test_truth, threshold)
        }
    };
    let timing = StageTimings {
        graph_seconds,
        propagation_seconds: state.history.iter().map(|r| r.propagation_seconds).sum(),
        training_seconds: state.history.iter().map(|r| r.train_seconds).sum(),
    };
    Ok((state, report, timing))
}

fn dump_graphs(graphs: &Graphs, prefix: &Path) -> Result<()> {
    if let Some(dir) = prefix.parent() {
        fs::create_dir_all(dir)?;
    }
    for (name, lap) in [("instance", &graphs.instance), ("label", &graphs.label)] {
        let path = PathBuf::from(format!("{}_{name}.coo", prefix.display()));
        let mut w = BufWriter::new(File::create(path)?);
        lap.adjacency().write_coo(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Mean per-instance AUC (one minus ranking loss) of `scores` against `truth`.
pub fn mean_auc(scores: ndarray::ArrayView2<f64>, truth: ndarray::ArrayView2<u8>) -> f64 {
    1.0 - ranking_loss(scores, truth).value
}

fn run_fold(
    cfg: &ExperimentConfig,
    source: &DataSource,
    plan: &FoldPlan,
    fold: usize,
    variant: Variant,
) -> Result<(FoldResult, Vec<CurveRow>)> {
    let data = source.for_fold(cfg, fold)?;
    let train = data.subset(&plan.train_indices(fold));
    let test = data.subset(&plan.test_indices(fold));
    let dump = cfg
        .dump_graphs
        .then(|| cfg.out_dir.join("graphs").join(format!("{variant}_fold{fold}")));
    let (state, report, timing) = fit_and_evaluate(
        cfg,
        data.len(),
        fold_seed(cfg.seed, fold),
        &train,
        &test,
        variant,
        dump.as_deref(),
    )?;
    let disambiguation = train.truth().map(|t| Disambiguation {
        pseudo_label_auc: mean_auc(state.pseudo_labels.view(), t.view()),
        candidate_auc: mean_auc(train.candidates_f64().view(), t.view()),
    });
    let curves = state
        .history
        .into_iter()
        .map(|record| CurveRow { variant, fold, record })
        .collect();
    Ok((
        FoldResult {
            fold,
            train_size: train.len(),
            test_size: test.len(),
            report,
            timing,
            disambiguation,
        },
        curves,
    ))
}

fn run_variant(
    cfg: &ExperimentConfig,
    source: &DataSource,
    plan: &FoldPlan,
    variant: Variant,
    grid: Option<GridResult>,
) -> Result<RunResult> {
    let cfg = ExperimentConfig {
        variant,
        ..cfg.clone()
    };
    let outcomes: Vec<Result<(FoldResult, Vec<CurveRow>)>> = with_pool(cfg.jobs, || {
        (0..plan.fold_count())
            .into_par_iter()
            .map(|f| run_fold(&cfg, source, plan, f, variant))
            .collect()
    })?;

    let mut folds = Vec::new();
    let mut curves = Vec::new();
    let mut failure = None;
    for outcome in outcomes {
        match outcome {
            Ok((fold, rows)) if failure.is_none() => {
                folds.push(fold);
                curves.extend(rows);
            }
            Ok(_) => {}
            Err(e) => {
                log::error!("{variant}: fold failed: {e}");
                failure.get_or_insert(e);
            }
        }
    }
    let mut timing = StageTimings::default();
    for f in &folds {
        timing += f.timing;
    }
    let mut config = cfg.to_pairs();
    config.insert("variant".into(), variant.to_string());
    Ok(RunResult {
        variant,
        config,
        hyper: Hyper {
            alpha: cfg.alpha,
            beta: cfg.beta,
            eta: cfg.eta,
        },
        grid,
        fold_fingerprint: format!("{:016x}", plan.fingerprint()),
        aggregate: Aggregate::of(&folds),
        folds,
        timing,
        truncated: failure.is_some(),
        error_kind: failure.as_ref().map(|e| kind_name(e.kind()).to_string()),
        error: failure.map(|e| e.to_string()),
        curves,
    })
}

/// Runs grid search on the training part of fold 0 when `cfg.grid` is set
/// and returns the config to use for every fold.
fn select_hyper(
    cfg: &ExperimentConfig,
    source: &DataSource,
    plan: &FoldPlan,
) -> Result<(ExperimentConfig, Option<GridResult>)> {
    if !cfg.grid {
        return Ok((cfg.clone(), None));
    }
    let pool = source.shared.subset(&plan.train_indices(0));
    let grid = grid_search(cfg, &pool, source.shared.len())?;
    log::info!(
        "grid search picked alpha={} beta={} eta={} (validation AP {:.4})",
        grid.best.hyper.alpha,
        grid.best.hyper.beta,
        grid.best.hyper.eta,
        grid.best.average_precision
    );
    Ok((cfg.with_hyper(grid.best.hyper), Some(grid)))
}

/// Cross-validates `cfg.variant`.
pub fn run_cv(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let source = DataSource::open(cfg)?;
    require_truth(&source.shared)?;
    let plan = make_folds(source.shared.len(), cfg.folds, cfg.seed)?;
    let (tuned, grid) = select_hyper(cfg, &source, &plan)?;
    let mut result = run_variant(&tuned, &source, &plan, cfg.variant, grid)?;
    result.config = cfg.to_pairs();
    Ok(result)
}

/// Cross-validates the full method and its three ablations on shared folds,
/// seeds and propagation weights.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let source = DataSource::open(cfg)?;
    require_truth(&source.shared)?;
    let plan = make_folds(source.shared.len(), cfg.folds, cfg.seed)?;
    let (tuned, grid) = select_hyper(cfg, &source, &plan)?;
    Variant::ABLATIONS
        .iter()
        .map(|&v| {
            let mut r = run_variant(&tuned, &source, &plan, v, grid.clone())?;
            r.config = ExperimentConfig {
                variant: v,
                ..cfg.clone()
            }
            .to_pairs();
            Ok(r)
        })
        .collect()
}

/// Scores every `(alpha, beta, eta)` combination of the standard grids by
/// average precision on a held-out inner fold of `data`. Ties keep the
/// earlier grid point. `n_total` sizes the propagation schedule.
pub fn grid_search(cfg: &ExperimentConfig, data: &Dataset, n_total: usize) -> Result<GridResult> {
    let plan = make_folds(data.len(), GRID_INNER_FOLDS, cfg.seed ^ 0x6772_6964)?;
    let train = data.subset(&plan.train_indices(0));
    let valid = data.subset(&plan.test_indices(0));
    let truth = require_truth(&valid)?.view();
    let graphs = Graphs::build(&train, &cfg.graph(), cfg.label_graph_self_loops)?;
    let combos: Vec<Hyper> = ALPHA_GRID
        .iter()
        .flat_map(|&alpha| {
            BETA_GRID.iter().flat_map(move |&beta| {
                ETA_GRID.iter().map(move |&eta| Hyper { alpha, beta, eta })
            })
        })
        .collect();
    let points: Vec<Result<GridPoint>> = with_pool(cfg.jobs, || {
        combos
            .par_iter()
            .map(|&hyper| {
                let tc = cfg.with_hyper(hyper).train_config(n_total, cfg.seed);
                let state = crate::trainer::train(&train, &graphs, &tc, cfg.variant)?;
                let scores = state.predict(valid.features().view())?;
                let report = EvalReport::evaluate(scores.view(), truth, cfg.threshold);
                Ok(GridPoint {
                    hyper,
                    average_precision: report.average_precision,
                })
            })
            .collect()
    })?;
    let points = points.into_iter().collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .copied()
        .reduce(|best, p| if p.average_precision > best.average_precision { p } else { best })
        .expect("grid is non-empty");
    Ok(GridResult { points, best })
}

/// Grid search on the training part of outer fold 0, as `cv grid=true` does.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridResult> {
    cfg.validate()?;
    let source = DataSource::open(cfg)?;
    let plan = make_folds(source.shared.len(), cfg.folds, cfg.seed)?;
    let pool = source.shared.subset(&plan.train_indices(0));
    grid_search(cfg, &pool, source.shared.len())
}

/// Outcome of [`run_train`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    /// Final test metrics, when a test set was given.
    pub report: Option<EvalReport>,
    pub graph_seconds: f64,
}

/// Trains on the whole dataset. When `test` is given, reports its metrics
/// after every epoch.
pub fn run_train(cfg: &ExperimentConfig, test: Option<&Dataset>) -> Result<TrainRun> {
    cfg.validate()?;
    let data = load_experiment_data(cfg)?;
    let t0 = Instant::now();
    let graphs = if cfg.variant == Variant::DnnOnly {
        Graphs::trivial(data.len(), data.meta().labels)
    } else {
        Graphs::build(&data, &cfg.graph(), cfg.label_graph_self_loops)?
    };
    let graph_seconds = t0.elapsed().as_secs_f64();
    if cfg.dump_graphs {
        dump_graphs(&graphs, &cfg.out_dir.join("graphs").join("train"))?;
    }
    if let Some(t) = test {
        require_truth(t)?;
        if t.meta().d != data.meta().d || t.meta().labels != data.meta().labels {
            return Err(Error::data("test file dimensions differ from the training file"));
        }
    }
    let tc = cfg.train_config(data.len(), cfg.seed);
    let state = train_with_monitor(&data, &graphs, &tc, cfg.variant, |s| {
        let t = test?;
        let scores = s.predict(t.features().view()).ok()?;
        Some(EvalReport::evaluate(scores.view(), t.truth()?.view(), cfg.threshold))
    })?;
    let report = state.history.last().and_then(|r| r.metrics);
    Ok(TrainRun {
        state,
        report,
        graph_seconds,
    })
}

/// Summary of a full-data training run, as written to `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: BTreeMap<String, String>,
    pub epochs: usize,
    pub final_deep_loss: Option<f64>,
    pub report: Option<EvalReport>,
    pub timing: StageTimings,
}

/// Writes `results.json` and `curves.csv` for [`run_train`].
pub fn write_train_outputs(cfg: &ExperimentConfig, run: &TrainRun, dir: &Path) -> Result<()> {
    let state = &run.state;
    let summary = TrainSummary {
        config: cfg.to_pairs(),
        epochs: state.history.len(),
        final_deep_loss: state.history.last().map(|r| r.deep_loss),
        report: run.report,
        timing: StageTimings {
            graph_seconds: run.graph_seconds,
            propagation_seconds: state.history.iter().map(|r| r.propagation_seconds).sum(),
            training_seconds: state.history.iter().map(|r| r.train_seconds).sum(),
        },
    };
    let mut w = create(dir, "results.json")?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    w.flush()?;
    let rows: Vec<CurveRow> = state
        .history
        .iter()
        .map(|record| CurveRow {
            variant: cfg.variant,
            fold: 0,
            record: record.clone(),
        })
        .collect();
    let mut w = create(dir, "curves.csv")?;
    write_curves(&rows, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Wall-clock cost of the three stages on the whole dataset, in
/// microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub dataset: String,
    pub n: usize,
    pub d: usize,
    pub labels: usize,
    pub graph_building_us: f64,
    pub label_propagation_us: f64,
    pub model_training_us: f64,
}

pub fn run_timing(cfg: &ExperimentConfig) -> Result<TimingReport> {
    cfg.validate()?;
    let data = load_experiment_data(cfg)?;
    time_stages(cfg, &data, &cfg.dataset.display().to_string())
}

/// Times graph construction, one training epoch and one propagation epoch.
pub fn time_stages(cfg: &ExperimentConfig, data: &Dataset, name: &str) -> Result<TimingReport> {
    let t0 = Instant::now();
    let graphs = Graphs::build(data, &cfg.graph(), cfg.label_graph_self_loops)?;
    let graph_seconds = t0.elapsed().as_secs_f64();
    let tc = TrainConfig {
        epochs: 1,
        ..cfg.train_config(data.len(), cfg.seed)
    };
    let state = crate::trainer::train(data, &graphs, &tc, Variant::Plain)?;
    let rec = &state.history[0];
    let meta = data.meta();
    Ok(TimingReport {
        dataset: name.to_string(),
        n: meta.n,
        d: meta.d,
        labels: meta.labels,
        graph_building_us: graph_seconds * 1e6,
        label_propagation_us: rec.propagation_seconds * 1e6,
        model_training_us: rec.train_seconds * 1e6,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

pub const CURVES_HEADER: &str = "variant,fold,epoch,deep_loss,prop_objective_start,prop_objective_end,\
train_seconds,propagation_seconds,test_ranking_loss,test_average_precision,test_hamming_loss";

pub fn write_curves<W: Write>(rows: &[CurveRow], mut w: W) -> Result<()> {
    writeln!(w, "{CURVES_HEADER}")?;
    for row in rows {
        let r = &row.record;
        let m = r.metrics;
        writeln!(
            w,
            "{},{},{},{:?},{},{},{:?},{:?},{},{},{}",
            row.variant,
            row.fold,
            r.epoch,
            r.deep_loss,
            fmt_opt(r.prop_objective_start),
            fmt_opt(r.prop_objective_end),
            r.train_seconds,
            r.propagation_seconds,
            fmt_opt(m.map(|m| m.ranking_loss)),
            fmt_opt(m.map(|m| m.average_precision)),
            fmt_opt(m.map(|m| m.hamming_loss)),
        )?;
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes `results.json` and `curves.csv` for a cross-validation run.
pub fn write_cv_outputs(result: &RunResult, dir: &Path) -> Result<()> {
    let mut w = create(dir, "results.json")?;
    serde_json::to_writer_pretty(&mut w, result)?;
    writeln!(w)?;
    w.flush()?;
    let mut w = create(dir, "curves.csv")?;
    write_curves(&result.curves, &mut w)?;
    w.flush()?;
    Ok(())
}

/// One line per variant with mean ± std of each metric.
pub fn ablation_table(results: &[RunResult]) -> String {
    let mut out = String::from("variant,ranking_loss,ranking_loss_std,average_precision,average_precision_std,hamming_loss,hamming_loss_std\n");
    for r in results {
        match &r.aggregate {
            Some(a) => out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.variant,
                a.ranking_loss.mean,
                a.ranking_loss.std,
                a.average_precision.mean,
                a.average_precision.std,
                a.hamming_loss.mean,
                a.hamming_loss.std
            )),
            None => out.push_str(&format!("{},,,,,,\n", r.variant)),
        }
    }
    out
}

/// Writes `results.json` (all runs), `curves.csv` and `ablation.csv`.
pub fn write_ablation_outputs(results: &[RunResult], dir: &Path) -> Result<()> {
    let mut w = create(dir, "results.json")?;
    serde_json::to_writer_pretty(&mut w, &serde_json::json!({ "runs": results }))?;
    writeln!(w)?;
    w.flush()?;
    let rows: Vec<CurveRow> = results.iter().flat_map(|r| r.curves.iter().cloned()).collect();
    let mut w = create(dir, "curves.csv")?;
    write_curves(&rows, &mut w)?;
    w.flush()?;
    let mut w = create(dir, "ablation.csv")?;
    w.write_all(ablation_table(results).as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn write_timing_csv<W: Write>(reports: &[TimingReport], mut w: W) -> Result<()> {
    writeln!(w, "dataset,n,d,labels,graph_building_us,label_propagation_us,model_training_us")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{:.1},{:.1},{:.1}",
            r.dataset, r.n, r.d, r.labels, r.graph_building_us, r.label_propagation_us, r.model_training_us
        )?;
    }
    Ok(())
}
