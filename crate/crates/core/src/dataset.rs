//! Multi-label data: the sparse text format, candidate-set corruption and
//! cross-validation folds.
//!
//! The on-disk format has a header line `n d L` followed by one line per
//! example:
//!
//! ```text
//! <cand>|<truth> <idx>:<val> <idx>:<val> ...
//! ```
//!
//! `<cand>` is a non-empty comma-separated list of 0-based label ids,
//! `<truth>` is a (possibly empty) list of ground-truth ids used only for
//! evaluation, and the feature entries use 0-based, strictly increasing
//! indices. Omitted features are zero. Clean multi-label files repeat the
//! same list on both sides of the `|`.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Number of examples.
    pub n: usize,
    /// Feature dimensionality.
    pub d: usize,
    /// Number of labels.
    pub labels: usize,
}

impl DatasetMeta {
    pub fn new(n: usize, d: usize, labels: usize) -> Result<Self> {
        if n == 0 || d == 0 || labels < 2 {
            return Err(Error::data(format!(
                "need n >= 1, d >= 1, L >= 2 (got n={n}, d={d}, L={labels})"
            )));
        }
        Ok(Self { n, d, labels })
    }
}

/// Features plus candidate labels, and optionally ground truth.
///
/// Label matrices hold `0`/`1` bytes. When ground truth is present every true
/// label is also a candidate, and every example has at least one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    features: Array2<f64>,
    candidates: Array2<u8>,
    truth: Option<Array2<u8>>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        candidates: Array2<u8>,
        truth: Option<Array2<u8>>,
    ) -> Result<Self> {
        let meta = DatasetMeta::new(features.nrows(), features.ncols(), candidates.ncols())?;
        if candidates.nrows() != meta.n {
            return Err(Error::data(format!(
                "{} feature rows but {} candidate rows",
                meta.n,
                candidates.nrows()
            )));
        }
        if let Some(t) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite feature value {t}")));
        }
        if candidates.iter().any(|&v| v > 1) {
            return Err(Error::data("candidate matrix must be binary"));
        }
        for (i, row) in candidates.axis_iter(Axis(0)).enumerate() {
            if row.iter().all(|&v| v == 0) {
                return Err(Error::data(format!("example {i} has no candidate labels")));
            }
        }
        if let Some(truth) = &truth {
            if truth.dim() != candidates.dim() {
                return Err(Error::data("truth and candidate matrices differ in shape"));
            }
            if truth.iter().any(|&v| v > 1) {
                return Err(Error::data("truth matrix must be binary"));
            }
            for ((i, j), &t) in truth.indexed_iter() {
                if t > candidates[(i, j)] {
                    return Err(Error::data(format!(
                        "example {i}: true label {j} is not a candidate"
                    )));
                }
            }
        }
        Ok(Self {
            meta,
            features,
            candidates,
            truth,
        })
    }

    pub fn meta(&self) -> DatasetMeta {
        self.meta
    }

    pub fn len(&self) -> usize {
        self.meta.n
    }

    pub fn is_empty(&self) -> bool {
        self.meta.n == 0
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn candidates(&self) -> &Array2<u8> {
        &self.candidates
    }

    pub fn truth(&self) -> Option<&Array2<u8>> {
        self.truth.as_ref()
    }

    /// Candidate matrix as `0.0`/`1.0` reals.
    pub fn candidates_f64(&self) -> Array2<f64> {
        self.candidates.mapv(f64::from)
    }

    /// Indices of all-zero feature rows.
    pub fn zero_rows(&self) -> Vec<usize> {
        self.features
            .axis_iter(Axis(0))
            .enumerate()
            .filter(|(_, r)| r.iter().all(|&v| v == 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Scales every feature row to unit Euclidean norm. Zero rows stay zero
    /// and their count is returned.
    pub fn normalize_rows(&mut self) -> usize {
        let mut zero = 0;
        for mut row in self.features.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            } else {
                zero += 1;
            }
        }
        if zero > 0 {
            log::warn!("{zero} feature rows have zero norm and were left as zeros");
        }
        zero
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            meta: DatasetMeta {
                n: rows.len(),
                ..self.meta
            },
            features: self.features.select(Axis(0), rows),
            candidates: self.candidates.select(Axis(0), rows),
            truth: self.truth.as_ref().map(|t| t.select(Axis(0), rows)),
        }
    }
}

/// Reads a dataset file, optionally L2-normalizing the feature rows.
pub fn load_dataset(path: impl AsRef<Path>, normalize: bool) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    read_dataset(BufReader::new(file), normalize)
}

pub fn read_dataset<R: BufRead>(reader: R, normalize: bool) -> Result<Dataset> {
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));

    let (header_line, header) = match lines.next() {
        Some((no, line)) => (no, line?),
        None => return Err(Error::Parse { line: 1, message: "empty file".into() }),
    };
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(header_line, format!("bad header: {e}")))?;
    let [n, d, labels] = dims[..] else {
        return Err(parse_err(header_line, "header must be `n d L`"));
    };
    let meta = DatasetMeta::new(n, d, labels)
        .map_err(|e| parse_err(header_line, e.to_string()))?;

    let mut features = Array2::<f64>::zeros((n, d));
    let mut candidates = Array2::<u8>::zeros((n, labels));
    let mut truth = Array2::<u8>::zeros((n, labels));
    let mut any_truth = false;
    let mut row = 0;

    for (line_no, line) in lines {
        let line = line?;
        if row == n {
            return Err(parse_err(line_no, format!("more than {n} examples")));
        }
        let mut tokens = line.split_whitespace();
        let label_block = tokens.next().unwrap_or_default();
        let (cand, tru) = label_block
            .split_once('|')
            .ok_or_else(|| parse_err(line_no, "missing `|` between candidate and truth labels"))?;
        let cand = parse_labels(cand, meta.labels, line_no)?;
        if cand.is_empty() {
            return Err(parse_err(line_no, "candidate set is empty"));
        }
        let tru = parse_labels(tru, meta.labels, line_no)?;
        for &j in &cand {
            candidates[(row, j)] = 1;
        }
        for &j in &tru {
            if candidates[(row, j)] == 0 {
                return Err(parse_err(
                    line_no,
                    format!("true label {j} is not in the candidate set"),
                ));
            }
            truth[(row, j)] = 1;
            any_truth = true;
        }

        let mut last: Option<usize> = None;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(line_no, format!("bad feature entry `{tok}`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad feature index `{idx}`")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad feature value `{val}`")))?;
            if idx >= d {
                return Err(parse_err(line_no, format!("feature index {idx} >= d = {d}")));
            }
            if last.is_some_and(|p| idx <= p) {
                return Err(parse_err(line_no, "feature indices must be strictly increasing"));
            }
            if !val.is_finite() {
                return Err(parse_err(line_no, format!("non-finite feature value `{val}`")));
            }
            last = Some(idx);
            features[(row, idx)] = val;
        }
        row += 1;
    }
    if row != n {
        return Err(Error::Parse {
            line: header_line,
            message: format!("header declares {n} examples but file has {row}"),
        });
    }

    let mut data = Dataset::new(features, candidates, any_truth.then_some(truth))?;
    if normalize {
        data.normalize_rows();
    }
    Ok(data)
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_labels(block: &str, labels: usize, line: usize) -> Result<Vec<usize>> {
    if block.is_empty() {
        return Ok(Vec::new());
    }
    block
        .split(',')
        .map(|t| {
            let id: usize = t
                .parse()
                .map_err(|_| parse_err(line, format!("bad label id `{t}`")))?;
            if id >= labels {
                return Err(parse_err(line, format!("label id {id} >= L = {labels}")));
            }
            Ok(id)
        })
        .collect()
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_dataset(data, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Writes the text format. Floats use the shortest representation that
/// parses back to the same bits.
pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    let meta = data.meta;
    writeln!(w, "{} {} {}", meta.n, meta.d, meta.labels)?;
    let ids = |row: ndarray::ArrayView1<u8>| {
        row.iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(j, _)| j.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    for i in 0..meta.n {
        let cand = ids(data.candidates.row(i));
        let truth = data.truth.as_ref().map(|t| ids(t.row(i))).unwrap_or_default();
        write!(w, "{cand}|{truth}")?;
        for (j, &v) in data.features.row(i).iter().enumerate() {
            // positive zero is the implicit value; negative zero is kept
            if v.to_bits() != 0 {
                write!(w, " {j}:{v:?}")?;
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// False positives injected per example.
    pub r: usize,
    pub seed: u64,
}

/// Turns a clean multi-label dataset into a partial multi-label one.
///
/// For every example, `r` labels drawn uniformly without replacement from the
/// labels outside its true set are added to the candidates. When fewer than
/// `r` such labels exist the candidate set becomes the whole label space.
pub fn synthesize_pml(clean: &Dataset, cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.r == 0 {
        return Err(Error::config("r must be at least 1"));
    }
    let truth = clean
        .truth
        .as_ref()
        .ok_or_else(|| Error::data("corruption needs ground-truth labels"))?;
    if truth != &clean.candidates {
        return Err(Error::data(
            "corruption expects clean data (candidate sets equal to truth sets)",
        ));
    }
    let labels = clean.meta.labels;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut candidates = truth.clone();
    for (i, mut row) in candidates.axis_iter_mut(Axis(0)).enumerate() {
        let complement: Vec<usize> = (0..labels).filter(|&j| row[j] == 0).collect();
        if complement.len() == labels {
            return Err(Error::data(format!("example {i} has no true labels")));
        }
        if complement.len() < cfg.r {
            row.fill(1);
        } else {
            for pick in index::sample(&mut rng, complement.len(), cfg.r) {
                row[complement[pick]] = 1;
            }
        }
    }
    Dataset::new(clean.features.clone(), candidates, Some(truth.clone()))
}

/// Summary of candidate and truth cardinalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabelStats {
    pub mean_candidates: f64,
    pub mean_truth: f64,
    /// Examples whose candidate set covers every label.
    pub full_rows: usize,
}

impl LabelStats {
    pub fn of(data: &Dataset) -> Self {
        let n = data.len() as f64;
        let count = |m: &Array2<u8>| m.iter().map(|&v| v as f64).sum::<f64>() / n;
        let full_rows = data
            .candidates
            .axis_iter(Axis(0))
            .filter(|r| r.iter().all(|&v| v == 1))
            .count();
        Self {
            mean_candidates: count(&data.candidates),
            mean_truth: data.truth.as_ref().map_or(f64::NAN, count),
            full_rows,
        }
    }
}

/// Assignment of examples to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    fold_count: usize,
    assignments: Vec<usize>,
}

/// Uniform random partition into `fold_count` folds whose sizes differ by at
/// most one.
pub fn make_folds(n: usize, fold_count: usize, seed: u64) -> Result<FoldPlan> {
    if fold_count < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    if fold_count > n {
        return Err(Error::config(format!(
            "{fold_count} folds requested for only {n} examples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % fold_count;
    }
    Ok(FoldPlan {
        fold_count,
        assignments,
    })
}

impl FoldPlan {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.fold_count];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.indices_where(|f| f == fold)
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.indices_where(|f| f != fold)
    }

    fn indices_where(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, &f)| keep(f))
            .map(|(i, _)| i)
            .collect()
    }

    /// Hash of the assignment vector, for checking that runs share folds.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.fold_count.hash(&mut h);
        self.assignments.hash(&mut h);
        h.finish()
    }
}

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub labels: usize,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    pub seed: u64,
}

/// Generates a clean multi-label dataset with learnable structure.
///
/// Each label owns a Gaussian prototype. An example draws a primary label,
/// adds its neighbour label `(j + 1) mod L` with probability 0.5 and a random
/// extra label with probability 0.2; its features are the sum of the chosen
/// prototypes plus noise. Rows are L2-normalized.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    DatasetMeta::new(spec.n, spec.d, spec.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes = Array2::from_shape_fn((spec.labels, spec.d), |_| normal.sample(&mut rng));
    let mut features = Array2::<f64>::zeros((spec.n, spec.d));
    let mut truth = Array2::<u8>::zeros((spec.n, spec.labels));
    for i in 0..spec.n {
        let primary = rand::Rng::random_range(&mut rng, 0..spec.labels);
        truth[(i, primary)] = 1;
        if rand::Rng::random_bool(&mut rng, 0.5) {
            truth[(i, (primary + 1) % spec.labels)] = 1;
        }
        if rand::Rng::random_bool(&mut rng, 0.2) {
            truth[(i, rand::Rng::random_range(&mut rng, 0..spec.labels))] = 1;
        }
        let mut row = features.row_mut(i);
        for j in 0..spec.labels {
            if truth[(i, j)] == 1 {
                row += &prototypes.row(j);
            }
        }
        row.mapv_inplace(|v| v + spec.noise * normal.sample(&mut rng));
    }
    let mut data = Dataset::new(features, truth.clone(), Some(truth))?;
    data.normalize_rows();
    Ok(data)
}
