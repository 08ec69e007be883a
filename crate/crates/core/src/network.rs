//! Three-layer fully-connected classifier trained with plain SGD.
//!
//! `d → h₁ → h₂ → L` with rectifier hidden activations and raw logits at the
//! output. Predictions are `σ(logits)`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// Layer widths `[d, h₁, h₂, L]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims(pub [usize; 4]);

impl NetworkDims {
    /// Hidden widths picked from the label count: 64 below 64 labels, 256
    /// below 256 labels, 512 otherwise.
    pub fn for_task(input: usize, labels: usize) -> Self {
        let h = match labels {
            0..64 => 64,
            64..256 => 256,
            _ => 512,
        };
        Self([input, h, h, labels])
    }

    pub fn input(&self) -> usize {
        self.0[0]
    }

    pub fn output(&self) -> usize {
        self.0[3]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Mae,
    Bce,
    Pmse,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Mse, LossKind::Mae, LossKind::Bce, LossKind::Pmse];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Bce => "bce",
            LossKind::Pmse => "pmse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "bce" => Ok(LossKind::Bce),
            "pmse" => Ok(LossKind::Pmse),
            _ => Err(Error::config(format!("unknown loss `{s}` (mse, mae, bce, pmse)"))),
        }
    }
}

/// A loss kind together with the output mapping it acts on.
///
/// BCE and PMSE always work through the sigmoid. MSE and MAE act on the raw
/// logits when `mse_on_logits` is set (the network is then an unbounded
/// regressor and its scores are the logits clipped to `[0, 1]`); otherwise
/// they act on `σ(logits)`, which makes MSE identical to PMSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Risk {
    pub kind: LossKind,
    pub mse_on_logits: bool,
}

impl Risk {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            mse_on_logits: true,
        }
    }

    fn on_logits(&self) -> bool {
        self.mse_on_logits && matches!(self.kind, LossKind::Mse | LossKind::Mae)
    }

    /// Maps logits to scores in `[0, 1]`.
    pub fn scores(&self, logits: ArrayView2<f64>) -> Array2<f64> {
        if self.on_logits() {
            logits.mapv(|v| v.clamp(0.0, 1.0))
        } else {
            logits.mapv(sigmoid)
        }
    }

    /// Mean over the batch of the per-example loss summed over labels.
    pub fn value(&self, logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
        let on_logits = self.on_logits();
        let total = Zip::from(logits).and(targets).fold(0.0, |acc, &x, &z| {
            acc + match self.kind {
                LossKind::Bce => softplus(x) - z * x,
                LossKind::Pmse => (sigmoid(x) - z).powi(2),
                LossKind::Mse if on_logits => (x - z).powi(2),
                LossKind::Mse => (sigmoid(x) - z).powi(2),
                LossKind::Mae if on_logits => (x - z).abs(),
                LossKind::Mae => (sigmoid(x) - z).abs(),
            }
        });
        total / logits.nrows() as f64
    }

    /// Gradient of [`Risk::value`] with respect to the logits.
    pub fn logit_gradient(&self, logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Array2<f64> {
        let on_logits = self.on_logits();
        let scale = 1.0 / logits.nrows() as f64;
        let mut g = Array2::zeros(logits.dim());
        Zip::from(&mut g)
            .and(logits)
            .and(targets)
            .for_each(|g, &x, &z| {
                let s = sigmoid(x);
                *g = scale
                    * match self.kind {
                        LossKind::Bce => s - z,
                        LossKind::Pmse => 2.0 * (s - z) * s * (1.0 - s),
                        LossKind::Mse if on_logits => 2.0 * (x - z),
                        LossKind::Mse => 2.0 * (s - z) * s * (1.0 - s),
                        LossKind::Mae if on_logits => sign(x - z),
                        LossKind::Mae => sign(s - z) * s * (1.0 - s),
                    };
            });
        g
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// L2 penalty applied to weight matrices, not biases.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 5e-5,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array2<f64>,
    /// `σ(logits)`.
    pub probabilities: Array2<f64>,
}

/// Per-layer gradients, laid out like [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// All entries, layer by layer: weight (row-major) then bias.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: NetworkDims,
    /// `out × in` per layer.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: NetworkDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(dims);
        for w in &mut net.weights {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            w.mapv_inplace(|_| dist.sample(&mut rng));
        }
        net
    }

    pub fn zeros(dims: NetworkDims) -> Self {
        let widths = dims.0;
        Self {
            dims,
            weights: (0..3).map(|l| Array2::zeros((widths[l + 1], widths[l]))).collect(),
            biases: (0..3).map(|l| Array1::zeros(widths[l + 1])).collect(),
        }
    }

    pub fn dims(&self) -> NetworkDims {
        self.dims
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Array2::len).sum::<usize>()
            + self.biases.iter().map(Array1::len).sum::<usize>()
    }

    /// Parameters in the same order as [`Gradients::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::data(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            w.iter_mut().chain(b.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        check_shape("network input", (x.nrows(), self.dims.input()), x.dim())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        self.check_input(x)?;
        let logits = self.activations(x).pop().expect("three layers");
        let probabilities = logits.mapv(sigmoid);
        Ok(Forward {
            logits,
            probabilities,
        })
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().expect("three layers"))
    }

    /// Layer outputs after activation: `[h₁, h₂, logits]`.
    fn activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(3);
        for l in 0..3 {
            let input = if l == 0 { x } else { outs[l - 1].view() };
            let mut h = input.dot(&self.weights[l].t());
            h += &self.biases[l];
            if l < 2 {
                h.mapv_inplace(|v| v.max(0.0));
            }
            outs.push(h);
        }
        outs
    }

    /// Loss on the batch and the gradient of the data term. Weight decay is
    /// not included; [`Mlp::sgd_step`] applies it.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        targets: ArrayView2<f64>,
        risk: &Risk,
    ) -> Result<(f64, Gradients)> {
        self.check_input(x)?;
        check_shape("targets", (x.nrows(), self.dims.output()), targets.dim())?;
        let acts = self.activations(x);
        let logits = acts[2].view();
        let loss = risk.value(logits, targets);

        let mut weights = vec![Array2::zeros((0, 0)); 3];
        let mut biases = vec![Array1::zeros(0); 3];
        let mut delta = risk.logit_gradient(logits, targets);
        for l in (0..3).rev() {
            let input = if l == 0 { x } else { acts[l - 1].view() };
            weights[l] = delta.t().dot(&input);
            biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.weights[l]);
                Zip::from(&mut back)
                    .and(&acts[l - 1])
                    .for_each(|g, &h| if h <= 0.0 { *g = 0.0 });
                delta = back;
            }
        }
        Ok((loss, Gradients { weights, biases }))
    }

    /// `θ ← θ − lr (g + λθ)`, with the decay term on weights only.
    pub fn sgd_step(&mut self, grads: &Gradients, cfg: &OptimizerConfig) {
        let lr = cfg.learning_rate;
        let decay = cfg.weight_decay;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            Zip::from(w).and(g).for_each(|w, &g| *w -= lr * (g + decay * *w));
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            b.scaled_add(-lr, g);
        }
    }

    /// Text checkpoint:
    ///
    /// ```text
    /// plain-mlp 1
    /// dims <d> <h1> <h2> <L>
    /// <weights of layer 0, one row per line>
    /// <bias of layer 0 on one line>
    /// ... layers 1 and 2 ...
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let [a, b, c, d] = self.dims.0;
        writeln!(w, "plain-mlp 1")?;
        writeln!(w, "dims {a} {b} {c} {d}")?;
        let line = |vals: ndarray::ArrayView1<f64>| {
            vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
        };
        for (weight, bias) in self.weights.iter().zip(&self.biases) {
            for row in weight.axis_iter(Axis(0)) {
                writeln!(w, "{}", line(row))?;
            }
            writeln!(w, "{}", line(bias.view()))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((no, l)) => Ok((no, l?)),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("checkpoint ends before {what}"),
                }),
            }
        };
        let (no, magic) = next("header")?;
        if magic.trim() != "plain-mlp 1" {
            return Err(Error::Parse { line: no, message: "not a plain-mlp v1 checkpoint".into() });
        }
        let (no, dims_line) = next("dims")?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::Parse { line: no, message: "expected `dims`".into() })?
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: no, message: format!("bad dims: {e}") })?;
        let dims: [usize; 4] = dims
            .try_into()
            .map_err(|_| Error::Parse { line: no, message: "expected four widths".into() })?;
        let mut net = Self::zeros(NetworkDims(dims));
        let parse_row = |no: usize, text: &str, len: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = text
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { line: no, message: format!("bad value: {e}") })?;
            if vals.len() != len {
                return Err(Error::Parse {
                    line: no,
                    message: format!("expected {len} values, found {}", vals.len()),
                });
            }
            Ok(vals)
        };
        for l in 0..3 {
            let cols = net.weights[l].ncols();
            for r in 0..net.weights[l].nrows() {
                let (no, text) = next("weights")?;
                let vals = parse_row(no, &text, cols)?;
                net.weights[l].row_mut(r).assign(&Array1::from(vals));
            }
            let (no, text) = next("bias")?;
            let vals = parse_row(no, &text, net.biases[l].len())?;
            net.biases[l].assign(&Array1::from(vals));
        }
        Ok(net)
    }
}
