//! The alternating training loop.
//!
//! Every epoch first makes one SGD pass of the network over the training set
//! against the current pseudo-labels `Z`, then recomputes the network output
//! on the whole training set and runs `T` propagation steps on `Z`. `Z`
//! starts at the candidate matrix and persists across epochs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{
    build_instance_graph, build_label_graph, GraphConfig, NormalizedLaplacian,
};
use crate::metrics::EvalReport;
use crate::network::{Mlp, NetworkDims, OptimizerConfig, Risk};
use crate::propagation::{
    propagate, propagate_to_convergence, propagation_objective, PropagationConfig,
    PropagationProblem,
};

/// Convergence criterion of the two-stage variant's propagation.
pub const TWO_STAGE_TOL: f64 = 1e-6;
pub const TWO_STAGE_MAX_STEPS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full method: both graphs, alternating updates.
    Plain,
    /// Network trained directly on the candidate matrix.
    DnnOnly,
    /// Label graph disabled (`β = 0`).
    NoLabelSim,
    /// Instance graph disabled (`α = 0`).
    NoInstanceSim,
    /// Propagate to convergence once against `Ŷ = Y`, then fit the network
    /// to the frozen result.
    TwoStage,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [
        Variant::Plain,
        Variant::DnnOnly,
        Variant::NoLabelSim,
        Variant::NoInstanceSim,
    ];

    /// Propagation settings with this variant's regularizers switched off.
    pub fn propagation(&self, base: &PropagationConfig) -> PropagationConfig {
        match self {
            Variant::NoLabelSim => PropagationConfig { beta: 0.0, ..*base },
            Variant::NoInstanceSim => PropagationConfig { alpha: 0.0, ..*base },
            _ => *base,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::DnnOnly => "dnn_only",
            Variant::NoLabelSim => "no_label_sim",
            Variant::NoInstanceSim => "no_instance_sim",
            Variant::TwoStage => "two_stage",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "plain" => Ok(Variant::Plain),
            "dnn_only" | "dnn" => Ok(Variant::DnnOnly),
            "no_label_sim" => Ok(Variant::NoLabelSim),
            "no_instance_sim" => Ok(Variant::NoInstanceSim),
            "two_stage" => Ok(Variant::TwoStage),
            _ => Err(Error::config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub propagation: PropagationConfig,
    pub optimizer: OptimizerConfig,
    pub risk: Risk,
    pub epochs: usize,
    /// Hidden widths; `None` picks them from the label count.
    pub hidden: Option<[usize; 2]>,
    /// Feed raw logits instead of `σ(logits)` to propagation.
    pub propagate_on_logits: bool,
    /// Record the combined objective around each half-step (three extra
    /// forward passes per epoch).
    pub track_objective: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            propagation: PropagationConfig::default(),
            optimizer: OptimizerConfig::default(),
            risk: Risk::new(crate::network::LossKind::Bce),
            epochs: 100,
            hidden: None,
            propagate_on_logits: false,
            track_objective: false,
        }
    }
}

/// Laplacians of the instance and label graphs of one training split.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub instance: NormalizedLaplacian,
    pub label: NormalizedLaplacian,
}

impl Graphs {
    pub fn build(data: &Dataset, cfg: &GraphConfig, label_self_loops: bool) -> Result<Self> {
        let instance = build_instance_graph(data.features().view(), cfg)?;
        let label = build_label_graph(data.candidates().view(), label_self_loops);
        Ok(Self {
            instance: NormalizedLaplacian::new(instance),
            label: NormalizedLaplacian::new(label),
        })
    }

    /// Identity Laplacians; enough for variants that never propagate.
    pub fn trivial(n: usize, labels: usize) -> Self {
        Self {
            instance: NormalizedLaplacian::identity(n),
            label: NormalizedLaplacian::identity(labels),
        }
    }
}

/// `L(θ, Z)` before the network update, after it, and after propagation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveChain {
    pub start: f64,
    pub after_model: f64,
    pub after_propagation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-example training loss over the epoch's batches.
    pub deep_loss: f64,
    pub prop_objective_start: Option<f64>,
    pub prop_objective_end: Option<f64>,
    pub objective: Option<ObjectiveChain>,
    pub train_seconds: f64,
    pub propagation_seconds: f64,
    pub metrics: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub model: Mlp,
    /// Pseudo-labels `Z`, n × L.
    pub pseudo_labels: Array2<f64>,
    pub history: Vec<EpochRecord>,
    pub risk: Risk,
}

impl TrainState {
    /// Scores in `[0, 1]` for new instances; no graph is involved.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict(&self.model, &self.risk, features)
    }
}

pub fn predict(model: &Mlp, risk: &Risk, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(risk.scores(model.logits(features)?.view()))
}

/// `½‖Z − σ(f(X; θ))‖² + J(Z, Y)`: the propagation objective with the
/// network's probabilities in place of `Ŷ`.
pub fn combined_objective(
    model: &Mlp,
    features: ArrayView2<f64>,
    z: ArrayView2<f64>,
    candidates: ArrayView2<f64>,
    graphs: &Graphs,
    cfg: &PropagationConfig,
) -> Result<f64> {
    let probs = model.forward(features)?.probabilities;
    let problem = PropagationProblem {
        predictions: probs.view(),
        candidates,
        instance: &graphs.instance,
        label: &graphs.label,
    };
    propagation_objective(z, &problem, cfg)
}

pub fn train(
    data: &Dataset,
    graphs: &Graphs,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<TrainState> {
    train_with_monitor(data, graphs, cfg, variant, |_| None)
}

/// Like [`train`], calling `monitor` after every epoch; a returned report is
/// stored in that epoch's record.
pub fn train_with_monitor(
    data: &Dataset,
    graphs: &Graphs,
    cfg: &TrainConfig,
    variant: Variant,
    mut monitor: impl FnMut(&TrainState) -> Option<EvalReport>,
) -> Result<TrainState> {
    cfg.propagation.validate()?;
    cfg.optimizer.validate()?;
    let meta = data.meta();
    if graphs.instance.dim() != meta.n || graphs.label.dim() != meta.labels {
        return Err(Error::data("graphs were not built on this training split"));
    }
    let features = data.features().view();
    let candidates = data.candidates_f64();
    let prop_cfg = variant.propagation(&cfg.propagation);
    let dims = match cfg.hidden {
        Some([a, b]) => NetworkDims([meta.d, a, b, meta.labels]),
        None => NetworkDims::for_task(meta.d, meta.labels),
    };

    let mut state = TrainState {
        epoch: 0,
        model: Mlp::init(dims, cfg.optimizer.seed),
        pseudo_labels: candidates.clone(),
        history: Vec::with_capacity(cfg.epochs),
        risk: cfg.risk,
    };

    if variant == Variant::TwoStage {
        let problem = PropagationProblem {
            predictions: candidates.view(),
            candidates: candidates.view(),
            instance: &graphs.instance,
            label: &graphs.label,
        };
        let out = propagate_to_convergence(
            candidates.clone(),
            &problem,
            &prop_cfg,
            TWO_STAGE_TOL,
            TWO_STAGE_MAX_STEPS,
        )?;
        state.pseudo_labels = out.labels;
    }

    let propagates = variant != Variant::DnnOnly && variant != Variant::TwoStage;
    let objective = |model: &Mlp, z: &Array2<f64>| {
        combined_objective(model, features, z.view(), candidates.view(), graphs, &prop_cfg)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..meta.n).collect();

    for epoch in 1..=cfg.epochs {
        let start = if cfg.track_objective {
            Some(objective(&state.model, &state.pseudo_labels)?)
        } else {
            None
        };

        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let x = data.features().select(Axis(0), batch);
            let z = state.pseudo_labels.select(Axis(0), batch);
            let (loss, grads) = state.model.backward(x.view(), z.view(), &cfg.risk)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            state.model.sgd_step(&grads, &cfg.optimizer);
        }
        let train_seconds = t0.elapsed().as_secs_f64();

        let after_model = if cfg.track_objective {
            Some(objective(&state.model, &state.pseudo_labels)?)
        } else {
            None
        };

        let t1 = Instant::now();
        let mut prop_objective = None;
        if propagates {
            let logits = state.model.logits(features)?;
            let predictions = if cfg.propagate_on_logits {
                logits
            } else {
                logits.mapv(crate::network::sigmoid)
            };
            let problem = PropagationProblem {
                predictions: predictions.view(),
                candidates: candidates.view(),
                instance: &graphs.instance,
                label: &graphs.label,
            };
            let z = std::mem::take(&mut state.pseudo_labels);
            let out = propagate(z, &problem, &prop_cfg)?;
            prop_objective = Some((
                out.objective_trace[0],
                *out.objective_trace.last().expect("trace is never empty"),
            ));
            state.pseudo_labels = out.labels;
        }
        let propagation_seconds = t1.elapsed().as_secs_f64();

        let chain = match (start, after_model) {
            (Some(start), Some(after_model)) => Some(ObjectiveChain {
                start,
                after_model,
                after_propagation: objective(&state.model, &state.pseudo_labels)?,
            }),
            _ => None,
        };

        state.epoch = epoch;
        let metrics = monitor(&state);
        state.history.push(EpochRecord {
            epoch,
            deep_loss: loss_sum / meta.n as f64,
            prop_objective_start: prop_objective.map(|p| p.0),
            prop_objective_end: prop_objective.map(|p| p.1),
            objective: chain,
            train_seconds,
            propagation_seconds,
            metrics,
        });
    }
    Ok(state)
}
