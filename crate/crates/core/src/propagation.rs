//! Pseudo-label propagation.
//!
//! The pseudo-label matrix `Z` (n × L) minimizes
//!
//! ```text
//! ½‖Z − Ŷ‖² + (η/2)‖Z − Y‖² + (α/2) tr(Zᵀ L_x Z) + (β/2) tr(Z L_y Zᵀ)
//! ```
//!
//! where `Ŷ` is the current network output, `Y` the candidate matrix and
//! `L_x`, `L_y` the instance and label Laplacians. The gradient is
//! `(1 + η) Z + α L_x Z + β Z L_y − (Ŷ + η Y)` and the minimizer is
//! approached by plain gradient descent, followed by a column-wise min-max
//! rescale into `[0, 1]`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::graph::NormalizedLaplacian;

/// Entries beyond this magnitude abort propagation.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    /// Weight of the candidate-consistency term.
    pub eta: f64,
    /// Weight of the instance-graph smoothness term.
    pub alpha: f64,
    /// Weight of the label-graph smoothness term.
    pub beta: f64,
    /// Gradient step size.
    pub gamma: f64,
    /// Gradient steps per call to [`propagate`].
    pub steps: usize,
    /// Apply column-wise min-max normalization after the steps.
    pub normalize: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            alpha: 0.01,
            beta: 0.01,
            gamma: 0.01,
            steps: 200,
            normalize: true,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Largest step size for which every step is guaranteed not to increase
    /// the objective: the Hessian norm is at most `1 + η + 2α + 2β` because
    /// normalized Laplacian eigenvalues lie in `[0, 2]`.
    pub fn stable_step_bound(&self) -> f64 {
        1.0 / (1.0 + self.eta + 2.0 * self.alpha + 2.0 * self.beta)
    }
}

/// Everything the objective depends on besides `Z` itself.
#[derive(Debug, Clone, Copy)]
pub struct PropagationProblem<'a> {
    /// Network output `Ŷ`.
    pub predictions: ArrayView2<'a, f64>,
    /// Candidate matrix `Y` as reals.
    pub candidates: ArrayView2<'a, f64>,
    pub instance: &'a NormalizedLaplacian,
    pub label: &'a NormalizedLaplacian,
}

impl PropagationProblem<'_> {
    fn check(&self, z: ArrayView2<f64>) -> Result<()> {
        let shape = z.dim();
        check_shape("predictions", shape, self.predictions.dim())?;
        check_shape("candidates", shape, self.candidates.dim())?;
        check_shape("instance laplacian", shape, (self.instance.dim(), shape.1))?;
        check_shape("label laplacian", shape, (shape.0, self.label.dim()))?;
        Ok(())
    }

    /// Objective and gradient sharing the two Laplacian products.
    fn evaluate(&self, z: ArrayView2<f64>, cfg: &PropagationConfig) -> Result<(f64, Array2<f64>)> {
        self.check(z)?;
        let lx_z = (cfg.alpha != 0.0)
            .then(|| self.instance.left_multiply(z))
            .transpose()?;
        let z_ly = (cfg.beta != 0.0)
            .then(|| self.label.right_multiply(z))
            .transpose()?;

        let mut objective =
            0.5 * sq_dist(z, self.predictions) + 0.5 * cfg.eta * sq_dist(z, self.candidates);
        let mut grad = Array2::zeros(z.dim());
        Zip::from(&mut grad)
            .and(z)
            .and(self.predictions)
            .and(self.candidates)
            .for_each(|g, &zv, &p, &y| *g = (1.0 + cfg.eta) * zv - (p + cfg.eta * y));
        if let Some(lx_z) = &lx_z {
            objective += 0.5 * cfg.alpha * inner(z, lx_z.view());
            grad.scaled_add(cfg.alpha, lx_z);
        }
        if let Some(z_ly) = &z_ly {
            objective += 0.5 * cfg.beta * inner(z, z_ly.view());
            grad.scaled_add(cfg.beta, z_ly);
        }
        Ok((objective, grad))
    }
}

fn sq_dist(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
}

fn inner(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y)
}

pub fn propagation_objective(
    z: ArrayView2<f64>,
    problem: &PropagationProblem,
    cfg: &PropagationConfig,
) -> Result<f64> {
    Ok(problem.evaluate(z, cfg)?.0)
}

pub fn propagation_gradient(
    z: ArrayView2<f64>,
    problem: &PropagationProblem,
    cfg: &PropagationConfig,
) -> Result<Array2<f64>> {
    Ok(problem.evaluate(z, cfg)?.1)
}

#[derive(Debug, Clone)]
pub struct PropagationOutcome {
    /// Updated pseudo-labels.
    pub labels: Array2<f64>,
    /// Objective before the first step and after every step (`steps + 1`
    /// values), measured before normalization.
    pub objective_trace: Vec<f64>,
}

/// Runs `cfg.steps` gradient steps from `z`, then min-max normalizes the
/// columns when `cfg.normalize` is set.
pub fn propagate(
    z: Array2<f64>,
    problem: &PropagationProblem,
    cfg: &PropagationConfig,
) -> Result<PropagationOutcome> {
    run(z, problem, cfg, cfg.steps, None)
}

/// Steps until the relative objective change drops below `rel_tol` or
/// `max_steps` is reached. `cfg.steps` is ignored.
pub fn propagate_to_convergence(
    z: Array2<f64>,
    problem: &PropagationProblem,
    cfg: &PropagationConfig,
    rel_tol: f64,
    max_steps: usize,
) -> Result<PropagationOutcome> {
    run(z, problem, cfg, max_steps, Some(rel_tol))
}

fn run(
    mut z: Array2<f64>,
    problem: &PropagationProblem,
    cfg: &PropagationConfig,
    max_steps: usize,
    rel_tol: Option<f64>,
) -> Result<PropagationOutcome> {
    cfg.validate()?;
    let (mut objective, mut grad) = problem.evaluate(z.view(), cfg)?;
    let mut trace = Vec::with_capacity(max_steps.min(10_000) + 1);
    trace.push(objective);
    for step in 1..=max_steps {
        z.scaled_add(-cfg.gamma, &grad);
        let max_abs = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !max_abs.is_finite() || max_abs > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                max_abs,
                gamma: cfg.gamma,
            });
        }
        let previous = objective;
        (objective, grad) = problem.evaluate(z.view(), cfg)?;
        trace.push(objective);
        if let Some(tol) = rel_tol {
            if (previous - objective).abs() <= tol * previous.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    if cfg.normalize {
        normalize_columns(&mut z);
    }
    Ok(PropagationOutcome {
        labels: z,
        objective_trace: trace,
    })
}

/// Rescales each column to `[0, 1]` by `(z − min) / (max − min)`. Constant
/// columns become 0.5.
pub fn normalize_columns(z: &mut Array2<f64>) {
    for mut col in z.axis_iter_mut(Axis(1)) {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        if span > 0.0 {
            col.mapv_inplace(|v| (v - lo) / span);
        } else {
            col.fill(0.5);
        }
    }
}
