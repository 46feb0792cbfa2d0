//! Full-batch gradient descent on the ridge objective.
//!
//! Serves as an independent check on [`crate::linalg::ridge_closed_form`]:
//! the gradient is accumulated sample by sample and never touches the Gram
//! machinery. Weight decay is decoupled from the gradient step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{ridge_closed_form, LinalgError, Matrix, RidgeProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("start is {found:?}, problem expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub weight_decay: f64,
    pub convergence_tolerance: f64,
}

impl OptimizerConfig {
    /// Safe step for `problem`, no decay, tight tolerance.
    pub fn for_problem(problem: &RidgeProblem, iterations: usize) -> Self {
        Self {
            learning_rate: safe_learning_rate(problem),
            iterations,
            weight_decay: 0.0,
            convergence_tolerance: 1e-12,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BaselineError::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(BaselineError::InvalidConfig(
                "iterations must be >= 1".into(),
            ));
        }
        if self.weight_decay.is_nan()
            || self.weight_decay < 0.0
            || self.convergence_tolerance.is_nan()
            || self.convergence_tolerance <= 0.0
        {
            return Err(BaselineError::InvalidConfig(
                "weight decay must be >= 0 and tolerance > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdOutcome {
    pub solution: Matrix,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Ridge loss and its gradient `2Σ(Wc_i − t_i)c_iᵀ + 2λ(W − W₀)` at `w`.
pub fn loss_and_gradient(problem: &RidgeProblem, w: &Matrix) -> (f64, Matrix) {
    let (d, c) = w.shape();
    let mut grad = Matrix::zeros(d, c);
    let mut loss = 0.0;
    for (ci, ti) in problem.inputs().iter().zip(problem.targets()) {
        for r in 0..d {
            let residual = crate::linalg::dot(w.row(r), ci) - ti[r];
            loss += residual * residual;
            for (g, &x) in grad.row_mut(r).iter_mut().zip(ci.iter()) {
                *g += 2.0 * residual * x;
            }
        }
    }
    let lambda = problem.lambda();
    let w0 = problem.original();
    for r in 0..d {
        let g = grad.row_mut(r);
        for (k, gk) in g.iter_mut().enumerate() {
            let diff = w.row(r)[k] - w0.row(r)[k];
            loss += lambda * diff * diff;
            *gk += 2.0 * lambda * diff;
        }
    }
    (loss, grad)
}

pub fn gd_minimize(
    problem: &RidgeProblem,
    config: &OptimizerConfig,
    start: &Matrix,
) -> Result<GdOutcome> {
    config.validate()?;
    if start.shape() != problem.original().shape() {
        return Err(BaselineError::ShapeMismatch {
            expected: problem.original().shape(),
            found: start.shape(),
        });
    }
    let lr = config.learning_rate;
    let shrink = 1.0 - lr * config.weight_decay;
    let mut w = start.clone();
    let mut start_loss = None;
    for it in 1..=config.iterations {
        let (loss, grad) = loss_and_gradient(problem, &w);
        if !loss.is_finite() || !grad.is_finite() {
            return Err(BaselineError::Diverged { iteration: it });
        }
        let start_loss = *start_loss.get_or_insert(loss);
        if loss <= start_loss && grad.frobenius_norm() < config.convergence_tolerance * (1.0 + loss)
        {
            return Ok(GdOutcome {
                solution: w,
                final_loss: loss,
                iterations_used: it,
                converged: true,
            });
        }
        w = w.map_zip(&grad, |x, g| x * shrink - lr * g);
    }
    let (loss, _) = loss_and_gradient(problem, &w);
    if !loss.is_finite() {
        return Err(BaselineError::Diverged {
            iteration: config.iterations,
        });
    }
    Ok(GdOutcome {
        solution: w,
        final_loss: loss,
        iterations_used: config.iterations,
        converged: false,
    })
}

/// Largest eigenvalue of `Σ c_i c_iᵀ` by power iteration.
pub fn gram_spectral_radius(problem: &RidgeProblem) -> f64 {
    let c = problem.original().cols();
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; c];
        for ci in problem.inputs() {
            let s = crate::linalg::dot(ci, v);
            for (o, &x) in out.iter_mut().zip(ci.iter()) {
                *o += s * x;
            }
        }
        out
    };
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut estimate = 0.0;
    for _ in 0..1000 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let av = apply(&v);
        let next = crate::linalg::dot(&v, &av);
        v = av;
        if (next - estimate).abs() <= 1e-13 * next.abs() {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// `0.9 / L` with `L = 2(λ + λ_max)`.
pub fn safe_learning_rate(problem: &RidgeProblem) -> f64 {
    0.9 / (2.0 * (problem.lambda() + gram_spectral_radius(problem)))
}

/// `‖W_gd − W_cf‖_F / (1 + ‖W_cf‖_F)`, descending from the original matrix.
pub fn compare_closed_form(problem: &RidgeProblem, config: &OptimizerConfig) -> Result<f64> {
    let closed = ridge_closed_form(problem)?;
    let gd = gd_minimize(problem, config, problem.original())?;
    Ok(gd.solution.sub(&closed)?.frobenius_norm() / (1.0 + closed.frobenius_norm()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub weight_decay: f64,
    pub loss: f64,
    pub deviation: f64,
}

/// Loss and `‖W − W₀‖_F` reached for each decay value.
pub fn decay_sweep(
    problem: &RidgeProblem,
    config: &OptimizerConfig,
    decays: &[f64],
) -> Result<Vec<FrontierPoint>> {
    decays
        .iter()
        .map(|&eta| {
            let cfg = OptimizerConfig {
                weight_decay: eta,
                ..*config
            };
            let out = gd_minimize(problem, &cfg, problem.original())?;
            Ok(FrontierPoint {
                weight_decay: eta,
                loss: out.final_loss,
                deviation: out.solution.sub(problem.original())?.frobenius_norm(),
            })
        })
        .collect()
}
