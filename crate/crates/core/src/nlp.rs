//! Equality-constrained, box-constrained nonlinear programming: an
//! augmented Lagrangian outer loop around a projected limited-memory
//! quasi-Newton inner solver.
//!
//! The same engine drives the microcell problems (6 or 21 homogenization
//! constraints) and the macroscopic optimization (one integrated-cost
//! constraint). Everything is deterministic: no randomness, fixed
//! evaluation order.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// One evaluation of objective and constraints at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    /// Objective gradient, present when requested.
    pub gradient: Option<Vec<f64>>,
    /// Equality constraint values, length m.
    pub constraints: Vec<f64>,
    /// Row-major m×n constraint Jacobian, present when requested.
    pub jacobian: Option<Vec<f64>>,
}

/// Smooth problem with m equality constraints and box constraints.
pub trait ConstrainedProblem {
    fn num_vars(&self) -> usize;
    fn num_constraints(&self) -> usize;
    /// Lower and upper bounds; equal entries pin a variable.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Evaluates the problem at `x`; derivatives only when `want_grad`.
    fn evaluate(&mut self, x: &[f64], want_grad: bool) -> Result<Evaluation>;
}

/// Solver settings with the defaults used across the toolkit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NlpSettings {
    /// Outer tolerance on the constraint infinity norm.
    pub constraint_tol: f64,
    /// Final tolerance on the projected-gradient infinity norm.
    pub grad_tol: f64,
    /// Acceptance threshold on the KKT residual
    /// (projected Lagrangian stationarity plus constraint norm).
    pub kkt_tol: f64,
    pub outer_cap: usize,
    pub inner_cap: usize,
    /// Quasi-Newton memory.
    pub memory: usize,
    pub initial_penalty: f64,
    /// Penalty growth when the constraint norm stalls.
    pub penalty_growth: f64,
    pub penalty_cap: f64,
    /// Required shrink factor of the constraint norm per outer iteration.
    pub constraint_decrease: f64,
}

impl Default for NlpSettings {
    fn default() -> Self {
        NlpSettings {
            constraint_tol: 1e-6,
            grad_tol: 1e-8,
            kkt_tol: 1e-4,
            outer_cap: 30,
            inner_cap: 500,
            memory: 10,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            penalty_cap: 1e12,
            constraint_decrease: 4.0,
        }
    }
}

/// Per-outer-iteration diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OuterRecord {
    pub objective: f64,
    pub constraint_norm: f64,
    pub kkt_residual: f64,
    pub penalty: f64,
    pub inner_iterations: usize,
    /// Merit value after every accepted inner step (nonincreasing).
    pub merit_values: Vec<f64>,
}

/// Result of an augmented Lagrangian solve.
#[derive(Debug, Clone)]
pub struct NlpResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub constraints: Vec<f64>,
    pub constraint_norm: f64,
    pub kkt_residual: f64,
    pub multipliers: Vec<f64>,
    pub converged: bool,
    pub total_inner_iterations: usize,
    pub history: Vec<OuterRecord>,
}

fn clamp_to_box(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].max(lower[i]).min(upper[i]);
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Projected-gradient infinity norm ‖P(x − g) − x‖∞.
fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let stepped = (x[i] - g[i]).max(lower[i]).min(upper[i]);
        worst = worst.max((stepped - x[i]).abs());
    }
    worst
}

/// Limited-memory BFGS two-loop recursion.
struct LbfgsMemory {
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    capacity: usize,
}

impl LbfgsMemory {
    fn new(capacity: usize) -> Self {
        LbfgsMemory {
            s: VecDeque::new(),
            y: VecDeque::new(),
            rho: VecDeque::new(),
            capacity,
        }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = crate::sparse::dot(&s, &y);
        let ss = crate::sparse::norm(&s);
        let yy = crate::sparse::norm(&y);
        if sy <= 1e-12 * ss * yy || sy == 0.0 {
            return;
        }
        if self.s.len() == self.capacity {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.rho.push_back(1.0 / sy);
        self.s.push_back(s);
        self.y.push_back(y);
    }

    fn direction(&self, gradient: &[f64]) -> Vec<f64> {
        let mut q = gradient.to_vec();
        let k = self.s.len();
        if k == 0 {
            for v in q.iter_mut() {
                *v = -*v;
            }
            return q;
        }
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * crate::sparse::dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let last = k - 1;
        let gamma = crate::sparse::dot(&self.s[last], &self.y[last])
            / crate::sparse::dot(&self.y[last], &self.y[last]);
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..k {
            let beta = self.rho[i] * crate::sparse::dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        for v in q.iter_mut() {
            *v = -*v;
        }
        q
    }
}

/// Augmented Lagrangian merit and gradient from a raw evaluation.
fn merit_of(eval: &Evaluation, multipliers: &[f64], penalty: f64) -> f64 {
    let mut merit = eval.objective;
    for (c, l) in eval.constraints.iter().zip(multipliers) {
        merit += l * c + 0.5 * penalty * c * c;
    }
    merit
}

fn merit_gradient(eval: &Evaluation, multipliers: &[f64], penalty: f64, n: usize) -> Vec<f64> {
    let mut grad = eval.gradient.clone().expect("gradient requested");
    if let Some(jac) = &eval.jacobian {
        for (k, (c, l)) in eval.constraints.iter().zip(multipliers).enumerate() {
            let weight = l + penalty * c;
            if weight == 0.0 {
                continue;
            }
            let row = &jac[k * n..(k + 1) * n];
            for (g, j) in grad.iter_mut().zip(row) {
                *g += weight * j;
            }
        }
    }
    grad
}

struct InnerOutcome {
    x: Vec<f64>,
    eval: Evaluation,
    iterations: usize,
    merit_values: Vec<f64>,
    converged: bool,
}

/// Projected L-BFGS descent on the augmented Lagrangian merit.
fn inner_solve(
    problem: &mut dyn ConstrainedProblem,
    x0: Vec<f64>,
    multipliers: &[f64],
    penalty: f64,
    lower: &[f64],
    upper: &[f64],
    grad_tol: f64,
    settings: &NlpSettings,
) -> Result<InnerOutcome> {
    let n = x0.len();
    let mut x = x0;
    clamp_to_box(&mut x, lower, upper);
    let mut eval = problem.evaluate(&x, true)?;
    let mut merit = merit_of(&eval, multipliers, penalty);
    let mut grad = merit_gradient(&eval, multipliers, penalty, n);
    let mut memory = LbfgsMemory::new(settings.memory);
    let mut merit_values = vec![merit];
    let mut iterations = 0;
    let mut converged = false;

    let active_mask = |x: &[f64], grad: &[f64]| -> Vec<bool> {
        (0..n)
            .map(|i| {
                (x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0)
            })
            .collect()
    };

    while iterations < settings.inner_cap {
        if projected_gradient_norm(&x, &grad, lower, upper) <= grad_tol {
            converged = true;
            break;
        }
        // Quasi-Newton model over the inactive variables only; curvature
        // from bound-active coordinates would poison the direction.
        let active = active_mask(&x, &grad);
        let mut masked_grad = grad.clone();
        for i in 0..n {
            if active[i] {
                masked_grad[i] = 0.0;
            }
        }
        let mut direction = memory.direction(&masked_grad);
        for i in 0..n {
            let at_lower = x[i] <= lower[i] && direction[i] < 0.0;
            let at_upper = x[i] >= upper[i] && direction[i] > 0.0;
            if active[i] || at_lower || at_upper {
                direction[i] = 0.0;
            }
        }
        let mut step = 1.0;
        let mut accepted = false;
        let mut tried_steepest = false;
        loop {
            let mut trial = x.clone();
            for i in 0..n {
                trial[i] += step * direction[i];
            }
            clamp_to_box(&mut trial, lower, upper);
            let actual: Vec<f64> = trial.iter().zip(&x).map(|(t, xi)| t - xi).collect();
            let slope = crate::sparse::dot(&grad, &actual);
            if inf_norm(&actual) == 0.0 || slope >= 0.0 {
                // Not a descent direction along the projected path.
                if tried_steepest {
                    break;
                }
                memory.clear();
                direction = masked_grad.iter().map(|g| -g).collect();
                for i in 0..n {
                    let at_lower = x[i] <= lower[i] && direction[i] < 0.0;
                    let at_upper = x[i] >= upper[i] && direction[i] > 0.0;
                    if at_lower || at_upper {
                        direction[i] = 0.0;
                    }
                }
                step = 1.0 / inf_norm(&direction).max(1.0);
                tried_steepest = true;
                continue;
            }
            let trial_eval = problem.evaluate(&trial, false)?;
            let trial_merit = merit_of(&trial_eval, multipliers, penalty);
            if trial_merit <= merit + 1e-4 * slope {
                let trial_eval = problem.evaluate(&trial, true)?;
                let trial_grad = merit_gradient(&trial_eval, multipliers, penalty, n);
                let s: Vec<f64> = actual;
                let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                memory.push(s, y);
                x = trial;
                eval = trial_eval;
                merit = merit_of(&eval, multipliers, penalty);
                grad = trial_grad;
                merit_values.push(merit);
                accepted = true;
                break;
            }
            // Quadratic interpolation of the step, kept inside [0.1, 0.5]
            // of the previous one.
            let denom = trial_merit - merit - slope;
            let guess = if denom > 0.0 { -0.5 * slope / denom } else { 0.5 };
            step *= guess.clamp(0.1, 0.5);
            if step < 1e-20 {
                break;
            }
        }
        if !accepted {
            // Line search exhausted: the merit cannot be reduced further at
            // this precision.
            converged = projected_gradient_norm(&x, &grad, lower, upper) <= grad_tol;
            break;
        }
        iterations += 1;
    }

    Ok(InnerOutcome {
        x,
        eval,
        iterations,
        merit_values,
        converged,
    })
}

/// Solves min f(x) subject to c(x) = 0 and box constraints, starting from
/// `x0` (projected onto the box).
pub fn solve_constrained(
    problem: &mut dyn ConstrainedProblem,
    x0: &[f64],
    settings: &NlpSettings,
) -> Result<NlpResult> {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    let (lower, upper) = problem.bounds();
    let mut x = x0.to_vec();
    clamp_to_box(&mut x, &lower, &upper);

    let mut multipliers = vec![0.0; m];
    let mut penalty = settings.initial_penalty;
    let mut history = Vec::new();
    let mut total_inner = 0;
    let mut previous_norm = f64::INFINITY;
    let mut converged = false;
    let mut last_eval;

    // A pure box problem needs a single inner pass at full accuracy.
    let outer_cap = if m == 0 { 1 } else { settings.outer_cap };
    // Inner tolerance schedule: start loose, tighten as the constraints
    // come in, never below grad_tol.
    let mut omega = if m == 0 {
        settings.grad_tol
    } else {
        (settings.kkt_tol).max(settings.grad_tol)
    };

    loop {
        let outcome = inner_solve(
            problem,
            x,
            &multipliers,
            penalty,
            &lower,
            &upper,
            omega,
            settings,
        )?;
        x = outcome.x;
        last_eval = outcome.eval;
        total_inner += outcome.iterations;

        let c_norm = inf_norm(&last_eval.constraints);
        // First-order multiplier estimate for the KKT residual.
        let estimate: Vec<f64> = multipliers
            .iter()
            .zip(&last_eval.constraints)
            .map(|(l, c)| l + penalty * c)
            .collect();
        let lagrangian_grad = merit_gradient(&last_eval, &estimate, 0.0, n);
        let kkt = projected_gradient_norm(&x, &lagrangian_grad, &lower, &upper) + c_norm;

        history.push(OuterRecord {
            objective: last_eval.objective,
            constraint_norm: c_norm,
            kkt_residual: kkt,
            penalty,
            inner_iterations: outcome.iterations,
            merit_values: outcome.merit_values,
        });

        multipliers = estimate;

        if m == 0 {
            converged = outcome.converged;
            break;
        }
        if c_norm <= settings.constraint_tol && kkt <= settings.kkt_tol {
            converged = true;
            break;
        }
        if history.len() >= outer_cap {
            break;
        }
        if c_norm > previous_norm / settings.constraint_decrease
            && c_norm > 0.1 * settings.constraint_tol
        {
            penalty = (penalty * settings.penalty_growth).min(settings.penalty_cap);
        } else {
            omega = (0.2 * omega).max(settings.grad_tol);
        }
        previous_norm = c_norm;
    }

    let c_norm = inf_norm(&last_eval.constraints);
    let lagrangian_grad = merit_gradient(&last_eval, &multipliers, 0.0, n);
    let kkt = projected_gradient_norm(&x, &lagrangian_grad, &lower, &upper) + c_norm;
    Ok(NlpResult {
        objective: last_eval.objective,
        constraints: last_eval.constraints.clone(),
        constraint_norm: c_norm,
        kkt_residual: kkt,
        multipliers,
        converged,
        total_inner_iterations: total_inner,
        history,
        x,
    })
}
