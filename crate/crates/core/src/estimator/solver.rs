use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::problem::{EigenProblem, Evaluation};
use super::EstimatorConfig;
use crate::error::{Error, Result};

/// Steps below this are treated as a stalled line search.
const MIN_STEP: f64 = 1e-16;
/// Sufficient-decrease constant of the line search.
const ARMIJO: f64 = 1e-4;
/// Accepted steps without backtracking before the step grows again.
const GROWTH_STREAK: usize = 5;
const GROWTH_FACTOR: f64 = 1.1;
/// Correction pairs kept by the quasi-Newton direction of the smooth phase.
const MEMORY: usize = 10;

/// Precision eigenvalues found by one optimization phase.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSolution {
    pub lams: Vec<Vec<f64>>,
    pub iterations: usize,
    pub objective: f64,
    /// Objective after every accepted iteration, starting with the initial point.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Step size `μ` in effect when the phase ended.
    pub step: f64,
    pub max_gradient: f64,
}

/// Minimizes the eigenvalue objective from the all-ones start.
///
/// Each iteration takes the projected gradient, scales it by the inverse
/// diagonal curvature, and backtracks until the candidate keeps every
/// Kronecker sum above `pd_margin` and decreases the objective.
pub fn estimate_eigenvalues(
    problem: &EigenProblem,
    config: &EstimatorConfig,
) -> Result<EigenSolution> {
    config.validate()?;
    let phase = Phase {
        problem,
        penalty: None,
        config,
        max_iterations: config.max_iterations,
        strict: true,
        memory: MEMORY,
        restart_step: true,
    };
    phase.run(problem.initial_point(), config.initial_step)
}

/// Continues from an unpenalized solution with the restricted L1 penalty
/// `ρ Σ_ℓ Σ_{a≠b} |(V_ℓ Λ_ℓ V_ℓᵀ)_ab|`, eigenvectors held fixed.
pub fn restricted_l1_refine(
    problem: &EigenProblem,
    eigenvectors: &[DMatrix<f64>],
    start: &EigenSolution,
    config: &EstimatorConfig,
) -> Result<EigenSolution> {
    config.validate()?;
    if eigenvectors.len() != problem.p().len() {
        return Err(Error::arg("one eigenvector matrix per axis is required"));
    }
    if config.l1_strength == 0.0 {
        return Ok(EigenSolution {
            iterations: 0,
            trace: vec![start.objective],
            ..start.clone()
        });
    }
    let phase = Phase {
        problem,
        penalty: Some(L1Penalty {
            eigenvectors,
            strength: config.l1_strength,
        }),
        config,
        max_iterations: config.l1_max_iterations,
        strict: false,
        memory: 0,
        restart_step: false,
    };
    phase.run(start.lams.clone(), start.step.max(MIN_STEP))
}

/// Off-diagonal L1 norm of `V diag(λ) Vᵀ` and its subgradient in `λ`.
pub fn restricted_l1_term(v: &DMatrix<f64>, lam: &[f64]) -> (f64, Vec<f64>) {
    let scaled = v * DMatrix::from_diagonal(&DVector::from_column_slice(lam));
    let psi = &scaled * v.transpose();
    let d = psi.nrows();
    let mut norm = 0.0;
    let sign = DMatrix::from_fn(d, d, |a, b| {
        if a == b {
            return 0.0;
        }
        let x = 0.5 * (psi[(a, b)] + psi[(b, a)]);
        norm += x.abs();
        if x == 0.0 {
            0.0
        } else {
            x.signum()
        }
    });
    let zv = sign * v;
    let sub = (0..d).map(|i| v.column(i).dot(&zv.column(i))).collect();
    (norm, sub)
}

struct L1Penalty<'a> {
    eigenvectors: &'a [DMatrix<f64>],
    strength: f64,
}

struct Phase<'a> {
    problem: &'a EigenProblem,
    penalty: Option<L1Penalty<'a>>,
    config: &'a EstimatorConfig,
    max_iterations: usize,
    strict: bool,
    memory: usize,
    /// Start every line search at the initial step instead of the last one.
    restart_step: bool,
}

impl Phase<'_> {
    fn evaluate(&self, lams: &[Vec<f64>]) -> Result<Evaluation> {
        let mut eval = self.problem.evaluate(lams)?;
        if let Some(pen) = &self.penalty {
            let terms: Vec<(f64, Vec<f64>)> = pen
                .eigenvectors
                .par_iter()
                .zip(lams)
                .map(|(v, lam)| restricted_l1_term(v, lam))
                .collect();
            for (ax, (norm, sub)) in terms.into_iter().enumerate() {
                eval.value += pen.strength * norm;
                for (g, s) in eval.gradient[ax].iter_mut().zip(sub) {
                    *g += pen.strength * s;
                }
            }
        }
        Ok(eval)
    }

    /// `evaluate` that maps a positive-definiteness failure to `None`.
    fn try_evaluate(&self, lams: &[Vec<f64>]) -> Result<Option<Evaluation>> {
        if !self.problem.is_feasible(lams, self.config.pd_margin) {
            return Ok(None);
        }
        match self.evaluate(lams) {
            Ok(e) if e.value.is_finite() => Ok(Some(e)),
            Ok(_) | Err(Error::NotPositiveDefinite(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn run(&self, start: Vec<Vec<f64>>, initial_step: f64) -> Result<EigenSolution> {
        let problem = self.problem;
        let factors = projection_factors(problem, self.config.force_projection);
        let mut lams = start;
        let mut eval = self.evaluate(&lams)?;
        let mut trace = vec![eval.value];
        let mut step = initial_step;
        let mut streak = 0;
        let mut iterations = 0;
        let mut history = History::new(self.memory);
        loop {
            let projected = project(&eval.gradient, problem.pinned(), &factors);
            let max_gradient = projected
                .iter()
                .flatten()
                .fold(0.0f64, |m, g| m.max(g.abs()));
            let finish = |lams, converged, step| EigenSolution {
                lams,
                iterations,
                objective: eval.value,
                trace: trace.clone(),
                converged,
                step,
                max_gradient,
            };
            if max_gradient < self.config.tolerance {
                return Ok(finish(lams, true, step));
            }
            if iterations >= self.max_iterations {
                return Ok(finish(lams, false, step));
            }

            if self.restart_step {
                step = initial_step;
            }
            let pinned = problem.pinned();
            let direction = history
                .direction(&eval, pinned)
                .filter(|d| dot(&eval.gradient, d, pinned) > 0.0)
                .unwrap_or_else(|| {
                    history.clear();
                    precondition(&projected, &eval, pinned)
                });
            let slope = dot(&eval.gradient, &direction, pinned);
            log::trace!(
                "iteration {iterations}: objective {} max gradient {max_gradient:e} step {step:e}",
                eval.value
            );
            let slack = 1e-12 * (1.0 + eval.value.abs());
            let mut backtracked = false;
            let accepted = loop {
                let candidate = move_along(&lams, &direction, step);
                if let Some(next) = self.try_evaluate(&candidate)? {
                    if next.value <= eval.value - ARMIJO * step * slope + slack {
                        break Some((candidate, next));
                    }
                }
                step *= self.config.backtrack_factor;
                backtracked = true;
                if step < MIN_STEP {
                    break None;
                }
            };
            let Some((candidate, next)) = accepted else {
                if self.strict {
                    return Err(Error::NonConvergence {
                        iterations,
                        step,
                        max_gradient,
                    });
                }
                log::debug!("line search stalled after {iterations} iterations");
                return Ok(finish(lams, false, step));
            };
            history.push(
                difference(&candidate, &lams, problem.pinned()),
                difference(&next.gradient, &eval.gradient, problem.pinned()),
            );
            lams = candidate;
            eval = next;
            trace.push(eval.value);
            iterations += 1;
            if backtracked {
                streak = 0;
            } else {
                streak += 1;
                if streak >= GROWTH_STREAK {
                    step = (step * GROWTH_FACTOR).min(self.config.initial_step);
                    streak = 0;
                }
            }
        }
    }
}

/// Per-axis projection strength: the average of `(K_γ−1)/K_γ` over the
/// modalities containing the axis.
fn projection_factors(problem: &EigenProblem, enabled: bool) -> Vec<f64> {
    let s = problem.structure();
    (0..s.axis_count())
        .map(|ax| {
            if !enabled {
                return 0.0;
            }
            let ks: Vec<f64> = s
                .modalities_with(ax)
                .map(|g| {
                    let k = s.modalities()[g].len() as f64;
                    (k - 1.0) / k
                })
                .collect();
            ks.iter().sum::<f64>() / ks.len() as f64
        })
        .collect()
}

fn project(gradient: &[Vec<f64>], pinned: &[Vec<bool>], factors: &[f64]) -> Vec<Vec<f64>> {
    gradient
        .iter()
        .zip(pinned)
        .zip(factors)
        .map(|((g, pins), &c)| {
            let free = pins.iter().filter(|p| !**p).count();
            let mean = if free == 0 {
                0.0
            } else {
                g.iter()
                    .zip(pins)
                    .filter(|(_, p)| !**p)
                    .map(|(x, _)| x)
                    .sum::<f64>()
                    / free as f64
            };
            g.iter()
                .zip(pins)
                .map(|(x, &p)| if p { 0.0 } else { x - c * mean })
                .collect()
        })
        .collect()
}

/// Limited-memory inverse-Hessian approximation whose initial matrix is the
/// inverse diagonal curvature at the current point.
struct History {
    capacity: usize,
    pairs: std::collections::VecDeque<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)>,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            pairs: std::collections::VecDeque::with_capacity(capacity),
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    fn push(&mut self, s: Vec<Vec<f64>>, y: Vec<Vec<f64>>) {
        if self.capacity == 0 {
            return;
        }
        let all = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let sy = plain_dot(&s, &y);
        if !(sy > 1e-12 * all(&s) * all(&y)) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion applied to the gradient; `None` without history.
    fn direction(&self, eval: &Evaluation, pinned: &[Vec<bool>]) -> Option<Vec<Vec<f64>>> {
        if self.pairs.is_empty() {
            return None;
        }
        let mut q: Vec<Vec<f64>> = eval
            .gradient
            .iter()
            .zip(pinned)
            .map(|(g, pins)| {
                g.iter()
                    .zip(pins)
                    .map(|(x, &p)| if p { 0.0 } else { *x })
                    .collect()
            })
            .collect();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * plain_dot(s, &q);
            axpy(&mut q, -a, y);
            alphas.push(a);
        }
        for (q, h) in q.iter_mut().zip(&eval.curvature) {
            for (x, c) in q.iter_mut().zip(h) {
                if *c > 0.0 && c.is_finite() {
                    *x /= c;
                }
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * plain_dot(y, &q);
            axpy(&mut q, a - b, s);
        }
        Some(q)
    }
}

fn plain_dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| x * y)
        .sum()
}

fn axpy(acc: &mut [Vec<f64>], a: f64, x: &[Vec<f64>]) {
    for (acc, x) in acc.iter_mut().zip(x) {
        for (v, x) in acc.iter_mut().zip(x) {
            *v += a * x;
        }
    }
}

fn difference(a: &[Vec<f64>], b: &[Vec<f64>], pinned: &[Vec<bool>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .zip(pinned)
        .map(|((a, b), pins)| {
            a.iter()
                .zip(b)
                .zip(pins)
                .map(|((a, b), &p)| if p { 0.0 } else { a - b })
                .collect()
        })
        .collect()
}

fn precondition(projected: &[Vec<f64>], eval: &Evaluation, pinned: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let scaled: Vec<Vec<f64>> = projected
        .iter()
        .zip(&eval.curvature)
        .map(|(g, h)| {
            g.iter()
                .zip(h)
                .map(|(x, c)| if *c > 0.0 && c.is_finite() { x / c } else { *x })
                .collect()
        })
        .collect();
    if dot(&eval.gradient, &scaled, pinned) > 0.0 {
        scaled
    } else {
        projected.to_vec()
    }
}

fn dot(a: &[Vec<f64>], b: &[Vec<f64>], pinned: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for ((x, y), pins) in a.iter().zip(b).zip(pinned) {
        for ((x, y), p) in x.iter().zip(y).zip(pins) {
            if !p {
                total += x * y;
            }
        }
    }
    total
}

fn move_along(lams: &[Vec<f64>], direction: &[Vec<f64>], step: f64) -> Vec<Vec<f64>> {
    lams.iter()
        .zip(direction)
        .map(|(l, d)| l.iter().zip(d).map(|(l, d)| l - step * d).collect())
        .collect()
}

/// Moves along the exact invariances of the objective to a canonical point.
///
/// Adding `a_ℓ` to every eigenvalue of axis `ℓ` leaves the objective
/// unchanged whenever `Σ_{ℓ∈γ} a_ℓ = 0` for every modality and `a_ℓ = 0` on
/// axes with a log-barrier prior (pinned coordinates are infinite and do not
/// move). Among those shifts this picks the one
/// minimizing the squared norm of the free (unpinned) eigenvalues, so the
/// returned diagonals do not depend on the optimization path.
pub fn canonicalize(problem: &EigenProblem, lams: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s = problem.structure();
    let k = s.axis_count();
    let mut weights = vec![1.0; k];
    let mut fixed = vec![false; k];
    let mut means = vec![0.0; k];
    let mut rows: Vec<DVector<f64>> = s
        .modalities()
        .iter()
        .map(|m| DVector::from_fn(k, |ax, _| if m.contains(&ax) { 1.0 } else { 0.0 }))
        .collect();
    for ax in 0..k {
        let free: Vec<f64> = lams[ax]
            .iter()
            .zip(&problem.pinned()[ax])
            .filter(|(_, p)| !**p)
            .map(|(l, _)| *l)
            .collect();
        if free.is_empty() || problem.log_weights()[ax] != 0.0 {
            fixed[ax] = true;
            rows.push(DVector::from_fn(k, |i, _| if i == ax { 1.0 } else { 0.0 }));
        }
        if !free.is_empty() {
            weights[ax] = free.len() as f64;
            means[ax] = free.iter().sum::<f64>() / weights[ax];
        }
    }
    let c = DMatrix::from_fn(rows.len(), k, |r, ax| rows[r][ax]);
    let w_inv = DMatrix::from_diagonal(&DVector::from_iterator(k, weights.iter().map(|w| 1.0 / w)));
    let m = DVector::from_vec(means);
    let gram = &c * &w_inv * c.transpose();
    let pinv = match gram
        .clone()
        .svd(true, true)
        .pseudo_inverse(1e-12 * gram.amax().max(1.0))
    {
        Ok(p) => p,
        Err(_) => return lams.to_vec(),
    };
    let shift = -&m + &w_inv * c.transpose() * pinv * (&c * &m);
    lams.iter()
        .enumerate()
        .map(|(ax, l)| {
            if fixed[ax] || shift[ax] == 0.0 {
                l.clone()
            } else {
                l.iter()
                    .zip(&problem.pinned()[ax])
                    .map(|(x, &p)| if p { *x } else { x + shift[ax] })
                    .collect()
            }
        })
        .collect()
}
