//! Eigendecomposition-based estimation of per-axis precision matrices.

mod problem;
mod solver;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use problem::{project_gradient, EigenProblem, Evaluation, RANK_EPSILON};
pub use solver::{
    canonicalize, estimate_eigenvalues, restricted_l1_refine, restricted_l1_term, EigenSolution,
};

use crate::error::{Error, Result};
use crate::preprocess::{prepared_gram, PreprocessPlan};
use crate::tensor::{Dataset, GramSet, Structure};

/// Prior on one axis' precision matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum PriorSpec {
    #[default]
    None,
    /// Wishart density `∝ |Ψ|^{(n−d−1)/2} exp(−½ tr[Θ⁻¹Ψ])`.
    Wishart { scale: DMatrix<f64>, dof: f64 },
}

impl PriorSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            PriorSpec::None => Ok(()),
            PriorSpec::Wishart { scale, dof } => {
                if scale.nrows() != d || scale.ncols() != d {
                    return Err(Error::arg(format!(
                        "Wishart scale is {}x{} but the axis has size {d}",
                        scale.nrows(),
                        scale.ncols()
                    )));
                }
                if !(*dof > d as f64 - 1.0) || !dof.is_finite() {
                    return Err(Error::arg(format!(
                        "Wishart degrees of freedom {dof} must exceed d - 1 = {}",
                        d as f64 - 1.0
                    )));
                }
                crate::tensor::check_symmetric(scale, 1e-10).map_err(Error::Argument)?;
                if scale.clone().cholesky().is_none() {
                    return Err(Error::NotPositiveDefinite("Wishart scale matrix".into()));
                }
                Ok(())
            }
        }
    }

    /// Weight `w` of the `w Σ log λ` term the prior adds to the log density.
    pub fn log_weight(&self, d: usize) -> f64 {
        match self {
            PriorSpec::None => 0.0,
            PriorSpec::Wishart { dof, .. } => 0.5 * (dof - d as f64 - 1.0),
        }
    }
}

/// Priors by axis name; axes not listed get no prior.
pub type Priors = BTreeMap<String, PriorSpec>;

fn default_tolerance() -> f64 {
    1e-8
}
fn default_max_iterations() -> usize {
    1000
}
fn default_initial_step() -> f64 {
    1.0
}
fn default_backtrack() -> f64 {
    0.5
}
fn default_pd_margin() -> f64 {
    1e-4
}
fn default_l1_max_iterations() -> usize {
    500
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Stop once the largest projected-gradient entry is below this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_initial_step")]
    pub initial_step: f64,
    #[serde(default = "default_backtrack")]
    pub backtrack_factor: f64,
    /// Smallest allowed Kronecker-sum eigenvalue during the search.
    #[serde(default = "default_pd_margin")]
    pub pd_margin: f64,
    #[serde(default)]
    pub l1_strength: f64,
    #[serde(default = "default_l1_max_iterations")]
    pub l1_max_iterations: usize,
    #[serde(default = "default_true")]
    pub force_projection: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            tolerance: default_tolerance(),
            max_iterations: default_max_iterations(),
            initial_step: default_initial_step(),
            backtrack_factor: default_backtrack(),
            pd_margin: default_pd_margin(),
            l1_strength: 0.0,
            l1_max_iterations: default_l1_max_iterations(),
            force_projection: true,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::arg("tolerance must be positive"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::arg("initial step must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::arg("backtrack factor must lie in (0, 1)"));
        }
        if !(self.pd_margin > 0.0 && self.pd_margin.is_finite()) {
            return Err(Error::arg("pd_margin must be positive"));
        }
        if !(self.l1_strength >= 0.0 && self.l1_strength.is_finite()) {
            return Err(Error::arg("l1_strength must be non-negative"));
        }
        Ok(())
    }
}

/// Eigen-structure of one axis' estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisSpectrum {
    pub axis: String,
    /// Orthonormal eigenvectors `V_ℓ` as columns.
    pub eigenvectors: DMatrix<f64>,
    /// Eigenvalues of the priorized Gram matrix, descending.
    pub gram_eigenvalues: Vec<f64>,
    /// Precision eigenvalues `λ_ℓ`, paired with the columns of `V_ℓ`.
    pub precision_eigenvalues: Vec<f64>,
    /// Whether some coordinates were held at the rank-deficiency cap.
    pub rank_deficient: bool,
}

impl AxisSpectrum {
    pub fn precision(&self) -> DMatrix<f64> {
        recompose(&self.eigenvectors, &self.precision_eigenvalues)
    }
}

/// Wall-clock seconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub gram: f64,
    pub decompose: f64,
    pub iterate: f64,
    pub refine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub spectra: Vec<AxisSpectrum>,
    /// Iterations of the unpenalized phase.
    pub iterations: usize,
    /// Iterations of the restricted-L1 phase (0 when disabled).
    pub l1_iterations: usize,
    pub objective: f64,
    /// Objective after every accepted iteration of both phases.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub max_gradient: f64,
    pub timings: PhaseTimings,
}

impl FitResult {
    pub fn spectrum(&self, axis: &str) -> Option<&AxisSpectrum> {
        self.spectra.iter().find(|s| s.axis == axis)
    }

    /// Dense `Ψ_ℓ = V_ℓ diag(λ_ℓ) V_ℓᵀ`.
    pub fn precision(&self, axis: &str) -> Option<DMatrix<f64>> {
        self.spectrum(axis).map(AxisSpectrum::precision)
    }
}

/// `P_ℓ = ½S_ℓ − η_ℓ(Θ_ℓ)`: `½S_ℓ` without a prior, `½S_ℓ + ½Θ_ℓ⁻¹` for Wishart.
pub fn priorize(grams: &GramSet, priors: &Priors) -> Result<Vec<DMatrix<f64>>> {
    for name in priors.keys() {
        if grams.get(name).is_none() {
            return Err(Error::arg(format!("prior given for unknown axis `{name}`")));
        }
    }
    grams
        .names()
        .iter()
        .zip(grams.matrices())
        .map(|(name, s)| {
            let half = s * 0.5;
            match priors.get(name) {
                None | Some(PriorSpec::None) => Ok(half),
                Some(prior @ PriorSpec::Wishart { scale, .. }) => {
                    prior.validate(s.nrows())?;
                    let inv = scale.clone().try_inverse().ok_or_else(|| {
                        Error::Singular(format!("Wishart scale of axis `{name}`"))
                    })?;
                    let inv = (&inv + inv.transpose()) * 0.5;
                    Ok(half + inv * 0.5)
                }
            }
        })
        .collect()
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
pub fn decompose(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if !p.is_square() {
        return Err(Error::arg("cannot decompose a non-square matrix"));
    }
    crate::tensor::check_symmetric(p, 1e-10).map_err(Error::Argument)?;
    let eig = SymmetricEigen::new(p.clone());
    let mut order: Vec<usize> = (0..p.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(p.nrows(), p.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((vectors, values))
}

/// `V diag(λ) Vᵀ`, symmetrized.
pub fn recompose(v: &DMatrix<f64>, lam: &[f64]) -> DMatrix<f64> {
    let scaled = v * DMatrix::from_diagonal(&DVector::from_column_slice(lam));
    let psi = scaled * v.transpose();
    (&psi + psi.transpose()) * 0.5
}

/// Full pipeline from raw data: preprocessing, effective Gram matrices, then
/// [`fit_grams`].
pub fn fit(
    dataset: &Dataset,
    plan: &PreprocessPlan,
    priors: &Priors,
    config: &EstimatorConfig,
) -> Result<FitResult> {
    let start = Instant::now();
    let grams = prepared_gram(dataset, plan)?;
    let gram_seconds = start.elapsed().as_secs_f64();
    let structure = dataset.structure()?;
    let mut result = fit_grams(&grams, &structure, priors, config)?;
    result.timings.gram = gram_seconds;
    Ok(result)
}

/// Estimation from precomputed effective Gram matrices.
pub fn fit_grams(
    grams: &GramSet,
    structure: &Structure,
    priors: &Priors,
    config: &EstimatorConfig,
) -> Result<FitResult> {
    config.validate()?;
    if grams.names() != structure.axis_names() {
        return Err(Error::arg(
            "Gram matrices and structure list different axes",
        ));
    }
    for (name, s) in grams.names().iter().zip(grams.matrices()) {
        if s.amax() == 0.0 {
            return Err(Error::Degenerate(format!(
                "Gram matrix of axis `{name}` is zero; the estimate does not exist"
            )));
        }
    }
    let mut timings = PhaseTimings::default();

    let start = Instant::now();
    let priorized = priorize(grams, priors)?;
    let decomposed = priorized
        .par_iter()
        .map(decompose)
        .collect::<Result<Vec<_>>>()?;
    timings.decompose = start.elapsed().as_secs_f64();

    let (vectors, p): (Vec<_>, Vec<_>) = decomposed.into_iter().unzip();
    let weights = structure
        .axis_names()
        .iter()
        .zip(structure.axis_sizes())
        .map(|(name, &d)| priors.get(name).map_or(0.0, |prior| prior.log_weight(d)))
        .collect();
    let problem = EigenProblem::new(structure.clone(), p, weights)?;

    let start = Instant::now();
    let mle = estimate_eigenvalues(&problem, config)?;
    timings.iterate = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let refined = restricted_l1_refine(&problem, &vectors, &mle, config)?;
    timings.refine = start.elapsed().as_secs_f64();

    let lams = canonicalize(&problem, &refined.lams);
    let mut trace = mle.trace.clone();
    trace.extend_from_slice(&refined.trace[1..]);
    let spectra = vectors
        .into_iter()
        .zip(lams)
        .enumerate()
        .map(|(ax, (eigenvectors, precision_eigenvalues))| AxisSpectrum {
            axis: structure.axis_names()[ax].clone(),
            eigenvectors,
            gram_eigenvalues: problem.p()[ax].clone(),
            precision_eigenvalues,
            rank_deficient: problem.is_rank_deficient(ax),
        })
        .collect();
    Ok(FitResult {
        spectra,
        iterations: mle.iterations,
        l1_iterations: refined.iterations,
        objective: refined.objective,
        objective_trace: trace,
        converged: mle.converged,
        max_gradient: mle.max_gradient,
        timings,
    })
}
