use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ModalityGrid, Structure};

/// Relative threshold below which a Gram eigenvalue counts as zero.
pub const RANK_EPSILON: f64 = 1e-8;

/// The eigenvalue-space objective of one fit: per-axis priorized Gram
/// eigenvalues `p_ℓ`, per-axis log-barrier weights from the priors, and the
/// modality structure.
#[derive(Clone, Debug)]
pub struct EigenProblem {
    structure: Structure,
    p: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    pinned: Vec<Vec<bool>>,
    free: Vec<Vec<usize>>,
    caps: Vec<f64>,
}

/// Objective value with gradient and diagonal curvature at one point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<Vec<f64>>,
    pub curvature: Vec<Vec<f64>>,
}

impl EigenProblem {
    /// `log_weights[ℓ]` is `(n − d_ℓ − 1)/2` for a Wishart prior and 0 otherwise.
    pub fn new(structure: Structure, p: Vec<Vec<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        let k = structure.axis_count();
        if p.len() != k || log_weights.len() != k {
            return Err(Error::arg(
                "one eigenvalue vector and one prior weight per axis",
            ));
        }
        for (ax, (v, &d)) in p.iter().zip(structure.axis_sizes()).enumerate() {
            if v.len() != d {
                return Err(Error::arg(format!(
                    "axis `{}` has size {d} but {} eigenvalues",
                    structure.axis_names()[ax],
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) || !log_weights[ax].is_finite() {
                return Err(Error::arg("eigenvalues and prior weights must be finite"));
            }
        }
        let mut pinned = Vec::with_capacity(k);
        let mut caps = Vec::with_capacity(k);
        for (ax, v) in p.iter().enumerate() {
            let top = v.iter().copied().fold(0.0, f64::max);
            if top <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "axis `{}` has no positive Gram eigenvalue",
                    structure.axis_names()[ax]
                )));
            }
            let floor = RANK_EPSILON * top;
            // With a log-barrier prior every coordinate has a finite optimum.
            let pin = log_weights[ax] <= 0.0;
            pinned.push(v.iter().map(|&x| pin && x <= floor).collect());
            caps.push(1.0 / floor);
        }
        let free = pinned
            .iter()
            .map(|pins: &Vec<bool>| (0..pins.len()).filter(|&i| !pins[i]).collect())
            .collect();
        Ok(Self {
            structure,
            p,
            log_weights,
            pinned,
            free,
            caps,
        })
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn p(&self) -> &[Vec<f64>] {
        &self.p
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Coordinates whose Gram eigenvalue is numerically zero. Their optimum
    /// is unbounded: they are treated as infinite by the objective (they
    /// drop out of every Kronecker-sum grid) and reported as `cap(ℓ)`.
    pub fn pinned(&self) -> &[Vec<bool>] {
        &self.pinned
    }

    pub fn cap(&self, axis: usize) -> f64 {
        self.caps[axis]
    }

    pub fn is_rank_deficient(&self, axis: usize) -> bool {
        self.pinned[axis].iter().any(|&b| b)
    }

    /// All-ones start, with pinned coordinates at their cap.
    pub fn initial_point(&self) -> Vec<Vec<f64>> {
        self.pinned
            .iter()
            .zip(&self.caps)
            .map(|(pins, &cap)| pins.iter().map(|&p| if p { cap } else { 1.0 }).collect())
            .collect()
    }

    /// Whether every modality's smallest Kronecker-sum eigenvalue exceeds
    /// `margin` and barrier-weighted axes stay strictly positive.
    pub fn is_feasible(&self, lams: &[Vec<f64>], margin: f64) -> bool {
        let mins: Vec<f64> = lams
            .iter()
            .zip(&self.free)
            .map(|(v, free)| free.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min))
            .collect();
        let modal = self
            .structure
            .modalities()
            .iter()
            .all(|m| m.iter().map(|&a| mins[a]).sum::<f64>() > margin);
        let barrier = self
            .log_weights
            .iter()
            .zip(&mins)
            .all(|(&w, &m)| w == 0.0 || m > 0.0);
        modal && barrier && lams.iter().flatten().all(|x| x.is_finite())
    }

    /// `Σ_ℓ p_ℓ·λ_ℓ − ½ Σ_γ log|⊕_{ℓ∈γ} Λ_ℓ| − Σ_ℓ w_ℓ Σ_i log λ_ℓi`, over
    /// the free coordinates.
    pub fn objective(&self, lams: &[Vec<f64>]) -> Result<f64> {
        self.check_shape(lams)?;
        let log_dets = self
            .structure
            .modalities()
            .par_iter()
            .map(|m| Ok(self.grid(lams, m)?.log_det()))
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.linear_and_prior(lams)? - 0.5 * log_dets.iter().sum::<f64>())
    }

    /// `g_ℓ = p_ℓ − ½ Σ_{γ∋ℓ} marginal_ℓ[(⊕Λ)⁻¹] − w_ℓ/λ_ℓ`.
    pub fn gradient(&self, lams: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate(lams)?.gradient)
    }

    /// Value, gradient and the diagonal of the Hessian in one pass.
    pub fn evaluate(&self, lams: &[Vec<f64>]) -> Result<Evaluation> {
        self.check_shape(lams)?;
        let per_modality = self
            .structure
            .modalities()
            .par_iter()
            .map(|m| Ok(self.grid(lams, m)?.reduce()))
            .collect::<Result<Vec<_>>>()?;
        let mut value = self.linear_and_prior(lams)?;
        let mut gradient = Vec::with_capacity(lams.len());
        let mut curvature = Vec::with_capacity(lams.len());
        for (ax, lam) in lams.iter().enumerate() {
            let w = self.log_weights[ax];
            let mut g = vec![0.0; lam.len()];
            let mut h = vec![0.0; lam.len()];
            for &i in &self.free[ax] {
                g[i] = self.p[ax][i] - w / lam[i];
                h[i] = w / (lam[i] * lam[i]);
            }
            gradient.push(g);
            curvature.push(h);
        }
        for (axes, red) in self.structure.modalities().iter().zip(&per_modality) {
            value -= 0.5 * red.log_det;
            for (pos, &ax) in axes.iter().enumerate() {
                for (&i, m) in self.free[ax].iter().zip(&red.first[pos]) {
                    gradient[ax][i] -= 0.5 * m;
                }
                for (&i, m) in self.free[ax].iter().zip(&red.second[pos]) {
                    curvature[ax][i] += 0.5 * m;
                }
            }
        }
        Ok(Evaluation {
            value,
            gradient,
            curvature,
        })
    }

    fn grid(&self, lams: &[Vec<f64>], axes: &[usize]) -> Result<ModalityGrid> {
        let values: Vec<Vec<f64>> = axes
            .iter()
            .map(|&a| self.free[a].iter().map(|&i| lams[a][i]).collect())
            .collect();
        let slices: Vec<&[f64]> = values.iter().map(Vec::as_slice).collect();
        ModalityGrid::new(&slices)
    }

    fn linear_and_prior(&self, lams: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (ax, lam) in lams.iter().enumerate() {
            let lam: Vec<f64> = self.free[ax].iter().map(|&i| lam[i]).collect();
            total += self.free[ax]
                .iter()
                .zip(&lam)
                .map(|(&i, l)| self.p[ax][i] * l)
                .sum::<f64>();
            let w = self.log_weights[ax];
            if w != 0.0 {
                if let Some(bad) = lam.iter().find(|l| **l <= 0.0) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "axis `{}` eigenvalue {bad:e} under a log-barrier prior",
                        self.structure.axis_names()[ax]
                    )));
                }
                total -= w * lam.iter().map(|l| l.ln()).sum::<f64>();
            }
        }
        Ok(total)
    }

    fn check_shape(&self, lams: &[Vec<f64>]) -> Result<()> {
        if lams.len() != self.p.len() || lams.iter().zip(&self.p).any(|(l, p)| l.len() != p.len()) {
            return Err(Error::arg("eigenvalue vectors do not match the axis sizes"));
        }
        Ok(())
    }
}

/// Removes `(K−1)/K` times the mean from a modality's gradient contribution.
pub fn project_gradient(g: &[f64], k: usize) -> Vec<f64> {
    assert!(k >= 1, "a modality spans at least one axis");
    let factor = (k as f64 - 1.0) / k as f64;
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter().map(|x| x - factor * mean).collect()
}
