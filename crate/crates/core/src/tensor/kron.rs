use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default side-length cap for dense Kronecker-sum construction.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Standard Kronecker product `a ⊗ b`.
pub fn kron_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Dense `⊕_ℓ Ψ_ℓ = Σ_ℓ I_{d<ℓ} ⊗ Ψ_ℓ ⊗ I_{d>ℓ}`, for oracles and tests.
pub fn kron_sum_dense(matrices: &[DMatrix<f64>], cap: usize) -> Result<DMatrix<f64>> {
    if matrices.is_empty() {
        return Err(Error::arg("Kronecker sum of no matrices"));
    }
    if let Some(m) = matrices.iter().find(|m| !m.is_square()) {
        return Err(Error::arg(format!(
            "{}x{} factor is not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let sizes: Vec<usize> = matrices.iter().map(|m| m.nrows()).collect();
    let total = sizes
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    if total > cap {
        return Err(Error::SizeCap {
            requested: total,
            cap,
        });
    }
    let mut out = DMatrix::zeros(total, total);
    let mut before = 1;
    for (k, psi) in matrices.iter().enumerate() {
        let d = sizes[k];
        let after: usize = sizes[k + 1..].iter().product();
        for a in 0..before {
            for b in 0..after {
                for i in 0..d {
                    let row = (a * d + i) * after + b;
                    for j in 0..d {
                        out[(row, (a * d + j) * after + b)] += psi[(i, j)];
                    }
                }
            }
        }
        before *= d;
    }
    Ok(out)
}

/// Stridewise-blockwise trace `tr^a_b[M]`.
///
/// `M` is viewed with row and column indices split as `(x, i, y)` with
/// `x < a`, `i < m/(ab)` and `y < b` (row-major), and the result is
/// `out[i][j] = Σ_{x,y} M[(x,i,y), (x,j,y)]`. For symmetric `M` this equals
/// `tr[M (I_a ⊗ J^{ij} ⊗ I_b)]`.
pub fn stridewise_blockwise_trace(m: &DMatrix<f64>, a: usize, b: usize) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::arg(
            "stridewise-blockwise trace needs a square matrix",
        ));
    }
    let side = m.nrows();
    if a == 0 || b == 0 || !side.is_multiple_of(a * b) {
        return Err(Error::arg(format!(
            "a·b = {a}·{b} must divide side length {side}"
        )));
    }
    let k = side / (a * b);
    Ok(DMatrix::from_fn(k, k, |i, j| {
        let mut acc = 0.0;
        for x in 0..a {
            for y in 0..b {
                acc += m[((x * k + i) * b + y, (x * k + j) * b + y)];
            }
        }
        acc
    }))
}

/// Grid of Kronecker-sum eigenvalues `Σ_ℓ λ_ℓ^{(m_ℓ)}` for one modality,
/// laid out row-major over the modality's axes.
#[derive(Clone, Debug)]
pub struct ModalityGrid {
    sizes: Vec<usize>,
    sums: Vec<f64>,
}

impl ModalityGrid {
    /// Builds the grid; fails if any eigenvalue sum is not strictly positive.
    pub fn new(eigvals: &[&[f64]]) -> Result<Self> {
        if eigvals.is_empty() || eigvals.iter().any(|v| v.is_empty()) {
            return Err(Error::arg("every axis needs at least one eigenvalue"));
        }
        let min_sum: f64 = eigvals
            .iter()
            .map(|v| v.iter().copied().fold(f64::INFINITY, f64::min))
            .sum();
        if !(min_sum > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "smallest Kronecker-sum eigenvalue is {min_sum:e}"
            )));
        }
        let sizes: Vec<usize> = eigvals.iter().map(|v| v.len()).collect();
        let total: usize = sizes.iter().product();
        let mut sums = Vec::with_capacity(total);
        sums.extend_from_slice(eigvals[0]);
        for lam in &eigvals[1..] {
            let prev = std::mem::take(&mut sums);
            sums.reserve(prev.len() * lam.len());
            for &s in &prev {
                sums.extend(lam.iter().map(|&l| s + l));
            }
        }
        Ok(Self { sizes, sums })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// `log |⊕ Λ_ℓ|`.
    pub fn log_det(&self) -> f64 {
        log_sum(&self.sums)
    }

    /// Log-determinant plus per-axis marginals of `1/s` and `1/s²`.
    pub fn reduce(&self) -> GridReduction {
        let inv: Vec<f64> = self.sums.iter().map(|s| 1.0 / s).collect();
        let inv2: Vec<f64> = inv.iter().map(|v| v * v).collect();
        let axes = 0..self.sizes.len();
        GridReduction {
            log_det: self.log_det(),
            first: axes.clone().map(|k| self.marginal(&inv, k)).collect(),
            second: axes.map(|k| self.marginal(&inv2, k)).collect(),
        }
    }

    /// Sums `values` (a grid-shaped array) over every axis except `axis`.
    ///
    /// Reduction order: leading indices outermost, then trailing indices
    /// innermost, independent of threading.
    pub fn marginal(&self, values: &[f64], axis: usize) -> Vec<f64> {
        let d = self.sizes[axis];
        let after: usize = self.sizes[axis + 1..].iter().product();
        let mut out = vec![0.0; d];
        for block in values.chunks_exact(d * after) {
            for (i, row) in block.chunks_exact(after).enumerate() {
                out[i] += row.iter().sum::<f64>();
            }
        }
        out
    }
}

/// Summary of one [`ModalityGrid`] used by the eigenvalue solver.
#[derive(Clone, Debug)]
pub struct GridReduction {
    pub log_det: f64,
    /// `first[k][i]`: sum of `1/s` over grid cells with axis-`k` index `i`.
    pub first: Vec<Vec<f64>>,
    /// Same with `1/s²`.
    pub second: Vec<Vec<f64>>,
}

/// `Σ ln x` for positive `x`, taking one logarithm per block of eight
/// factors unless the block product leaves the safe range.
fn log_sum(values: &[f64]) -> f64 {
    const LO: f64 = 1e-280;
    const HI: f64 = 1e280;
    let mut total = 0.0;
    let mut chunks = values.chunks_exact(8);
    for chunk in &mut chunks {
        let prod: f64 = chunk.iter().product();
        total += if prod > LO && prod < HI {
            prod.ln()
        } else {
            chunk.iter().map(|v| v.ln()).sum()
        };
    }
    total + chunks.remainder().iter().map(|v| v.ln()).sum::<f64>()
}

/// Diagonal of `tr^{d<ℓ}_{d>ℓ}[(⊕ Λ)^{-1}]` for one modality without forming
/// the Kronecker sum: entry `i` sums `1/(Σ_ℓ' λ_ℓ'^{(m_ℓ')})` over all
/// multi-indices with `m_target = i`.
pub fn ks_diag_marginal(eigvals: &[&[f64]], target: usize) -> Result<Vec<f64>> {
    if target >= eigvals.len() {
        return Err(Error::arg(format!("target axis {target} out of range")));
    }
    let grid = ModalityGrid::new(eigvals)?;
    let inv: Vec<f64> = grid.sums.iter().map(|s| 1.0 / s).collect();
    Ok(grid.marginal(&inv, target))
}
