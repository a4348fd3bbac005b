//! Data conditioning applied before Gram computation.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{effective_gram, gram, matricize, Dataset, DenseTensor, GramSet, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocessStep {
    Center,
    Log1p,
    Nonparanormal,
}

/// Ordered preprocessing steps for one modality.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PreprocessSpec {
    pub steps: Vec<PreprocessStep>,
}

impl PreprocessSpec {
    pub fn new(steps: Vec<PreprocessStep>) -> Result<Self> {
        let spec = Self { steps };
        spec.validate()?;
        Ok(spec)
    }

    /// `nonparanormal` replaces the Gram computation, so it must come last
    /// and may appear at most once.
    pub fn validate(&self) -> Result<()> {
        let last = self.steps.len().saturating_sub(1);
        for (i, step) in self.steps.iter().enumerate() {
            if *step == PreprocessStep::Nonparanormal && i != last {
                return Err(Error::arg(
                    "`nonparanormal` must be the last preprocessing step",
                ));
            }
        }
        Ok(())
    }

    pub fn uses_nonparanormal(&self) -> bool {
        self.steps.last() == Some(&PreprocessStep::Nonparanormal)
    }

    /// Applies the value transforms (every step except `nonparanormal`).
    pub fn apply(&self, tensor: &DenseTensor) -> Result<DenseTensor> {
        self.validate()?;
        let mut out = tensor.clone();
        for step in &self.steps {
            out = match step {
                PreprocessStep::Center => center(&out),
                PreprocessStep::Log1p => log1p_transform(&out)?,
                PreprocessStep::Nonparanormal => out,
            };
        }
        Ok(out)
    }
}

/// Preprocessing per modality name; modalities not listed are left as is.
pub type PreprocessPlan = BTreeMap<String, PreprocessSpec>;

/// Subtracts the global mean of all entries.
pub fn center(tensor: &DenseTensor) -> DenseTensor {
    let shift = |values: &[f64]| values.iter().sum::<f64>() / values.len() as f64;
    let first = shift(tensor.values());
    let mut values: Vec<f64> = tensor.values().iter().map(|v| v - first).collect();
    // A second pass removes the rounding residue of the first.
    let residue = shift(&values);
    values.iter_mut().for_each(|v| *v -= residue);
    DenseTensor::new(tensor.shape().to_vec(), values).expect("shape unchanged and values finite")
}

/// Elementwise `ln(1 + x)`; all entries must be non-negative.
pub fn log1p_transform(tensor: &DenseTensor) -> Result<DenseTensor> {
    if let Some(v) = tensor.values().iter().find(|v| **v < 0.0) {
        return Err(Error::Domain(format!("log1p of negative entry {v}")));
    }
    tensor.map(f64::ln_1p)
}

/// Kendall's tau-b between `x` and `y` in `O(n log n)`.
///
/// Returns `None` when either sequence is constant (tau undefined).
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "sequences differ in length");
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let pairs = |t: u64| t * (t.saturating_sub(1)) / 2;
    let n0 = pairs(n as u64);
    let (mut tied_x, mut tied_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                tied_xy += pairs(run_xy);
                run_xy = 1;
            }
        } else {
            tied_x += pairs(run_x);
            tied_xy += pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    tied_x += pairs(run_x);
    tied_xy += pairs(run_xy);

    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut tied_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            tied_y += pairs(run_y);
            run_y = 1;
        }
    }
    tied_y += pairs(run_y);

    if tied_x == n0 || tied_y == n0 {
        return None;
    }
    let numerator = n0 as f64 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64;
    let denominator = ((n0 - tied_x) as f64 * (n0 - tied_y) as f64).sqrt();
    Some((numerator / denominator).clamp(-1.0, 1.0))
}

/// Stable merge sort of `v` returning the number of inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(left, bl) + merge_count(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Rank-based substitute for the Gram matrix of `axis_name`.
///
/// Entry `(i, j)` is `d_rest · sin(π/2 · τ_ij)` with `τ_ij` Kendall's tau-b
/// between rows `i` and `j` of the matricization, averaged over samples.
/// The diagonal is `d_rest` and negative eigenvalues are clipped to zero.
pub fn nonparanormal_gram(modality: &Modality, axis_name: &str) -> Result<DMatrix<f64>> {
    let axis = modality.axis_position(axis_name).ok_or_else(|| {
        Error::arg(format!(
            "axis `{axis_name}` is not part of modality `{}`",
            modality.name()
        ))
    })?;
    let shape = modality.shape();
    let d = shape[axis];
    let rest: usize = shape.iter().product::<usize>() / d;
    if rest < 2 {
        return Err(Error::arg(format!(
            "nonparanormal Gram of `{axis_name}` needs at least two observations per row"
        )));
    }
    let samples = modality.samples();
    let mut tau = DMatrix::<f64>::zeros(d, d);
    for sample in samples {
        let rows: Vec<Vec<f64>> = {
            let m = matricize(sample, axis)?;
            (0..d).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        for (i, row) in rows.iter().enumerate() {
            if row.iter().all(|v| *v == row[0]) {
                log::warn!(
                    "modality `{}`, axis `{axis_name}`: row {i} is constant; its rank correlations are set to 0",
                    modality.name()
                );
            }
        }
        let upper: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|i| {
                (i + 1..d)
                    .map(|j| kendall_tau_b(&rows[i], &rows[j]).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        for (i, row) in upper.iter().enumerate() {
            for (off, t) in row.iter().enumerate() {
                tau[(i, i + 1 + off)] += t;
            }
        }
    }
    let scale = rest as f64;
    let n = samples.len() as f64;
    let mut out = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            scale
        } else {
            let t = if i < j { tau[(i, j)] } else { tau[(j, i)] } / n;
            scale * (FRAC_PI_2 * t).sin()
        }
    });
    clip_to_psd(&mut out);
    Ok(out)
}

fn clip_to_psd(m: &mut DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    *m = (&rebuilt + rebuilt.transpose()) * 0.5;
}

/// Applies the value transforms of `plan` to every listed modality.
pub fn apply_plan(dataset: &Dataset, plan: &PreprocessPlan) -> Result<Dataset> {
    for name in plan.keys() {
        if !dataset.modalities().iter().any(|m| m.name() == name) {
            return Err(Error::arg(format!(
                "preprocessing names unknown modality `{name}`"
            )));
        }
    }
    dataset.map_modalities(|m| match plan.get(m.name()) {
        Some(spec) => m.map_samples(|s| spec.apply(s)),
        None => Ok(m.clone()),
    })
}

/// Effective Gram matrices after preprocessing, with the rank-based
/// substitute for modalities whose spec ends in `nonparanormal`.
pub fn prepared_gram(dataset: &Dataset, plan: &PreprocessPlan) -> Result<GramSet> {
    let prepared = apply_plan(dataset, plan)?;
    let skeptic = |m: &Modality| plan.get(m.name()).is_some_and(|s| s.uses_nonparanormal());
    if !prepared.modalities().iter().any(skeptic) {
        return effective_gram(&prepared);
    }
    prepared.structure()?;
    let matrices = prepared
        .axes()
        .par_iter()
        .map(|axis| {
            let mut total = DMatrix::zeros(axis.size, axis.size);
            for m in prepared.modalities() {
                if m.axis_position(&axis.name).is_none() {
                    continue;
                }
                total += if skeptic(m) {
                    nonparanormal_gram(m, &axis.name)?
                } else {
                    gram(m, &axis.name)?
                };
            }
            Ok(total)
        })
        .collect::<Result<Vec<_>>>()?;
    GramSet::new(
        prepared.axes().iter().map(|a| a.name.clone()).collect(),
        matrices,
    )
}
