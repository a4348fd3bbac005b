//! Synthetic ground truths, Kronecker-sum normal sampling, recovery metrics,
//! a dense brute-force reference fit and the runtime benchmark harness.

use std::collections::{BTreeMap, VecDeque};
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_grams, EstimatorConfig, PriorSpec, Priors};
use crate::sparsify::SparseGraph;
use crate::tensor::{
    effective_gram, kron_sum_dense, matricize, stridewise_blockwise_trace, unmatricize, Dataset,
    DenseTensor, Modality,
};

/// Erdős–Rényi precision: each off-diagonal pair is an edge with probability
/// `p_edge`, weighted uniformly on `[−1, −0.2] ∪ [0.2, 1]`; the diagonal is
/// the row's absolute sum plus 0.5.
pub fn gen_er_precision(d: usize, p_edge: f64, seed: u64) -> Result<DMatrix<f64>> {
    if d < 1 {
        return Err(Error::arg("a precision matrix needs at least one vertex"));
    }
    if !(0.0..=1.0).contains(&p_edge) {
        return Err(Error::arg(format!(
            "edge probability {p_edge} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i + 1..d {
            if rng.random::<f64>() < p_edge {
                let magnitude = rng.random_range(0.2..=1.0);
                let w = if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                };
                m[(i, j)] = w;
                m[(j, i)] = w;
            }
        }
    }
    for i in 0..d {
        m[(i, i)] = m.row(i).abs().sum() + 0.5;
    }
    Ok(m)
}

/// Precision of a unit-innovation AR(1) chain with coefficient `phi`.
pub fn gen_ar1_precision(d: usize, phi: f64) -> Result<DMatrix<f64>> {
    if d < 1 {
        return Err(Error::arg("a precision matrix needs at least one vertex"));
    }
    if !(phi.abs() < 1.0) {
        return Err(Error::arg(format!(
            "AR(1) coefficient {phi} must satisfy |φ| < 1"
        )));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| match i.abs_diff(j) {
        0 if i == 0 || i == d - 1 => 1.0,
        0 => 1.0 + phi * phi,
        1 => -phi,
        _ => 0.0,
    }))
}

/// True per-axis precision matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub axes: Vec<String>,
    pub precisions: Vec<DMatrix<f64>>,
}

impl GroundTruth {
    pub fn new(axes: Vec<String>, precisions: Vec<DMatrix<f64>>) -> Result<Self> {
        if axes.len() != precisions.len() {
            return Err(Error::arg("one precision matrix per axis"));
        }
        for (name, m) in axes.iter().zip(&precisions) {
            check_spd(m, name)?;
        }
        Ok(Self { axes, precisions })
    }

    pub fn precision(&self, axis: &str) -> Option<&DMatrix<f64>> {
        self.axes
            .iter()
            .position(|a| a == axis)
            .map(|i| &self.precisions[i])
    }

    /// Off-diagonal support `(i, j)`, `i < j`, of one axis.
    pub fn edges(&self, axis: usize) -> Vec<(usize, usize)> {
        let m = &self.precisions[axis];
        (0..m.nrows())
            .flat_map(|i| (i + 1..m.nrows()).map(move |j| (i, j)))
            .filter(|&(i, j)| m[(i, j)] != 0.0)
            .collect()
    }

    /// The true graph of one axis.
    pub fn graph(&self, axis: usize) -> Result<SparseGraph> {
        let mut g = crate::sparsify::threshold_global(&self.precisions[axis], 1.0)?;
        g.axis = self.axes[axis].clone();
        Ok(g)
    }
}

fn check_spd(m: &DMatrix<f64>, name: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    crate::tensor::check_symmetric(m, 1e-10)
        .map_err(|_| Error::NotPositiveDefinite(format!("precision `{name}` is not symmetric")))?;
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite(format!(
            "precision `{name}` has a nonpositive eigenvalue"
        )));
    }
    Ok(eig)
}

/// Draws `samples` tensors with `vec(X) ~ N(0, (⊕_ℓ Ψ_ℓ)⁻¹)` without forming
/// the Kronecker sum. Sample `s` uses stream `s` of a ChaCha20 generator
/// seeded with `seed`, so results do not depend on the thread count.
pub fn sample_ks_normal(
    precisions: &[DMatrix<f64>],
    samples: usize,
    seed: u64,
) -> Result<Vec<DenseTensor>> {
    if precisions.is_empty() {
        return Err(Error::arg("at least one axis is required"));
    }
    let eigs = precisions
        .iter()
        .enumerate()
        .map(|(i, m)| check_spd(m, &format!("axis {i}")))
        .collect::<Result<Vec<_>>>()?;
    let shape: Vec<usize> = precisions.iter().map(|m| m.nrows()).collect();
    let values: Vec<&[f64]> = eigs.iter().map(|e| e.eigenvalues.as_slice()).collect();
    let grid = crate::tensor::ModalityGrid::new(&values)?;
    let scale: Vec<f64> = grid.sums().iter().map(|s| 1.0 / s.sqrt()).collect();
    let len = scale.len();
    let mut z = vec![0.0; samples * len];
    z.par_chunks_mut(len.max(1))
        .enumerate()
        .for_each(|(s, chunk)| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            for (x, c) in chunk.iter_mut().zip(&scale) {
                *x = c * rng.sample::<f64, _>(StandardNormal);
            }
        });
    // Samples form a leading batch axis, so each mode product is one GEMM.
    let batch_shape: Vec<usize> = std::iter::once(samples)
        .chain(shape.iter().copied())
        .collect();
    if samples == 0 {
        return Ok(Vec::new());
    }
    let mut t = DenseTensor::new(batch_shape.clone(), z)?;
    for (ax, eig) in eigs.iter().enumerate() {
        let m = &eig.eigenvectors * matricize(&t, ax + 1)?;
        t = unmatricize(&m, &batch_shape, ax + 1)?;
    }
    t.into_values()
        .chunks_exact(len)
        .map(|c| DenseTensor::new(shape.clone(), c.to_vec()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub area: f64,
    pub prevalence: f64,
}

/// Precision-recall curve of `|scores|` against the nonzero off-diagonal
/// support of `truth`, over upper-triangle pairs. One point per distinct
/// score, strongest first; the area is the trapezoid rule in recall with the
/// curve extended flat to recall 0 and, if needed, to recall 1 at the
/// prevalence.
pub fn pr_curve(scores: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<PrCurve> {
    if !scores.is_square() || scores.shape() != truth.shape() {
        return Err(Error::arg(
            "scores and truth must be square matrices of one size",
        ));
    }
    let d = scores.nrows();
    let mut pairs: Vec<(f64, bool)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| (scores[(i, j)].abs(), truth[(i, j)] != 0.0))
        .collect();
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::arg("the true graph has no edges"));
    }
    if pairs.iter().any(|p| p.0.is_nan()) {
        return Err(Error::arg("scores contain NaN"));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut taken) = (0usize, 0usize);
    for (k, &(score, hit)) in pairs.iter().enumerate() {
        taken += 1;
        tp += usize::from(hit);
        if k + 1 == pairs.len() || pairs[k + 1].0 != score {
            points.push(PrPoint {
                threshold: score,
                recall: tp as f64 / positives as f64,
                precision: tp as f64 / taken as f64,
            });
        }
    }
    let prevalence = positives as f64 / pairs.len() as f64;
    let mut area = 0.0;
    let (mut r0, mut p0) = (0.0, points[0].precision);
    for p in &points {
        area += (p.recall - r0) * 0.5 * (p.precision + p0);
        (r0, p0) = (p.recall, p.precision);
    }
    if r0 < 1.0 {
        area += (1.0 - r0) * 0.5 * (p0 + prevalence);
    }
    Ok(PrCurve {
        points,
        area,
        prevalence,
    })
}

/// Newman's categorical assortativity of the unweighted graph.
pub fn assortativity<L: Ord>(graph: &SparseGraph, labels: &[L]) -> Result<f64> {
    if labels.len() != graph.vertices {
        return Err(Error::arg(format!(
            "{} labels for {} vertices",
            labels.len(),
            graph.vertices
        )));
    }
    if graph.edges.is_empty() {
        return Err(Error::arg("assortativity needs at least one edge"));
    }
    let mut ids = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    let c = ids.len();
    let mut e = DMatrix::<f64>::zeros(c, c);
    let unit = 0.5 / graph.edges.len() as f64;
    for edge in &graph.edges {
        let (a, b) = (ids[&labels[edge.i]], ids[&labels[edge.j]]);
        e[(a, b)] += unit;
        e[(b, a)] += unit;
    }
    let ab: f64 = (0..c).map(|k| e.row(k).sum() * e.column(k).sum()).sum();
    let denom = 1.0 - ab;
    if denom.abs() < 1e-15 {
        return Err(Error::Degenerate(
            "every edge endpoint lies in one category".into(),
        ));
    }
    Ok((e.trace() - ab) / denom)
}

/// Options of [`brute_force_fit`].
#[derive(Clone, Copy, Debug)]
pub struct BruteForceConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for BruteForceConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 200_000,
        }
    }
}

/// Dense reference estimator for tiny datasets: minimizes the exact negative
/// log-likelihood over full symmetric matrices, building every Kronecker sum
/// and log-determinant explicitly, with nonmonotone Barzilai–Borwein steps.
pub fn brute_force_fit(
    dataset: &Dataset,
    priors: &Priors,
    config: &BruteForceConfig,
) -> Result<Vec<DMatrix<f64>>> {
    let structure = dataset.structure()?;
    let sizes = structure.axis_sizes().to_vec();
    let k = sizes.len();
    let mut linear: Vec<DMatrix<f64>> = sizes.iter().map(|&d| DMatrix::zeros(d, d)).collect();
    for (m, axes) in dataset.modalities().iter().zip(structure.modalities()) {
        let total: usize = m.shape().iter().product();
        let mut c = DMatrix::<f64>::zeros(total, total);
        for s in m.samples() {
            let v = nalgebra::DVector::from_column_slice(s.values());
            c += &v * v.transpose();
        }
        c /= m.samples().len() as f64;
        for (pos, &ax) in axes.iter().enumerate() {
            let (before, after) = strides(m.shape(), pos);
            linear[ax] += stridewise_blockwise_trace(&c, before, after)? * 0.5;
        }
    }
    let mut weights = vec![0.0; k];
    for (name, prior) in priors {
        let ax = structure
            .axis_index(name)
            .ok_or_else(|| Error::arg(format!("prior on unknown axis `{name}`")))?;
        prior.validate(sizes[ax])?;
        if let PriorSpec::Wishart { scale, .. } = prior {
            let inv = scale
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("Wishart scale".into()))?;
            linear[ax] += inv * 0.5;
        }
        weights[ax] = prior.log_weight(sizes[ax]);
    }
    let modalities: Vec<(Vec<usize>, Vec<usize>)> = dataset
        .modalities()
        .iter()
        .zip(structure.modalities())
        .map(|(m, axes)| (axes.clone(), m.shape().to_vec()))
        .collect();

    let eval = |psi: &[DMatrix<f64>]| -> Option<(f64, Vec<DMatrix<f64>>)> {
        let mut value = 0.0;
        let mut grad: Vec<DMatrix<f64>> = linear.clone();
        for ax in 0..k {
            value += linear[ax].dot(&psi[ax]);
            if weights[ax] != 0.0 {
                let ch = Cholesky::new(psi[ax].clone())?;
                value -= weights[ax] * 2.0 * ch.l().diagonal().map(f64::ln).sum();
                grad[ax] -= ch.inverse() * weights[ax];
            }
        }
        for (axes, shape) in &modalities {
            let factors: Vec<DMatrix<f64>> = axes.iter().map(|&a| psi[a].clone()).collect();
            let sum = kron_sum_dense(&factors, 4096).ok()?;
            let ch = Cholesky::new(sum)?;
            value -= ch.l().diagonal().map(f64::ln).sum();
            let inv = ch.inverse();
            for (pos, &ax) in axes.iter().enumerate() {
                let (before, after) = strides(shape, pos);
                grad[ax] -= stridewise_blockwise_trace(&inv, before, after).ok()? * 0.5;
            }
        }
        let grad = grad
            .into_iter()
            .map(|g| (&g + g.transpose()) * 0.5)
            .collect();
        Some((value, grad))
    };
    let norm = |g: &[DMatrix<f64>]| g.iter().map(|m| m.amax()).fold(0.0, f64::max);
    let inner = |a: &[DMatrix<f64>], b: &[DMatrix<f64>]| {
        a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>()
    };

    let mut psi: Vec<DMatrix<f64>> = sizes.iter().map(|&d| DMatrix::identity(d, d)).collect();
    let (mut f, mut g) =
        eval(&psi).ok_or_else(|| Error::NotPositiveDefinite("identity start".into()))?;
    let mut recent = VecDeque::from([f]);
    let mut alpha = 1.0 / norm(&g).max(1.0);
    for it in 0..config.max_iterations {
        let gnorm = norm(&g);
        if gnorm < config.tolerance {
            return Ok(psi);
        }
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gg = inner(&g, &g);
        let mut step = alpha;
        let (next, f_next, g_next) = loop {
            let trial: Vec<DMatrix<f64>> = psi.iter().zip(&g).map(|(p, d)| p - d * step).collect();
            if let Some((fv, gv)) = eval(&trial) {
                if fv <= reference - 1e-4 * step * gg + 1e-13 * (1.0 + reference.abs()) {
                    break (trial, fv, gv);
                }
            }
            step *= 0.5;
            if step < 1e-20 {
                return Err(Error::NonConvergence {
                    iterations: it,
                    step,
                    max_gradient: gnorm,
                });
            }
        };
        let s: Vec<DMatrix<f64>> = next.iter().zip(&psi).map(|(a, b)| a - b).collect();
        let y: Vec<DMatrix<f64>> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = inner(&s, &y);
        alpha = if sy > 0.0 {
            (inner(&s, &s) / sy).clamp(1e-12, 1e12)
        } else {
            step * 2.0
        };
        (psi, f, g) = (next, f_next, g_next);
        recent.push_back(f);
        if recent.len() > 10 {
            recent.pop_front();
        }
    }
    Err(Error::NonConvergence {
        iterations: config.max_iterations,
        step: alpha,
        max_gradient: norm(&g),
    })
}

fn strides(shape: &[usize], pos: usize) -> (usize, usize) {
    (
        shape[..pos].iter().product(),
        shape[pos + 1..].iter().product(),
    )
}

/// How benchmark data is generated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Er {
        p_edge: f64,
    },
    Ar1 {
        phi: f64,
    },
    /// Independent standard normal entries (all precisions identity).
    Identity,
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution::Er { p_edge: 0.02 }
    }
}

impl Distribution {
    /// Per-axis truth for `sizes`; axis `ℓ` uses seed `seed + ℓ`.
    pub fn truth(&self, sizes: &[usize], seed: u64) -> Result<Vec<DMatrix<f64>>> {
        sizes
            .iter()
            .enumerate()
            .map(|(ax, &d)| match *self {
                Distribution::Er { p_edge } => {
                    gen_er_precision(d, p_edge, seed.wrapping_add(ax as u64))
                }
                Distribution::Ar1 { phi } => gen_ar1_precision(d, phi),
                Distribution::Identity => Ok(DMatrix::identity(d, d)),
            })
            .collect()
    }

    /// Samples of one modality over axes with the given truths.
    pub fn sample(
        &self,
        truth: &[DMatrix<f64>],
        samples: usize,
        seed: u64,
    ) -> Result<Vec<DenseTensor>> {
        match self {
            Distribution::Identity => {
                let shape: Vec<usize> = truth.iter().map(|m| m.nrows()).collect();
                let len: usize = shape.iter().product();
                (0..samples)
                    .map(|s| {
                        let mut rng = ChaCha20Rng::seed_from_u64(seed);
                        rng.set_stream(s as u64);
                        DenseTensor::new(
                            shape.clone(),
                            (0..len).map(|_| rng.sample(StandardNormal)).collect(),
                        )
                    })
                    .collect()
            }
            _ => sample_ks_normal(truth, samples, seed),
        }
    }
}

/// One benchmark scenario: a single modality over `sizes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchScenario {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default)]
    pub distribution: Distribution,
    #[serde(default)]
    pub config: EstimatorConfig,
    #[serde(default = "default_memory_cap")]
    pub memory_cap_bytes: u64,
}

fn one() -> usize {
    1
}

fn default_memory_cap() -> u64 {
    8 << 30
}

impl BenchScenario {
    /// Rough peak working set: samples plus matricized copies, and a handful
    /// of dense `d_ℓ × d_ℓ` matrices per axis.
    pub fn memory_estimate(&self) -> u64 {
        let total: u64 = self.sizes.iter().map(|&d| d as u64).product();
        let squares: u64 = self.sizes.iter().map(|&d| (d as u64).pow(2)).sum();
        8 * (3 * total * self.samples as u64 + 6 * squares)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub sizes: Vec<usize>,
    pub axes: usize,
    pub seed: u64,
    pub samples: usize,
    pub threads: usize,
    pub gram_seconds: f64,
    pub decompose_seconds: f64,
    pub iterate_seconds: f64,
    pub refine_seconds: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl BenchRecord {
    pub fn total_seconds(&self) -> f64 {
        self.gram_seconds + self.decompose_seconds + self.iterate_seconds + self.refine_seconds
    }
}

/// Generates data for every seed and times one fit on a single worker thread.
pub fn bench_run(scenario: &BenchScenario) -> Result<Vec<BenchRecord>> {
    let estimate = scenario.memory_estimate();
    if estimate > scenario.memory_cap_bytes {
        return Err(Error::MemoryCap {
            estimate,
            cap: scenario.memory_cap_bytes,
        });
    }
    if scenario.sizes.is_empty() || scenario.sizes.contains(&0) {
        return Err(Error::arg("benchmark axes need positive sizes"));
    }
    scenario.config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::arg(e.to_string()))?;
    let names: Vec<String> = (0..scenario.sizes.len())
        .map(|i| format!("axis{i}"))
        .collect();
    scenario
        .seeds
        .iter()
        .map(|&seed| {
            let truth = scenario.distribution.truth(&scenario.sizes, seed)?;
            let samples = scenario
                .distribution
                .sample(&truth, scenario.samples, seed)?;
            let mut ds = Dataset::new();
            for (n, &d) in names.iter().zip(&scenario.sizes) {
                ds.add_axis(n, d)?;
            }
            ds.add_modality(Modality::new("data", names.clone(), samples)?)?;
            let structure = ds.structure()?;
            let (fit, gram_seconds) = pool.install(|| {
                let start = Instant::now();
                let grams = effective_gram(&ds)?;
                let gram_seconds = start.elapsed().as_secs_f64();
                Ok::<_, Error>((
                    fit_grams(&grams, &structure, &Priors::new(), &scenario.config)?,
                    gram_seconds,
                ))
            })?;
            Ok(BenchRecord {
                sizes: scenario.sizes.clone(),
                axes: scenario.sizes.len(),
                seed,
                samples: scenario.samples,
                threads: 1,
                gram_seconds,
                decompose_seconds: fit.timings.decompose,
                iterate_seconds: fit.timings.iterate,
                refine_seconds: fit.timings.refine,
                iterations: fit.iterations,
                converged: fit.converged,
            })
        })
        .collect()
}

/// Runs scenarios in order, stopping after the first whose slowest record
/// exceeds `max_seconds`.
pub fn bench_sweep(
    scenarios: &[BenchScenario],
    max_seconds: Option<f64>,
) -> Result<Vec<BenchRecord>> {
    let mut out = Vec::new();
    for s in scenarios {
        let records = bench_run(s)?;
        let slowest = records
            .iter()
            .map(BenchRecord::total_seconds)
            .fold(0.0, f64::max);
        out.extend(records);
        if max_seconds.is_some_and(|m| slowest > m) {
            log::info!(
                "stopping sweep at sizes {:?}: {slowest:.1} s over budget",
                s.sizes
            );
            break;
        }
    }
    Ok(out)
}
