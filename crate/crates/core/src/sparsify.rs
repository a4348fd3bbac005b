//! Sparse graphs from dense precision estimates, and covariance-thresholding
//! partitions of a dataset into independently estimable blocks.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_grams, AxisSpectrum, EstimatorConfig, FitResult, PriorSpec, Priors};
use crate::preprocess::{prepared_gram, PreprocessPlan};
use crate::tensor::{Dataset, GramSet, Structure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    /// Keep a fraction of all off-diagonal entries.
    Global,
    /// Keep the `k` strongest entries per row.
    Topk,
    /// Like `Topk` after scaling each column to unit absolute sum.
    ColnormTopk,
}

/// Thresholding rule: `parameter` is the keep fraction for `global` and `k`
/// for the per-row rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub method: ThresholdMethod,
    pub parameter: f64,
}

impl ThresholdSpec {
    pub fn apply(&self, axis: &str, m: &DMatrix<f64>) -> Result<SparseGraph> {
        let rows = || -> Result<usize> {
            if self.parameter >= 1.0 && self.parameter.fract() == 0.0 {
                Ok(self.parameter as usize)
            } else {
                Err(Error::arg(format!(
                    "k must be a positive integer, got {}",
                    self.parameter
                )))
            }
        };
        let mut graph = match self.method {
            ThresholdMethod::Global => threshold_global(m, self.parameter)?,
            ThresholdMethod::Topk => threshold_top_k_rows(m, rows()?)?,
            ThresholdMethod::ColnormTopk => threshold_colnorm_top_k(m, rows()?)?,
        };
        graph.axis = axis.to_string();
        Ok(graph)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Undirected weighted graph on `0..vertices`; every edge has `i < j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGraph {
    pub axis: String,
    pub vertices: usize,
    pub method: ThresholdMethod,
    pub parameter: f64,
    pub edges: Vec<Edge>,
}

impl SparseGraph {
    /// Builds a graph, validating edge order, uniqueness and weights.
    pub fn new(
        axis: impl Into<String>,
        vertices: usize,
        method: ThresholdMethod,
        parameter: f64,
        mut edges: Vec<Edge>,
    ) -> Result<Self> {
        edges.sort_by_key(|e| (e.i, e.j));
        for w in edges.windows(2) {
            if (w[0].i, w[0].j) == (w[1].i, w[1].j) {
                return Err(Error::arg(format!(
                    "duplicate edge ({}, {})",
                    w[0].i, w[0].j
                )));
            }
        }
        for e in &edges {
            if e.i >= e.j || e.j >= vertices {
                return Err(Error::arg(format!(
                    "edge ({}, {}) is not an upper-triangle pair",
                    e.i, e.j
                )));
            }
            if !e.weight.is_finite() || e.weight == 0.0 {
                return Err(Error::arg(format!(
                    "edge ({}, {}) has weight {}",
                    e.i, e.j, e.weight
                )));
            }
        }
        Ok(Self {
            axis: axis.into(),
            vertices,
            method,
            parameter,
            edges,
        })
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by_key(&key, |e| (e.i, e.j))
            .is_ok()
    }

    /// Symmetric 0/1 adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.vertices, self.vertices);
        for e in &self.edges {
            a[(e.i, e.j)] = 1.0;
            a[(e.j, e.i)] = 1.0;
        }
        a
    }
}

fn symmetric_value(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    0.5 * (m[(i, j)] + m[(j, i)])
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::arg("thresholding needs a square matrix"));
    }
    Ok(())
}

/// Strongest-first order; equal magnitudes fall back to index order.
fn by_magnitude(a: (f64, usize, usize), b: (f64, usize, usize)) -> Ordering {
    b.0.abs()
        .total_cmp(&a.0.abs())
        .then((a.1, a.2).cmp(&(b.1, b.2)))
}

/// Keeps `⌈f·n⌉` of the `n` nonzero upper-triangle entries, strongest first.
pub fn threshold_global(m: &DMatrix<f64>, keep_fraction: f64) -> Result<SparseGraph> {
    check_square(m)?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::arg(format!(
            "keep fraction {keep_fraction} outside (0, 1]"
        )));
    }
    let d = m.nrows();
    let mut entries: Vec<(f64, usize, usize)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| (symmetric_value(m, i, j), i, j))
        .filter(|(w, _, _)| *w != 0.0)
        .collect();
    entries.sort_by(|a, b| by_magnitude(*a, *b));
    let keep = (keep_fraction * entries.len() as f64).ceil() as usize;
    let edges = entries[..keep.min(entries.len())]
        .iter()
        .map(|&(weight, i, j)| Edge { i, j, weight })
        .collect();
    SparseGraph::new("", d, ThresholdMethod::Global, keep_fraction, edges)
}

/// Union over rows of each row's `k` strongest nonzero off-diagonal entries.
pub fn threshold_top_k_rows(m: &DMatrix<f64>, k: usize) -> Result<SparseGraph> {
    check_square(m)?;
    let graph = top_k_union(m, k, |i, j| m[(i, j)])?;
    Ok(SparseGraph {
        method: ThresholdMethod::Topk,
        ..graph
    })
}

/// [`threshold_top_k_rows`] ranked on the matrix with every column divided
/// by its absolute sum; the emitted weights are the original entries.
pub fn threshold_colnorm_top_k(m: &DMatrix<f64>, k: usize) -> Result<SparseGraph> {
    check_square(m)?;
    let sums: Vec<f64> = m.column_iter().map(|c| c.abs().sum()).collect();
    for (j, s) in sums.iter().enumerate() {
        if *s == 0.0 {
            log::warn!("column {j} is zero and is skipped by column normalization");
        }
    }
    let graph = top_k_union(m, k, |i, j| {
        if sums[j] == 0.0 {
            0.0
        } else {
            m[(i, j)] / sums[j]
        }
    })?;
    Ok(SparseGraph {
        method: ThresholdMethod::ColnormTopk,
        ..graph
    })
}

fn top_k_union(
    m: &DMatrix<f64>,
    k: usize,
    score: impl Fn(usize, usize) -> f64,
) -> Result<SparseGraph> {
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let d = m.nrows();
    if k >= d {
        log::warn!("k = {k} is at least the vertex count {d}; every edge is kept");
    }
    let mut keep = std::collections::BTreeSet::new();
    for i in 0..d {
        let mut row: Vec<(f64, usize, usize)> = (0..d)
            .filter(|&j| j != i)
            .map(|j| (score(i, j), i, j))
            .filter(|(s, _, _)| *s != 0.0)
            .collect();
        row.sort_by(|a, b| by_magnitude(*a, *b));
        for &(_, _, j) in row.iter().take(k) {
            keep.insert((i.min(j), i.max(j)));
        }
    }
    let edges = keep
        .into_iter()
        .map(|(i, j)| Edge {
            i,
            j,
            weight: symmetric_value(m, i, j),
        })
        .filter(|e| e.weight != 0.0)
        .collect();
    SparseGraph::new("", d, ThresholdMethod::Topk, k as f64, edges)
}

/// Connected components of the graph with an edge wherever
/// `|S_ij| ≥ ρ` (and `S_ij ≠ 0`), labeled in order of their smallest vertex.
pub fn threshold_components(s: &DMatrix<f64>, rho: f64) -> Vec<usize> {
    let d = s.nrows();
    let mut uf = UnionFind::<usize>::new(d);
    for j in 0..d {
        for i in 0..j {
            let v = symmetric_value(s, i, j);
            if v != 0.0 && v.abs() >= rho {
                uf.union(i, j);
            }
        }
    }
    let mut label_of_root = BTreeMap::new();
    (0..d)
        .map(|v| {
            let next = label_of_root.len();
            *label_of_root.entry(uf.find(v)).or_insert(next)
        })
        .collect()
}

/// Per-axis vertex components and the per-modality blocks they induce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub axes: Vec<String>,
    /// `labels[ℓ][v]`: component of vertex `v` on axis `ℓ`.
    pub labels: Vec<Vec<usize>>,
    pub rho: Vec<f64>,
    /// Per modality, every tuple of component labels (one per modality axis).
    pub blocks: Vec<Vec<Vec<usize>>>,
}

impl PartitionPlan {
    pub fn component_count(&self, axis: usize) -> usize {
        self.labels[axis].iter().max().map_or(0, |m| m + 1)
    }

    /// Vertices of component `c` on `axis`, ascending.
    pub fn members(&self, axis: usize, c: usize) -> Vec<usize> {
        (0..self.labels[axis].len())
            .filter(|&v| self.labels[axis][v] == c)
            .collect()
    }
}

/// Broadcasts a single threshold or checks one per axis.
fn per_axis(rho: &[f64], k: usize) -> Result<Vec<f64>> {
    let rho = match rho.len() {
        1 => vec![rho[0]; k],
        n if n == k => rho.to_vec(),
        n => return Err(Error::arg(format!("{n} thresholds for {k} axes"))),
    };
    if rho.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::arg("partition thresholds must be non-negative"));
    }
    Ok(rho)
}

/// Thresholds every effective Gram matrix and records the induced blocks.
pub fn covariance_partition(
    grams: &GramSet,
    structure: &Structure,
    rho: &[f64],
) -> Result<PartitionPlan> {
    if grams.names() != structure.axis_names() {
        return Err(Error::arg(
            "Gram matrices and structure list different axes",
        ));
    }
    let rho = per_axis(rho, grams.len())?;
    let labels: Vec<Vec<usize>> = grams
        .matrices()
        .par_iter()
        .zip(&rho)
        .map(|(s, &r)| threshold_components(s, r))
        .collect();
    let counts: Vec<usize> = labels
        .iter()
        .map(|l| l.iter().max().map_or(0, |m| m + 1))
        .collect();
    let blocks = structure
        .modalities()
        .iter()
        .map(|axes| {
            let mut tuples: Vec<Vec<usize>> = vec![vec![]];
            for &ax in axes {
                tuples = tuples
                    .into_iter()
                    .flat_map(|t| {
                        (0..counts[ax]).map(move |c| {
                            let mut t = t.clone();
                            t.push(c);
                            t
                        })
                    })
                    .collect();
            }
            tuples
        })
        .collect();
    Ok(PartitionPlan {
        axes: grams.names().to_vec(),
        labels,
        rho,
        blocks,
    })
}

/// Result of [`partitioned_fit`].
#[derive(Clone, Debug)]
pub struct PartitionedFit {
    pub fit: FitResult,
    pub plan: PartitionPlan,
    /// Number of independently estimated groups of blocks.
    pub groups: usize,
    /// The block split is exact only for an L1-penalized fit without priors.
    pub heuristic: bool,
}

/// Splits the data along covariance-thresholding components, fits every
/// connected group of blocks independently, and reassembles per-axis
/// estimates that are block-diagonal in the original vertex order.
pub fn partitioned_fit(
    dataset: &Dataset,
    plan: &PreprocessPlan,
    priors: &Priors,
    rho: &[f64],
    config: &EstimatorConfig,
) -> Result<PartitionedFit> {
    let start = Instant::now();
    let grams = prepared_gram(dataset, plan)?;
    let gram_seconds = start.elapsed().as_secs_f64();
    let mut out = partitioned_fit_grams(&grams, &dataset.structure()?, priors, rho, config)?;
    out.fit.timings.gram += gram_seconds;
    Ok(out)
}

/// [`partitioned_fit`] from precomputed effective Gram matrices.
pub fn partitioned_fit_grams(
    grams: &GramSet,
    structure: &Structure,
    priors: &Priors,
    rho: &[f64],
    config: &EstimatorConfig,
) -> Result<PartitionedFit> {
    config.validate()?;
    let partition = covariance_partition(grams, structure, rho)?;
    let k = structure.axis_count();

    // Sub-axes are (axis, component) pairs, numbered axis-major.
    let mut sub_axes: Vec<(usize, usize)> = Vec::new();
    let mut sub_index: Vec<Vec<usize>> = Vec::with_capacity(k);
    for ax in 0..k {
        sub_index.push(
            (0..partition.component_count(ax))
                .map(|c| {
                    sub_axes.push((ax, c));
                    sub_axes.len() - 1
                })
                .collect(),
        );
    }
    let sub_modalities: Vec<Vec<usize>> = structure
        .modalities()
        .iter()
        .zip(&partition.blocks)
        .flat_map(|(axes, tuples)| {
            tuples
                .iter()
                .map(|t| {
                    axes.iter()
                        .zip(t)
                        .map(|(&ax, &c)| sub_index[ax][c])
                        .collect::<Vec<usize>>()
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut uf = UnionFind::<usize>::new(sub_axes.len());
    for m in &sub_modalities {
        for w in m.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in 0..sub_axes.len() {
        groups.entry(uf.find(s)).or_default().push(s);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();

    let members: Vec<Vec<usize>> = sub_axes
        .iter()
        .map(|&(ax, c)| partition.members(ax, c))
        .collect();
    let fits = groups
        .par_iter()
        .map(|group| {
            let local = |s: usize| {
                group
                    .iter()
                    .position(|&g| g == s)
                    .expect("sub-axis in its group")
            };
            let names: Vec<String> = group
                .iter()
                .map(|&s| {
                    format!(
                        "{}#{}",
                        structure.axis_names()[sub_axes[s].0],
                        sub_axes[s].1
                    )
                })
                .collect();
            let sizes: Vec<usize> = group.iter().map(|&s| members[s].len()).collect();
            let modalities: Vec<Vec<usize>> = sub_modalities
                .iter()
                .filter(|m| group.contains(&m[0]))
                .map(|m| m.iter().map(|&s| local(s)).collect())
                .collect();
            let sub_structure = Structure::new(names.clone(), sizes, modalities)?;
            let mut matrices = Vec::with_capacity(group.len());
            let mut sub_priors = Priors::new();
            for (&s, name) in group.iter().zip(&names) {
                let ax = sub_axes[s].0;
                let idx = &members[s];
                matrices.push(grams.matrices()[ax].select_rows(idx).select_columns(idx));
                if let Some(prior) = priors.get(&structure.axis_names()[ax]) {
                    sub_priors.insert(name.clone(), slice_prior(prior, idx)?);
                }
            }
            let sub_grams = GramSet::new(names, matrices)?;
            fit_grams(&sub_grams, &sub_structure, &sub_priors, config)
        })
        .collect::<Result<Vec<FitResult>>>()?;

    let fit = reassemble(structure, &sub_axes, &members, &groups, fits);
    let heuristic = config.l1_strength == 0.0 || !priors.is_empty();
    Ok(PartitionedFit {
        fit,
        plan: partition,
        groups: groups.len(),
        heuristic,
    })
}

/// The block of a Wishart prior on the vertices `idx`: the scale is chosen
/// so its inverse is the matching block of `Θ⁻¹`, and the degrees of freedom
/// keep `n − d` fixed.
fn slice_prior(prior: &PriorSpec, idx: &[usize]) -> Result<PriorSpec> {
    match prior {
        PriorSpec::None => Ok(PriorSpec::None),
        PriorSpec::Wishart { scale, dof } => {
            let inv = scale
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Singular("Wishart scale".into()))?;
            let block = inv.select_rows(idx).select_columns(idx);
            let block_scale = block
                .try_inverse()
                .ok_or_else(|| Error::Singular("block of the inverse Wishart scale".into()))?;
            let block_scale = (&block_scale + block_scale.transpose()) * 0.5;
            Ok(PriorSpec::Wishart {
                scale: block_scale,
                dof: dof - scale.nrows() as f64 + idx.len() as f64,
            })
        }
    }
}

fn reassemble(
    structure: &Structure,
    sub_axes: &[(usize, usize)],
    members: &[Vec<usize>],
    groups: &[Vec<usize>],
    fits: Vec<FitResult>,
) -> FitResult {
    let k = structure.axis_count();
    // (gram eigenvalue, precision eigenvalue, eigenvector embedded in R^d)
    let mut columns: Vec<Vec<(f64, f64, Vec<(usize, f64)>)>> = vec![Vec::new(); k];
    let mut rank_deficient = vec![false; k];
    for (group, fit) in groups.iter().zip(&fits) {
        for (&s, spec) in group.iter().zip(&fit.spectra) {
            let ax = sub_axes[s].0;
            rank_deficient[ax] |= spec.rank_deficient;
            for c in 0..spec.eigenvectors.ncols() {
                let col = members[s]
                    .iter()
                    .enumerate()
                    .map(|(r, &v)| (v, spec.eigenvectors[(r, c)]))
                    .collect();
                columns[ax].push((spec.gram_eigenvalues[c], spec.precision_eigenvalues[c], col));
            }
        }
    }
    let spectra = columns
        .into_iter()
        .enumerate()
        .map(|(ax, mut cols)| {
            cols.sort_by(|a, b| b.0.total_cmp(&a.0));
            let d = structure.axis_sizes()[ax];
            let mut eigenvectors = DMatrix::zeros(d, d);
            for (c, (_, _, col)) in cols.iter().enumerate() {
                for &(v, x) in col {
                    eigenvectors[(v, c)] = x;
                }
            }
            AxisSpectrum {
                axis: structure.axis_names()[ax].clone(),
                eigenvectors,
                gram_eigenvalues: cols.iter().map(|c| c.0).collect(),
                precision_eigenvalues: cols.iter().map(|c| c.1).collect(),
                rank_deficient: rank_deficient[ax],
            }
        })
        .collect();

    let longest = fits
        .iter()
        .map(|f| f.objective_trace.len())
        .max()
        .unwrap_or(0);
    let objective_trace = (0..longest)
        .map(|t| {
            fits.iter()
                .map(|f| f.objective_trace[t.min(f.objective_trace.len() - 1)])
                .sum()
        })
        .collect();
    let mut timings = crate::estimator::PhaseTimings::default();
    for f in &fits {
        timings.decompose += f.timings.decompose;
        timings.iterate += f.timings.iterate;
        timings.refine += f.timings.refine;
    }
    FitResult {
        spectra,
        iterations: fits.iter().map(|f| f.iterations).max().unwrap_or(0),
        l1_iterations: fits.iter().map(|f| f.l1_iterations).max().unwrap_or(0),
        objective: fits.iter().map(|f| f.objective).sum(),
        objective_trace,
        converged: fits.iter().all(|f| f.converged),
        max_gradient: fits.iter().map(|f| f.max_gradient).fold(0.0, f64::max),
        timings,
    }
}

/// Paths of the TSV edge list and its JSON sidecar for `stem`.
pub fn graph_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}.tsv")),
        dir.join(format!("{stem}.json")),
    )
}

#[derive(Serialize, Deserialize)]
struct GraphSidecar {
    axis: String,
    vertices: usize,
    method: ThresholdMethod,
    parameter: f64,
    edges: usize,
}

/// Writes `stem.tsv` (`i<TAB>j<TAB>weight` rows) and `stem.json` metadata.
pub fn write_graph(graph: &SparseGraph, dir: &Path, stem: &str) -> Result<()> {
    let (tsv, json) = graph_paths(dir, stem);
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_path(&tsv)
        .map_err(|e| csv_error(&tsv, e))?;
    for e in &graph.edges {
        w.write_record([e.i.to_string(), e.j.to_string(), format!("{:e}", e.weight)])
            .map_err(|e| csv_error(&tsv, e))?;
    }
    w.flush().map_err(|e| Error::io(&tsv, e))?;
    let meta = GraphSidecar {
        axis: graph.axis.clone(),
        vertices: graph.vertices,
        method: graph.method,
        parameter: graph.parameter,
        edges: graph.edges.len(),
    };
    fs::write(&json, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&json, e))
}

/// Reads a graph written by [`write_graph`].
pub fn read_graph(dir: &Path, stem: &str) -> Result<SparseGraph> {
    let (tsv, json) = graph_paths(dir, stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: GraphSidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .from_path(&tsv)
        .map_err(|e| csv_error(&tsv, e))?;
    let mut edges = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(&tsv, e))?;
        let field = |k: usize| {
            record
                .get(k)
                .ok_or_else(|| Error::format(&tsv, "expected three columns"))
        };
        let parse_err = |e: &dyn std::fmt::Display| Error::format(&tsv, e.to_string());
        edges.push(Edge {
            i: field(0)?.parse().map_err(|e| parse_err(&e))?,
            j: field(1)?.parse().map_err(|e| parse_err(&e))?,
            weight: field(2)?.parse().map_err(|e| parse_err(&e))?,
        });
    }
    if edges.len() != meta.edges {
        return Err(Error::format(
            &tsv,
            format!("expected {} edges, found {}", meta.edges, edges.len()),
        ));
    }
    SparseGraph::new(meta.axis, meta.vertices, meta.method, meta.parameter, edges)
        .map_err(|e| Error::format(&tsv, e.to_string()))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::format(path, e.to_string())
    }
}
