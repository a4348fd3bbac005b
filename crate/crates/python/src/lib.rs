//! Python bindings for the core estimator, thresholding and synthetic tools.

use ksgm::estimator::{EstimatorConfig, FitResult, PriorSpec, Priors};
use ksgm::preprocess::{PreprocessPlan, PreprocessSpec, PreprocessStep};
use ksgm::sparsify::{self, SparseGraph};
use ksgm::synth;
use ksgm::tensor::{self, DenseTensor, Modality};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

create_exception!(ksgm_py, NonConvergenceError, PyException);
create_exception!(ksgm_py, NumericalError, PyException);

fn to_py(e: ksgm::Error) -> PyErr {
    use ksgm::Error as E;
    match e {
        E::NonConvergence { .. } => NonConvergenceError::new_err(e.to_string()),
        E::NotPositiveDefinite(_) | E::Singular(_) | E::Degenerate(_) => {
            NumericalError::new_err(e.to_string())
        }
        E::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    let flat: Vec<f64> = rows.concat();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &flat))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Axes and modalities of a multi-modal tensor dataset.
#[pyclass(name = "Dataset", module = "ksgm_py", from_py_object)]
#[derive(Clone, Default)]
struct PyDataset {
    inner: tensor::Dataset,
    preprocess: PreprocessPlan,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    #[staticmethod]
    fn load(manifest: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ksgm::io::read_dataset(manifest.as_ref()).map_err(to_py)?,
            preprocess: PreprocessPlan::new(),
        })
    }

    fn save(&self, directory: &str) -> PyResult<String> {
        let path = ksgm::io::write_dataset(&self.inner, directory.as_ref()).map_err(to_py)?;
        Ok(path.display().to_string())
    }

    fn add_axis(&mut self, name: &str, size: usize) -> PyResult<()> {
        self.inner.add_axis(name, size).map_err(to_py)
    }

    /// Adds a modality; each sample is a flat row-major list over `axes`.
    fn add_modality(
        &mut self,
        name: &str,
        axes: Vec<String>,
        samples: Vec<Vec<f64>>,
    ) -> PyResult<()> {
        let shape = axes
            .iter()
            .map(|a| {
                self.inner
                    .axis(a)
                    .map(|x| x.size)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown axis `{a}`")))
            })
            .collect::<PyResult<Vec<usize>>>()?;
        let samples = samples
            .into_iter()
            .map(|v| DenseTensor::new(shape.clone(), v))
            .collect::<ksgm::Result<Vec<_>>>()
            .map_err(to_py)?;
        let modality = Modality::new(name, axes, samples).map_err(to_py)?;
        self.inner.add_modality(modality).map_err(to_py)
    }

    /// Preprocessing steps (`center`, `log1p`, `nonparanormal`) for a modality.
    fn set_preprocess(&mut self, modality: &str, steps: Vec<String>) -> PyResult<()> {
        let steps = steps
            .iter()
            .map(|s| match s.as_str() {
                "center" => Ok(PreprocessStep::Center),
                "log1p" => Ok(PreprocessStep::Log1p),
                "nonparanormal" => Ok(PreprocessStep::Nonparanormal),
                other => Err(PyValueError::new_err(format!(
                    "unknown preprocessing step `{other}`"
                ))),
            })
            .collect::<PyResult<Vec<_>>>()?;
        let spec = PreprocessSpec::new(steps).map_err(to_py)?;
        self.preprocess.insert(modality.to_string(), spec);
        Ok(())
    }

    #[getter]
    fn axes(&self) -> Vec<(String, usize)> {
        self.inner
            .axes()
            .iter()
            .map(|a| (a.name.clone(), a.size))
            .collect()
    }

    #[getter]
    fn modalities(&self) -> Vec<(String, Vec<String>)> {
        self.inner
            .modalities()
            .iter()
            .map(|m| (m.name().to_string(), m.axis_names().to_vec()))
            .collect()
    }

    /// Effective Gram matrix of every axis, after preprocessing.
    fn grams(&self) -> PyResult<Vec<(String, Vec<Vec<f64>>)>> {
        let grams =
            ksgm::preprocess::prepared_gram(&self.inner, &self.preprocess).map_err(to_py)?;
        Ok(grams
            .names()
            .iter()
            .cloned()
            .zip(grams.matrices().iter().map(rows))
            .collect())
    }

    /// Covariance-thresholding components: per-axis vertex labels.
    fn partition(&self, rho: Vec<f64>) -> PyResult<Vec<(String, Vec<usize>)>> {
        let grams =
            ksgm::preprocess::prepared_gram(&self.inner, &self.preprocess).map_err(to_py)?;
        let structure = self.inner.structure().map_err(to_py)?;
        let plan = sparsify::covariance_partition(&grams, &structure, &rho).map_err(to_py)?;
        Ok(plan.axes.into_iter().zip(plan.labels).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(axes={:?}, modalities={})",
            self.axes(),
            self.inner.modalities().len()
        )
    }
}

/// Estimated per-axis precision matrices.
#[pyclass(name = "Fit", module = "ksgm_py", frozen)]
struct PyFit {
    inner: FitResult,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn l1_iterations(&self) -> usize {
        self.inner.l1_iterations
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.objective_trace.clone()
    }

    #[getter]
    fn axes(&self) -> Vec<String> {
        self.inner.spectra.iter().map(|s| s.axis.clone()).collect()
    }

    fn precision(&self, axis: &str) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .precision(axis)
            .map(|m| rows(&m))
            .ok_or_else(|| PyValueError::new_err(format!("unknown axis `{axis}`")))
    }

    /// `(eigenvalues, eigenvectors)` of one axis' precision.
    fn spectrum(&self, axis: &str) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let s = self
            .inner
            .spectrum(axis)
            .ok_or_else(|| PyValueError::new_err(format!("unknown axis `{axis}`")))?;
        Ok((s.precision_eigenvalues.clone(), rows(&s.eigenvectors)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(axes={:?}, converged={}, iterations={})",
            self.axes(),
            self.inner.converged,
            self.inner.iterations
        )
    }
}

/// Fits the dataset. `priors` maps axis names to `(scale, dof)` Wishart
/// parameters; `partition_rho` routes through the block-partitioned fit.
#[pyfunction]
#[pyo3(signature = (dataset, *, l1_strength=0.0, tolerance=1e-8, max_iterations=1000, priors=None, partition_rho=None))]
fn fit(
    py: Python<'_>,
    dataset: &PyDataset,
    l1_strength: f64,
    tolerance: f64,
    max_iterations: usize,
    priors: Option<Vec<(String, Vec<Vec<f64>>, f64)>>,
    partition_rho: Option<Vec<f64>>,
) -> PyResult<PyFit> {
    let config = EstimatorConfig {
        l1_strength,
        tolerance,
        max_iterations,
        ..EstimatorConfig::default()
    };
    let mut prior_map = Priors::new();
    for (axis, scale, dof) in priors.unwrap_or_default() {
        prior_map.insert(
            axis,
            PriorSpec::Wishart {
                scale: matrix(scale)?,
                dof,
            },
        );
    }
    let inner = py
        .detach(|| match &partition_rho {
            Some(rho) => sparsify::partitioned_fit(
                &dataset.inner,
                &dataset.preprocess,
                &prior_map,
                rho,
                &config,
            )
            .map(|p| p.fit),
            None => ksgm::estimator::fit(&dataset.inner, &dataset.preprocess, &prior_map, &config),
        })
        .map_err(to_py)?;
    Ok(PyFit { inner })
}

fn edges(g: SparseGraph) -> Vec<(usize, usize, f64)> {
    g.edges.into_iter().map(|e| (e.i, e.j, e.weight)).collect()
}

/// Edges `(i, j, weight)` keeping the strongest fraction of entries.
#[pyfunction]
fn threshold_global(m: Vec<Vec<f64>>, keep_fraction: f64) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(edges(
        sparsify::threshold_global(&matrix(m)?, keep_fraction).map_err(to_py)?,
    ))
}

/// Edges from each row's `k` strongest entries.
#[pyfunction]
fn threshold_top_k_rows(m: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(edges(
        sparsify::threshold_top_k_rows(&matrix(m)?, k).map_err(to_py)?,
    ))
}

/// Edges from each row's `k` strongest entries after column normalization.
#[pyfunction]
fn threshold_colnorm_top_k(m: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(edges(
        sparsify::threshold_colnorm_top_k(&matrix(m)?, k).map_err(to_py)?,
    ))
}

#[pyfunction]
fn kron_product(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&tensor::kron_product(&matrix(a)?, &matrix(b)?)))
}

#[pyfunction]
fn stridewise_blockwise_trace(m: Vec<Vec<f64>>, a: usize, b: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &tensor::stridewise_blockwise_trace(&matrix(m)?, a, b).map_err(to_py)?,
    ))
}

#[pyfunction]
fn ks_diag_marginal(eigenvalues: Vec<Vec<f64>>, target: usize) -> PyResult<Vec<f64>> {
    let slices: Vec<&[f64]> = eigenvalues.iter().map(Vec::as_slice).collect();
    tensor::ks_diag_marginal(&slices, target).map_err(to_py)
}

#[pyfunction]
fn gen_er_precision(d: usize, p_edge: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(
        &synth::gen_er_precision(d, p_edge, seed).map_err(to_py)?,
    ))
}

#[pyfunction]
#[pyo3(signature = (d, phi=0.5))]
fn gen_ar1_precision(d: usize, phi: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&synth::gen_ar1_precision(d, phi).map_err(to_py)?))
}

/// Samples of one modality as flat row-major lists.
#[pyfunction]
fn sample_ks_normal(
    precisions: Vec<Vec<Vec<f64>>>,
    samples: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let mats = precisions
        .into_iter()
        .map(matrix)
        .collect::<PyResult<Vec<_>>>()?;
    let out = synth::sample_ks_normal(&mats, samples, seed).map_err(to_py)?;
    Ok(out.into_iter().map(DenseTensor::into_values).collect())
}

/// `(area, [(threshold, recall, precision), ...])`.
#[pyfunction]
fn pr_curve(scores: Vec<Vec<f64>>, truth: Vec<Vec<f64>>) -> PyResult<(f64, Vec<(f64, f64, f64)>)> {
    let c = synth::pr_curve(&matrix(scores)?, &matrix(truth)?).map_err(to_py)?;
    Ok((
        c.area,
        c.points
            .iter()
            .map(|p| (p.threshold, p.recall, p.precision))
            .collect(),
    ))
}

#[pyfunction]
fn assortativity(
    vertices: usize,
    edges: Vec<(usize, usize)>,
    labels: Vec<String>,
) -> PyResult<f64> {
    let edges = edges
        .into_iter()
        .map(|(i, j)| sparsify::Edge {
            i: i.min(j),
            j: i.max(j),
            weight: 1.0,
        })
        .collect();
    let g = SparseGraph::new("", vertices, sparsify::ThresholdMethod::Global, 1.0, edges)
        .map_err(to_py)?;
    synth::assortativity(&g, &labels).map_err(to_py)
}

#[pymodule]
fn ksgm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFit>()?;
    m.add(
        "NonConvergenceError",
        m.py().get_type::<NonConvergenceError>(),
    )?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_global, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_top_k_rows, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_colnorm_top_k, m)?)?;
    m.add_function(wrap_pyfunction!(kron_product, m)?)?;
    m.add_function(wrap_pyfunction!(stridewise_blockwise_trace, m)?)?;
    m.add_function(wrap_pyfunction!(ks_diag_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(gen_er_precision, m)?)?;
    m.add_function(wrap_pyfunction!(gen_ar1_precision, m)?)?;
    m.add_function(wrap_pyfunction!(sample_ks_normal, m)?)?;
    m.add_function(wrap_pyfunction!(pr_curve, m)?)?;
    m.add_function(wrap_pyfunction!(assortativity, m)?)?;
    Ok(())
}
