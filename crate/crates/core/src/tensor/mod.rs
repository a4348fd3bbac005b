//! Tensor storage, matricization, Gram matrices and Kronecker-sum algebra.
//!
//! All tensors are stored row-major: the first axis varies slowest. With this
//! layout the Kronecker sum `⊕ Ψ_ℓ = Σ_ℓ I_{d<ℓ} ⊗ Ψ_ℓ ⊗ I_{d>ℓ}` acts on the
//! flat value vector directly, and matricizing along axis 0 is a reshape.

mod gram;
mod kron;

pub(crate) use gram::check_symmetric;
pub use gram::{effective_gram, gram, gram_of_samples, GramSet};
pub use kron::{
    kron_product, kron_sum_dense, ks_diag_marginal, stridewise_blockwise_trace, GridReduction,
    ModalityGrid, DEFAULT_DENSE_CAP,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Axis {
    pub name: String,
    pub size: usize,
}

/// A dense tensor of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::arg("tensor must have at least one axis"));
        }
        if shape.contains(&0) {
            return Err(Error::arg(format!(
                "tensor shape {shape:?} has a zero-length axis"
            )));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::arg(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    /// Row-major copy of a matrix (rows are the first axis).
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let values = m.transpose().as_slice().to_vec();
        Self {
            shape: vec![m.nrows(), m.ncols()],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Applies `f` elementwise, keeping the shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Sizes of the axes before, at and after `axis`, as `(d<, d, d>)`.
    pub fn split_at_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        split_shape(&self.shape, axis)
    }

    /// Gathers the sub-tensor at the given per-axis index lists.
    pub fn select(&self, indices: &[Vec<usize>]) -> Result<Self> {
        if indices.len() != self.rank() {
            return Err(Error::arg("one index list per axis is required"));
        }
        for (ax, (idx, &d)) in indices.iter().zip(&self.shape).enumerate() {
            if idx.is_empty() || idx.iter().any(|&i| i >= d) {
                return Err(Error::arg(format!("bad index list for axis {ax}")));
            }
        }
        let shape: Vec<usize> = indices.iter().map(Vec::len).collect();
        let strides = row_major_strides(&self.shape);
        let total: usize = shape.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..total {
            let offset: usize = counter
                .iter()
                .zip(indices)
                .zip(&strides)
                .map(|((&c, idx), &s)| idx[c] * s)
                .sum();
            values.push(self.values[offset]);
            for ax in (0..shape.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        Self::new(shape, values)
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

pub(crate) fn split_shape(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(format!(
            "axis position {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let before = shape[..axis].iter().product();
    let after = shape[axis + 1..].iter().product();
    Ok((before, shape[axis], after))
}

/// Unfolds `tensor` into a `d_ℓ × d_{\ℓ}` matrix.
///
/// Columns enumerate the remaining axes in their original order, row-major,
/// so the column of element `(a, i, b)` (with `a` the flattened index over
/// earlier axes and `b` over later ones) is `a·d> + b`.
pub fn matricize(tensor: &DenseTensor, axis: usize) -> Result<DMatrix<f64>> {
    let (before, d, after) = tensor.split_at_axis(axis)?;
    let values = tensor.values();
    Ok(DMatrix::from_fn(d, before * after, |i, col| {
        let (a, b) = (col / after, col % after);
        values[(a * d + i) * after + b]
    }))
}

/// Inverse of [`matricize`].
pub fn unmatricize(matrix: &DMatrix<f64>, shape: &[usize], axis: usize) -> Result<DenseTensor> {
    let (before, d, after) = split_shape(shape, axis)?;
    if matrix.nrows() != d || matrix.ncols() != before * after {
        return Err(Error::arg(format!(
            "matrix is {}x{}, expected {d}x{}",
            matrix.nrows(),
            matrix.ncols(),
            before * after
        )));
    }
    let mut values = vec![0.0; before * d * after];
    for a in 0..before {
        for i in 0..d {
            for b in 0..after {
                values[(a * d + i) * after + b] = matrix[(i, a * after + b)];
            }
        }
    }
    DenseTensor::new(shape.to_vec(), values)
}

/// One tensor-valued observation type, possibly with several samples.
#[derive(Clone, Debug)]
pub struct Modality {
    name: String,
    axis_names: Vec<String>,
    samples: Vec<DenseTensor>,
}

impl Modality {
    pub fn new(
        name: impl Into<String>,
        axis_names: Vec<String>,
        samples: Vec<DenseTensor>,
    ) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::arg(format!("modality `{name}` has no samples")));
        }
        for (i, a) in axis_names.iter().enumerate() {
            if axis_names[..i].contains(a) {
                return Err(Error::arg(format!("modality `{name}` repeats axis `{a}`")));
            }
        }
        let shape = samples[0].shape().to_vec();
        if shape.len() != axis_names.len() {
            return Err(Error::arg(format!(
                "modality `{name}` names {} axes but its tensors have rank {}",
                axis_names.len(),
                shape.len()
            )));
        }
        if samples.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(Error::arg(format!("samples of `{name}` differ in shape")));
        }
        Ok(Self {
            name,
            axis_names,
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn axis_names(&self) -> &[String] {
        &self.axis_names
    }

    pub fn samples(&self) -> &[DenseTensor] {
        &self.samples
    }

    pub fn shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    pub fn axis_position(&self, axis: &str) -> Option<usize> {
        self.axis_names.iter().position(|a| a == axis)
    }

    /// Returns a copy with every sample replaced by `f(sample)`.
    pub fn map_samples(
        &self,
        mut f: impl FnMut(&DenseTensor) -> Result<DenseTensor>,
    ) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(&mut f)
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.name.clone(), self.axis_names.clone(), samples)
    }
}

/// Axis registry plus the modalities observed over those axes.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    axes: Vec<Axis>,
    modalities: Vec<Modality>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_axis(&mut self, name: impl Into<String>, size: usize) -> Result<()> {
        let name = name.into();
        if size == 0 {
            return Err(Error::arg(format!("axis `{name}` must have positive size")));
        }
        if self.axis_index(&name).is_some() {
            return Err(Error::arg(format!("axis `{name}` registered twice")));
        }
        self.axes.push(Axis { name, size });
        Ok(())
    }

    pub fn add_modality(&mut self, modality: Modality) -> Result<()> {
        if self.modalities.iter().any(|m| m.name == modality.name) {
            return Err(Error::arg(format!(
                "modality `{}` added twice",
                modality.name
            )));
        }
        for (axis, &len) in modality.axis_names.iter().zip(modality.shape()) {
            let registered = self.axis(axis).ok_or_else(|| {
                Error::arg(format!(
                    "modality `{}` uses unknown axis `{axis}`",
                    modality.name
                ))
            })?;
            if registered.size != len {
                return Err(Error::arg(format!(
                    "axis `{axis}` has size {} but modality `{}` has length {len}",
                    registered.size, modality.name
                )));
            }
        }
        self.modalities.push(modality);
        Ok(())
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    pub fn axis(&self, name: &str) -> Option<&Axis> {
        self.axes.iter().find(|a| a.name == name)
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    /// Replaces every modality by `f(modality)`, keeping the axis registry.
    pub fn map_modalities(&self, mut f: impl FnMut(&Modality) -> Result<Modality>) -> Result<Self> {
        let mut out = Dataset {
            axes: self.axes.clone(),
            modalities: Vec::with_capacity(self.modalities.len()),
        };
        for m in &self.modalities {
            out.add_modality(f(m)?)?;
        }
        Ok(out)
    }

    /// The axis/modality incidence used by the estimator.
    pub fn structure(&self) -> Result<Structure> {
        let modalities = self
            .modalities
            .iter()
            .map(|m| {
                m.axis_names
                    .iter()
                    .map(|a| self.axis_index(a).expect("validated on insert"))
                    .collect()
            })
            .collect();
        Structure::new(
            self.axes.iter().map(|a| a.name.clone()).collect(),
            self.axes.iter().map(|a| a.size).collect(),
            modalities,
        )
    }
}

/// Which axes each modality spans, by index into the axis list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Structure {
    axis_names: Vec<String>,
    axis_sizes: Vec<usize>,
    modalities: Vec<Vec<usize>>,
}

impl Structure {
    pub fn new(
        axis_names: Vec<String>,
        axis_sizes: Vec<usize>,
        modalities: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if axis_names.len() != axis_sizes.len() {
            return Err(Error::arg("axis names and sizes differ in length"));
        }
        if axis_sizes.contains(&0) {
            return Err(Error::arg("axis sizes must be positive"));
        }
        for m in &modalities {
            if m.is_empty() {
                return Err(Error::arg("modality spans no axes"));
            }
            for (i, &ax) in m.iter().enumerate() {
                if ax >= axis_sizes.len() {
                    return Err(Error::arg(format!("axis index {ax} out of range")));
                }
                if m[..i].contains(&ax) {
                    return Err(Error::arg("modality repeats an axis"));
                }
            }
        }
        for (ax, name) in axis_names.iter().enumerate() {
            if !modalities.iter().any(|m| m.contains(&ax)) {
                return Err(Error::UnusedAxis(name.clone()));
            }
        }
        Ok(Self {
            axis_names,
            axis_sizes,
            modalities,
        })
    }

    pub fn axis_count(&self) -> usize {
        self.axis_sizes.len()
    }

    pub fn axis_names(&self) -> &[String] {
        &self.axis_names
    }

    pub fn axis_sizes(&self) -> &[usize] {
        &self.axis_sizes
    }

    pub fn modalities(&self) -> &[Vec<usize>] {
        &self.modalities
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axis_names.iter().position(|a| a == name)
    }

    /// Modalities (by index) that contain `axis`.
    pub fn modalities_with(&self, axis: usize) -> impl Iterator<Item = usize> + '_ {
        self.modalities
            .iter()
            .enumerate()
            .filter(move |(_, m)| m.contains(&axis))
            .map(|(g, _)| g)
    }
}
