use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{Dataset, DenseTensor, Modality};
use crate::error::{Error, Result};

/// Longest contraction handled by one sequential accumulation. Longer
/// contractions are split in halves and the partial Grams summed pairwise.
const LEAF_CONTRACTION: usize = 4096;

/// Below this many multiply-adds the two halves of a split are not forked.
const PARALLEL_WORK: usize = 1 << 22;

/// Effective Gram matrices, one per axis, in axis-registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSet {
    names: Vec<String>,
    matrices: Vec<DMatrix<f64>>,
}

impl GramSet {
    pub fn new(names: Vec<String>, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if names.len() != matrices.len() {
            return Err(Error::arg("one Gram matrix per axis name is required"));
        }
        for (name, m) in names.iter().zip(&matrices) {
            if !m.is_square() {
                return Err(Error::arg(format!("Gram matrix of `{name}` is not square")));
            }
            check_symmetric(m, 1e-12).map_err(|e| Error::arg(format!("axis `{name}`: {e}")))?;
        }
        Ok(Self { names, matrices })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.matrices[i])
    }

    pub fn into_parts(self) -> (Vec<String>, Vec<DMatrix<f64>>) {
        (self.names, self.matrices)
    }
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> std::result::Result<(), String> {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return Err(format!("not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// `S_ℓ^γ = (1/n) Σ_i mat_ℓ[D_i] mat_ℓ[D_i]ᵀ` for the named axis.
pub fn gram(modality: &Modality, axis_name: &str) -> Result<DMatrix<f64>> {
    let axis = modality.axis_position(axis_name).ok_or_else(|| {
        Error::arg(format!(
            "axis `{axis_name}` is not part of modality `{}`",
            modality.name()
        ))
    })?;
    gram_of_samples(modality.samples(), axis)
}

/// Average Gram matrix of `samples` along `axis`; no Bessel correction.
pub fn gram_of_samples(samples: &[DenseTensor], axis: usize) -> Result<DMatrix<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::arg("at least one sample is required"))?;
    let (_, d, _) = first.split_at_axis(axis)?;
    if samples.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::arg("samples differ in shape"));
    }
    let sum = reduce_samples(samples, axis);
    let scale = 1.0 / samples.len() as f64;
    let mut out = DMatrix::zeros(d, d);
    // The buffer is filled row-major; symmetrize while copying so the
    // result is exactly symmetric regardless of the kernel's packing order.
    for i in 0..d {
        for j in 0..=i {
            let v = 0.5 * (sum[i * d + j] + sum[j * d + i]) * scale;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

fn reduce_samples(samples: &[DenseTensor], axis: usize) -> Vec<f64> {
    if samples.len() == 1 {
        return tensor_gram(&samples[0], axis);
    }
    let mid = samples.len() / 2;
    let (mut left, right) = rayon::join(
        || reduce_samples(&samples[..mid], axis),
        || reduce_samples(&samples[mid..], axis),
    );
    add_into(&mut left, &right);
    left
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

/// Unnormalized `mat_ℓ[T] mat_ℓ[T]ᵀ` as a row-major `d × d` buffer.
///
/// The contraction runs over the earlier-axis index `a` and the later-axis
/// index `b` of each element `(a, i, b)`. The longer of the two is the inner
/// GEMM contraction; the shorter one is iterated. The sequence of leaves
/// (outer index, inner chunk) is reduced as a fixed binary tree, so the
/// result is bitwise identical for any thread count.
fn tensor_gram(tensor: &DenseTensor, axis: usize) -> Vec<f64> {
    let (before, d, after) = tensor.split_at_axis(axis).expect("axis checked by caller");
    let plan = if after >= before {
        LeafPlan {
            outer: before,
            inner: after,
            outer_stride: d * after,
            inner_stride: 1,
            row_stride: after,
            d,
        }
    } else {
        LeafPlan {
            outer: after,
            inner: before,
            outer_stride: 1,
            inner_stride: d * after,
            row_stride: after,
            d,
        }
    };
    let chunks = plan.inner.div_ceil(LEAF_CONTRACTION);
    let chunk_len = plan.inner.div_ceil(chunks);
    let leaves = plan.outer * chunks;
    plan.reduce(tensor.values(), 0, leaves, chunks, chunk_len)
}

struct LeafPlan {
    outer: usize,
    inner: usize,
    outer_stride: usize,
    inner_stride: usize,
    row_stride: usize,
    d: usize,
}

impl LeafPlan {
    fn reduce(
        &self,
        values: &[f64],
        lo: usize,
        hi: usize,
        chunks: usize,
        chunk_len: usize,
    ) -> Vec<f64> {
        let span = (hi - lo) * chunk_len;
        if hi - lo == 1 || span <= LEAF_CONTRACTION {
            let mut acc = vec![0.0; self.d * self.d];
            for leaf in lo..hi {
                self.accumulate_leaf(values, leaf, chunks, chunk_len, &mut acc);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        let (mut left, right) = if span * self.d * self.d >= PARALLEL_WORK {
            rayon::join(
                || self.reduce(values, lo, mid, chunks, chunk_len),
                || self.reduce(values, mid, hi, chunks, chunk_len),
            )
        } else {
            (
                self.reduce(values, lo, mid, chunks, chunk_len),
                self.reduce(values, mid, hi, chunks, chunk_len),
            )
        };
        add_into(&mut left, &right);
        left
    }

    fn accumulate_leaf(
        &self,
        values: &[f64],
        leaf: usize,
        chunks: usize,
        chunk_len: usize,
        acc: &mut [f64],
    ) {
        let (o, c) = (leaf / chunks, leaf % chunks);
        let start = c * chunk_len;
        let len = chunk_len.min(self.inner - start);
        if len == 0 {
            return;
        }
        let base = o * self.outer_stride + start * self.inner_stride;
        let d = self.d;
        // Bounds: the largest offset touched is base + (d-1)·row_stride + (len-1)·inner_stride.
        let last = base + (d - 1) * self.row_stride + (len - 1) * self.inner_stride;
        assert!(last < values.len());
        // SAFETY: every element addressed by the strided views lies within
        // `values` (checked above) and `acc` is a dense d×d buffer.
        unsafe {
            matrixmultiply::dgemm(
                d,
                len,
                d,
                1.0,
                values.as_ptr().add(base),
                self.row_stride as isize,
                self.inner_stride as isize,
                values.as_ptr().add(base),
                self.inner_stride as isize,
                self.row_stride as isize,
                1.0,
                acc.as_mut_ptr(),
                d as isize,
                1,
            );
        }
    }
}

/// Per-axis sums of the Gram matrices of every modality containing the axis.
pub fn effective_gram(dataset: &Dataset) -> Result<GramSet> {
    let names: Vec<String> = dataset.axes().iter().map(|a| a.name.clone()).collect();
    let matrices = names
        .par_iter()
        .map(|name| {
            let mut acc: Option<DMatrix<f64>> = None;
            for m in dataset.modalities() {
                if m.axis_position(name).is_some() {
                    let g = gram(m, name)?;
                    acc = Some(match acc {
                        Some(a) => a + g,
                        None => g,
                    });
                }
            }
            acc.ok_or_else(|| Error::UnusedAxis(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    GramSet::new(names, matrices)
}
