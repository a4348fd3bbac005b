//! Dataset manifests, row-major little-endian tensors and CSV matrices.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparsify::csv_error;
use crate::tensor::{Dataset, DenseTensor, Modality};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub axes: Vec<ManifestAxis>,
    pub modalities: Vec<ManifestModality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestAxis {
    pub name: String,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModality {
    pub name: String,
    pub axes: Vec<String>,
    /// Paths relative to the manifest; `.csv` files hold 2-axis samples.
    pub samples: Vec<String>,
}

/// Reads a manifest and every sample it references.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut dataset = Dataset::new();
    for axis in &manifest.axes {
        dataset.add_axis(&axis.name, axis.size)?;
    }
    for m in &manifest.modalities {
        let shape = m
            .axes
            .iter()
            .map(|a| {
                dataset.axis(a).map(|x| x.size).ok_or_else(|| {
                    Error::format(
                        manifest_path,
                        format!("modality `{}` uses unknown axis `{a}`", m.name),
                    )
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        let samples = m
            .samples
            .iter()
            .map(|r| read_tensor(&base.join(r), &shape))
            .collect::<Result<Vec<_>>>()?;
        dataset.add_modality(Modality::new(&m.name, m.axes.clone(), samples)?)?;
    }
    dataset.structure()?;
    Ok(dataset)
}

/// Writes `manifest.json` plus one `.bin` file per sample into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modalities = Vec::new();
    for m in dataset.modalities() {
        let mut samples = Vec::new();
        for (s, t) in m.samples().iter().enumerate() {
            let name = format!("{}.{s}.bin", m.name());
            write_f64s(&dir.join(&name), t.values())?;
            samples.push(name);
        }
        modalities.push(ManifestModality {
            name: m.name().to_string(),
            axes: m.axis_names().to_vec(),
            samples,
        });
    }
    let manifest = Manifest {
        axes: dataset
            .axes()
            .iter()
            .map(|a| ManifestAxis {
                name: a.name.clone(),
                size: a.size,
            })
            .collect(),
        modalities,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads one sample of the given shape from a `.bin` or 2-axis `.csv` file.
pub fn read_tensor(path: &Path, shape: &[usize]) -> Result<DenseTensor> {
    if has_extension(path, "csv") {
        if shape.len() != 2 {
            return Err(Error::format(
                path,
                "CSV input is only accepted for 2-axis tensors",
            ));
        }
        let m = read_csv_matrix(path)?;
        if m.shape() != (shape[0], shape[1]) {
            return Err(Error::format(
                path,
                format!(
                    "expected {}×{}, found {}×{}",
                    shape[0],
                    shape[1],
                    m.nrows(),
                    m.ncols()
                ),
            ));
        }
        return Ok(DenseTensor::from_matrix(&m));
    }
    let values = read_f64s(path)?;
    let expected: usize = shape.iter().product();
    if values.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} values, found {}", values.len()),
        ));
    }
    DenseTensor::new(shape.to_vec(), values)
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Raw little-endian 64-bit floats.
pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of f64 values", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Row-major binary dump of a matrix.
pub fn write_matrix_bin(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_f64s(path, m.transpose().as_slice())
}

pub fn read_matrix_bin(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let values = read_f64s(path)?;
    if values.len() != rows * cols {
        return Err(Error::format(
            path,
            format!("expected {rows}×{cols} values, found {}", values.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Headerless comma-separated matrix.
pub fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        if *cols.get_or_insert(record.len()) != record.len() {
            return Err(Error::format(
                path,
                format!("row {rows} has {} fields", record.len()),
            ));
        }
        for field in &record {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {rows}: `{field}`: {e}")))?,
            );
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format(path, "empty matrix"))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_csv_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    for row in m.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a square matrix from `.csv` or `.bin` (side length inferred).
pub fn read_square_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let m = if has_extension(path, "csv") {
        read_csv_matrix(path)?
    } else {
        let values = read_f64s(path)?;
        let d = (values.len() as f64).sqrt().round() as usize;
        if d * d != values.len() {
            return Err(Error::format(
                path,
                format!("{} values do not form a square matrix", values.len()),
            ));
        }
        DMatrix::from_row_slice(d, d, &values)
    };
    if !m.is_square() {
        return Err(Error::format(
            path,
            format!(
                "expected a square matrix, found {}×{}",
                m.nrows(),
                m.ncols()
            ),
        ));
    }
    Ok(m)
}
