//! Regular 3D scalar grids and their on-disk form: a JSON header next to a raw
//! little-endian `f32` array.
//!
//! Values are C-ordered over `(x, y, z)`: index `(i * ny + j) * nz + k`.

use crate::error::{Error, Result};
use crate::geom::Vec3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    dims: [usize; 3],
    origin: Vec3,
    spacing: [f64; 3],
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(dims: [usize; 3], origin: Vec3, spacing: [f64; 3], values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!("grid dims {dims:?} must be >= 2 per axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "grid spacing {spacing:?} must be positive"
            )));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("grid origin must be finite".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for grid dims {dims:?}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("grid value {i} is not finite")));
        }
        Ok(Self {
            dims,
            origin,
            spacing,
            values,
        })
    }

    /// Samples `f` at every lattice point.
    pub fn from_fn(dims: [usize; 3], origin: Vec3, spacing: [f64; 3], f: impl Fn(Vec3) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    values.push(f(origin
                        + Vec3::new(
                            i as f64 * spacing[0],
                            j as f64 * spacing[1],
                            k as f64 * spacing[2],
                        )));
                }
            }
        }
        Self::new(dims, origin, spacing, values)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    #[inline]
    pub fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                i as f64 * self.spacing[0],
                j as f64 * self.spacing[1],
                k as f64 * self.spacing[2],
            )
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// JSON header of a grid file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    /// Raw data file, relative to the header's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "float32-le".to_string()
}

fn data_path(header_path: &Path, header: &GridHeader) -> PathBuf {
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    match &header.data {
        Some(name) => dir.join(name),
        None => header_path.with_extension("raw"),
    }
}

pub fn read_grid(header_path: impl AsRef<Path>) -> Result<DensityGrid> {
    let header_path = header_path.as_ref();
    let text = std::fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: GridHeader = serde_json::from_str(&text)?;
    if header.dtype != "float32-le" {
        return Err(Error::InvalidInput(format!(
            "unsupported grid dtype '{}'",
            header.dtype
        )));
    }
    let raw_path = data_path(header_path, &header);
    let raw = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims.iter().product::<usize>();
    if raw.len() != n * 4 {
        return Err(Error::parse(
            raw.len().min(n * 4) as u64,
            format!("grid data has {} bytes, expected {}", raw.len(), n * 4),
        ));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    DensityGrid::new(header.dims, Vec3::from(header.origin), header.spacing, values)
}

/// Writes `<header_path>` and a sibling `.raw` data file.
pub fn write_grid(grid: &DensityGrid, header_path: impl AsRef<Path>) -> Result<()> {
    let header_path = header_path.as_ref();
    let raw_path = header_path.with_extension("raw");
    let header = GridHeader {
        dims: grid.dims,
        origin: grid.origin.into(),
        spacing: grid.spacing,
        data: raw_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        dtype: default_dtype(),
    };
    let mut raw = Vec::with_capacity(grid.values.len() * 4);
    for &v in &grid.values {
        raw.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(header_path, text).map_err(|e| Error::io(header_path, e))
}
