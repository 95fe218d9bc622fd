//! Volumetric containers: scalar volumes, displacement fields, label maps.
//!
//! Storage is row-major with x fastest: voxel (i, j, k) lives at linear
//! index `i + nx * (j + ny * k)`. Displacements are expressed in voxel
//! units; `spacing` is carried as metadata only.

pub mod io;
pub mod phantom;

pub use phantom::{make_phantom, Phantom, PhantomSpec, Remap, SplitMix64};

use crate::error::{Error, Result};

/// Grid extents in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    /// Total voxel count.
    pub fn len(self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel (i, j, k).
    #[inline]
    pub fn idx(self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        i + self.nx * (j + self.ny * k)
    }

    pub(crate) fn validate(self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || self.nz < 2 {
            return Err(Error::InvalidDims(format!(
                "every axis needs at least 2 voxels, got {self}"
            )));
        }
        Ok(())
    }

    pub(crate) fn check_matches(self, other: Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimMismatch {
                expected: self.to_string(),
                actual: other.to_string(),
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Scalar 3-D image. Intensities are held as f64 regardless of file
/// precision so finite-difference checks against analytic gradients are
/// meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidDims(format!(
                "data length {} does not match dims {dims}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "volume intensity",
                index,
            });
        }
        Ok(Volume {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![0.0; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.dims.idx(i, j, k);
        self.data[idx] = value;
    }

    /// Intensity range as (min, max).
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Pointwise intensity remap.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::with_spacing(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Dense per-voxel displacement u, in voxel units, same ordering as
/// `Volume`. The transform it encodes is p -> p + u(p).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    dims: Dims,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn new(dims: Dims, vectors: Vec<[f64; 3]>) -> Result<Self> {
        dims.validate()?;
        if vectors.len() != dims.len() {
            return Err(Error::InvalidDims(format!(
                "vector count {} does not match dims {dims}",
                vectors.len()
            )));
        }
        for (index, v) in vectors.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite {
                    what: "displacement component",
                    index,
                });
            }
        }
        Ok(DisplacementField { dims, vectors })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![[0.0; 3]; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.vectors
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.vectors[self.dims.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: [f64; 3]) {
        let idx = self.dims.idx(i, j, k);
        self.vectors[idx] = v;
    }

    /// Mean Euclidean norm of the displacement vectors.
    pub fn mean_magnitude(&self) -> f64 {
        let total: f64 = self
            .vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .sum();
        total / self.vectors.len() as f64
    }

    /// Largest Euclidean norm over the grid.
    pub fn max_magnitude(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// Integer label map; label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u16>) -> Result<Self> {
        dims.validate()?;
        if labels.len() != dims.len() {
            return Err(Error::InvalidDims(format!(
                "label count {} does not match dims {dims}",
                labels.len()
            )));
        }
        Ok(LabelVolume { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.labels[self.dims.idx(i, j, k)]
    }
}
