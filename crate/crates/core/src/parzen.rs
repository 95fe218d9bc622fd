//! Soft intensity binning with Gaussian Parzen windows.
//!
//! Every voxel intensity x contributes mass to every bin k through
//!
//!   w_k(x) = 1 / (h * sqrt(2*pi)) * exp(-(x - c_k)^2 / (2 h^2)),
//!
//! where c_k is the bin center and h the kernel bandwidth. The weights
//! are intentionally left unnormalized per voxel; the per-bin masses of
//! a whole image are normalized where a probability is needed.

use crate::error::{Error, Result};
use crate::grid::Volume;

/// Guard added to denominators so empty bins keep finite gradients.
pub const EPS: f64 = 1e-10;

/// Binning layout shared by the similarity measures: B evenly spaced bin
/// centers across a clamping range, plus the Gaussian bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenConfig {
    num_bins: usize,
    bandwidth: f64,
    intensity_min: f64,
    intensity_max: f64,
    bin_centers: Vec<f64>,
}

impl ParzenConfig {
    /// Build a config over an explicit intensity range. Centers sit at
    /// min + (k + 0.5) * (max - min) / B.
    pub fn new(num_bins: usize, intensity_min: f64, intensity_max: f64, bandwidth: f64) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 bins, got {num_bins}"
            )));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        if !(intensity_max > intensity_min) {
            return Err(Error::InvalidConfig(format!(
                "intensity_max ({intensity_max}) must exceed intensity_min ({intensity_min})"
            )));
        }
        let width = (intensity_max - intensity_min) / num_bins as f64;
        let bin_centers = (0..num_bins)
            .map(|k| intensity_min + (k as f64 + 0.5) * width)
            .collect();
        Ok(ParzenConfig {
            num_bins,
            bandwidth,
            intensity_min,
            intensity_max,
            bin_centers,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn intensity_min(&self) -> f64 {
        self.intensity_min
    }

    pub fn intensity_max(&self) -> f64 {
        self.intensity_max
    }

    pub fn bin_centers(&self) -> &[f64] {
        &self.bin_centers
    }

    pub fn bin_width(&self) -> f64 {
        (self.intensity_max - self.intensity_min) / self.num_bins as f64
    }

    /// Clamp an intensity into the binning range.
    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.intensity_min, self.intensity_max)
    }
}

/// Config derived from a volume's intensity range: h defaults to one bin
/// width (`bandwidth_scale` = 1).
pub fn default_config(v: &Volume, num_bins: usize, bandwidth_scale: f64) -> Result<ParzenConfig> {
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateRange);
    }
    if !(bandwidth_scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "bandwidth_scale must be positive, got {bandwidth_scale}"
        )));
    }
    let h = bandwidth_scale * (hi - lo) / num_bins as f64;
    ParzenConfig::new(num_bins, lo, hi, h)
}

/// Fill `out` with the kernel weight of every bin for intensity `x`
/// (clamped into the binning range first).
///
/// Evenly spaced centers make consecutive weights differ by a geometric
/// factor, so the row is evaluated with one exp at the nearest bin and a
/// multiplicative recurrence outward (weights only shrink from the
/// anchor, so nothing can overflow and underflow to zero only where the
/// direct formula underflows too).
#[inline]
pub(crate) fn fill_weights(cfg: &ParzenConfig, x: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), cfg.num_bins);
    let xc = cfg.clamp(x);
    let width = cfg.bin_width();
    let norm = 1.0 / (cfg.bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let inv_two_h2 = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
    let anchor = (((xc - cfg.intensity_min) / width) as usize).min(cfg.num_bins - 1);
    let d = xc - cfg.bin_centers[anchor];
    out[anchor] = norm * (-d * d * inv_two_h2).exp();
    let q = (-2.0 * width * width * inv_two_h2).exp();
    let mut up = ((2.0 * d - width) * width * inv_two_h2).exp();
    for k in anchor + 1..cfg.num_bins {
        out[k] = out[k - 1] * up;
        up *= q;
    }
    let mut down = ((-2.0 * d - width) * width * inv_two_h2).exp();
    for k in (0..anchor).rev() {
        out[k] = out[k + 1] * down;
        down *= q;
    }
}

/// Fill dw = del w / del x from already-computed weights. The derivative
/// is zero when the clamp is active (x outside the range).
#[inline]
pub(crate) fn fill_derivs_from_weights(cfg: &ParzenConfig, x: f64, w: &[f64], dw: &mut [f64]) {
    let clamped = x < cfg.intensity_min || x > cfg.intensity_max;
    if clamped {
        dw.fill(0.0);
        return;
    }
    let inv_h2 = 1.0 / (cfg.bandwidth * cfg.bandwidth);
    for ((d, &wk), &c) in dw.iter_mut().zip(w.iter()).zip(&cfg.bin_centers) {
        *d = -(x - c) * inv_h2 * wk;
    }
}

/// Kernel weights of intensity `x` for every bin.
pub fn weights(x: f64, cfg: &ParzenConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.num_bins];
    fill_weights(cfg, x, &mut out);
    out
}

/// Materialized voxel-by-bin weight matrix with cached row and column
/// sums. Row i holds `weights(x_i)`. Peak memory is N * B f64 values;
/// the similarity measures stream the same values instead of storing
/// them.
#[derive(Debug, Clone)]
pub struct WeightTable {
    num_voxels: usize,
    num_bins: usize,
    entries: Vec<f64>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
}

impl WeightTable {
    pub fn num_voxels(&self) -> usize {
        self.num_voxels
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    /// Weight of voxel `i` in bin `k`.
    pub fn entry(&self, i: usize, k: usize) -> f64 {
        self.entries[i * self.num_bins + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.num_bins..(i + 1) * self.num_bins]
    }

    /// Per-voxel sums over bins.
    pub fn row_sums(&self) -> &[f64] {
        &self.row_sums
    }

    /// Per-bin sums over voxels.
    pub fn col_sums(&self) -> &[f64] {
        &self.col_sums
    }
}

/// Evaluate the weight matrix of a whole volume. Sums are accumulated
/// sequentially in voxel order so repeated runs agree bitwise.
pub fn weight_table(v: &Volume, cfg: &ParzenConfig) -> WeightTable {
    let n = v.data().len();
    let b = cfg.num_bins;
    let mut entries = vec![0.0; n * b];
    let mut row_sums = vec![0.0; n];
    let mut col_sums = vec![0.0; b];
    for (i, &x) in v.data().iter().enumerate() {
        let row = &mut entries[i * b..(i + 1) * b];
        fill_weights(cfg, x, row);
        let mut rs = 0.0;
        for (k, &w) in row.iter().enumerate() {
            rs += w;
            col_sums[k] += w;
        }
        row_sums[i] = rs;
    }
    WeightTable {
        num_voxels: n,
        num_bins: b,
        entries,
        row_sums,
        col_sums,
    }
}

/// Per-bin masses normalized to sum 1: n_k = col_sum_k / total.
pub fn normalized_bin_weights(t: &WeightTable) -> Result<Vec<f64>> {
    let total: f64 = t.col_sums.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(t.col_sums.iter().map(|&s| s / total).collect())
}
