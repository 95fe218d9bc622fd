//! Synthetic multi-modal phantoms with ground-truth deformations.
//!
//! A phantom pairs a smooth blob "anatomy" (the fixed image) with a
//! moving image obtained by warping through the inverse of a known
//! smooth deformation and remapping intensities through a functional
//! relationship, which is exactly the setting the correlation ratio is
//! built for. Iso-intensity bands of the fixed image provide matched
//! segmentations for overlap scoring.

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, LabelVolume, Volume};
use crate::metrics;
use crate::transform;

/// Self-contained splitmix-style generator so concurrent phantom calls
/// never share state and identical seeds give identical bytes.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Pointwise intensity mapping applied to the warped anatomy, standing
/// in for a second acquisition modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Remap {
    /// y = x^2 (monotone, nonlinear)
    Quadratic,
    /// y = 1 - x (contrast inversion)
    Inverted,
    /// y = sin(pi x) (nonmonotone)
    Sinus,
}

impl Remap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Remap::Quadratic => x * x,
            Remap::Inverted => 1.0 - x,
            Remap::Sinus => (std::f64::consts::PI * x).sin(),
        }
    }
}

impl std::str::FromStr for Remap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quadratic" => Ok(Remap::Quadratic),
            "inverted" => Ok(Remap::Inverted),
            "sinus" => Ok(Remap::Sinus),
            other => Err(format!("unknown remap {other:?} (expected quadratic, inverted or sinus)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub seed: u64,
    /// Root-mean-square displacement magnitude of the ground-truth
    /// field, in voxels (the diffeomorphism bound may shrink it).
    pub deformation_amplitude: f64,
    /// Gaussian sigma (voxels) used to smooth the ground-truth field.
    pub deformation_smoothness: f64,
    pub remap: Remap,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::new(48, 48, 48),
            seed: 42,
            deformation_amplitude: 3.0,
            deformation_smoothness: 6.0,
            remap: Remap::Quadratic,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.deformation_amplitude < 0.0 {
            return Err(Error::InvalidConfig(
                "deformation_amplitude must be nonnegative".into(),
            ));
        }
        if !(self.deformation_smoothness > 0.0) {
            return Err(Error::InvalidConfig(
                "deformation_smoothness must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub moving: Volume,
    pub fixed: Volume,
    /// Ground-truth displacement on the fixed grid: warping the moving
    /// image by this field reproduces the remapped fixed anatomy.
    pub truth: DisplacementField,
    pub labels_moving: LabelVolume,
    pub labels_fixed: LabelVolume,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-(t as f64) * (t as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    kernel
}

/// Separable Gaussian smoothing of one scalar lattice; taps falling off
/// the grid are dropped and the remaining weights renormalized.
fn smooth(data: &mut Vec<f64>, dims: Dims, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let sizes = [dims.nx, dims.ny, dims.nz];
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let mut scratch = vec![0.0; data.len()];
    for axis in 0..3 {
        let size = sizes[axis] as i64;
        let stride = strides[axis];
        for k in 0..dims.nz {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let pos = [i as i64, j as i64, k as i64];
                    let idx = dims.idx(i, j, k);
                    let mut acc = 0.0;
                    let mut weight = 0.0;
                    for (t, &kv) in kernel.iter().enumerate() {
                        let off = t as i64 - radius;
                        let q = pos[axis] + off;
                        if q >= 0 && q < size {
                            let sample = idx as i64 + off * stride as i64;
                            acc += kv * data[sample as usize];
                            weight += kv;
                        }
                    }
                    scratch[idx] = acc / weight;
                }
            }
        }
        std::mem::swap(data, &mut scratch);
    }
}

fn normalize_unit(data: &mut [f64]) -> Result<()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::PhantomGeneration { attempts: 0 });
    }
    for v in data {
        *v = (*v - lo) / (hi - lo);
    }
    Ok(())
}

/// Blob anatomy terraced into tissue-like intensity classes. The raw
/// blob sum is pushed through steep (but smooth) sigmoids at four
/// levels, creating plateaus separated by thin transition shells: the
/// shells act like tissue boundaries, so misalignment puts whole-class
/// intensity errors next to them. A faint band-limited texture adds
/// signal inside the plateaus.
fn blob_anatomy(dims: Dims, rng: &mut SplitMix64) -> Result<Volume> {
    const BLOBS: usize = 14;
    const TERRACE_STEEPNESS: f64 = 30.0;
    const TEXTURE_WEIGHT: f64 = 0.45;
    let extents = [dims.nx as f64, dims.ny as f64, dims.nz as f64];
    let min_extent = extents.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut centers = [[0.0; 3]; BLOBS];
    let mut sigmas = [0.0; BLOBS];
    let mut amps = [0.0; BLOBS];
    for b in 0..BLOBS {
        for a in 0..3 {
            centers[b][a] = rng.next_range(0.1, 0.9) * (extents[a] - 1.0);
        }
        sigmas[b] = rng.next_range(0.08, 0.2) * min_extent;
        amps[b] = rng.next_range(0.35, 1.0);
    }
    let mut data = vec![0.0; dims.len()];
    let mut idx = 0;
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let p = [i as f64, j as f64, k as f64];
                let mut v = 0.0;
                for b in 0..BLOBS {
                    let dx = p[0] - centers[b][0];
                    let dy = p[1] - centers[b][1];
                    let dz = p[2] - centers[b][2];
                    let r2 = dx * dx + dy * dy + dz * dz;
                    v += amps[b] * (-r2 / (2.0 * sigmas[b] * sigmas[b])).exp();
                }
                data[idx] = v;
                idx += 1;
            }
        }
    }
    normalize_unit(&mut data)?;

    // meso-scale folding keeps class boundaries close to every voxel
    let mut folds: Vec<f64> = (0..dims.len()).map(|_| rng.next_range(-1.0, 1.0)).collect();
    smooth(&mut folds, dims, 2.2);
    normalize_unit(&mut folds)?;
    for (v, f) in data.iter_mut().zip(&folds) {
        *v += 0.9 * f;
    }
    normalize_unit(&mut data)?;
    for v in data.iter_mut() {
        let mut terraced = 0.0;
        for level in 1..=4 {
            let t = TERRACE_STEEPNESS * (*v - 0.2 * level as f64);
            terraced += 0.25 / (1.0 + (-t).exp());
        }
        *v = terraced;
    }

    let mut texture: Vec<f64> = (0..dims.len()).map(|_| rng.next_range(-1.0, 1.0)).collect();
    smooth(&mut texture, dims, 1.5);
    normalize_unit(&mut texture)?;
    for (v, t) in data.iter_mut().zip(&texture) {
        *v += TEXTURE_WEIGHT * t;
    }
    normalize_unit(&mut data)?;
    Volume::new(dims, data)
}

fn smooth_random_field(
    dims: Dims,
    crop: usize,
    rng: &mut SplitMix64,
    amplitude: f64,
    sigma: f64,
) -> Result<DisplacementField> {
    let n = dims.len();
    let mut components = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for comp in &mut components {
        for v in comp.iter_mut() {
            *v = rng.next_range(-1.0, 1.0);
        }
        smooth(comp, dims, sigma);
    }
    // amplitude is the root-mean-square displacement magnitude over the
    // region that survives cropping
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for k in crop..dims.nz - crop {
        for j in crop..dims.ny - crop {
            for i in crop..dims.nx - crop {
                let idx = dims.idx(i, j, k);
                sq_sum += components[0][idx] * components[0][idx]
                    + components[1][idx] * components[1][idx]
                    + components[2][idx] * components[2][idx];
                count += 1;
            }
        }
    }
    let rms = (sq_sum / count as f64).sqrt();
    let scale = if rms > 0.0 { amplitude / rms } else { 0.0 };
    let vectors: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                components[0][i] * scale,
                components[1][i] * scale,
                components[2][i] * scale,
            ]
        })
        .collect();
    DisplacementField::new(dims, vectors)
}

fn rescale(field: &DisplacementField, factor: f64) -> DisplacementField {
    let vectors = field
        .vectors()
        .iter()
        .map(|v| [v[0] * factor, v[1] * factor, v[2] * factor])
        .collect();
    DisplacementField::new(field.dims(), vectors).expect("scaled field stays finite")
}

/// Iso-intensity bands of a [0, 1] image: 4 foreground bands starting at
/// intensity 0.2, background below.
fn band_labels(v: &Volume) -> LabelVolume {
    let labels = v
        .data()
        .iter()
        .map(|&x| {
            if x < 0.2 {
                0
            } else if x < 0.4 {
                1
            } else if x < 0.6 {
                2
            } else if x < 0.8 {
                3
            } else {
                4
            }
        })
        .collect();
    LabelVolume::new(v.dims(), labels).expect("band labels match dims")
}

fn crop_volume(v: &Volume, dims: Dims, pad: usize) -> Volume {
    let mut data = Vec::with_capacity(dims.len());
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                data.push(v.get(i + pad, j + pad, k + pad));
            }
        }
    }
    Volume::new(dims, data).expect("cropped volume stays valid")
}

fn crop_field(f: &DisplacementField, dims: Dims, pad: usize) -> DisplacementField {
    let mut vectors = Vec::with_capacity(dims.len());
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                vectors.push(f.get(i + pad, j + pad, k + pad));
            }
        }
    }
    DisplacementField::new(dims, vectors).expect("cropped field stays valid")
}

fn crop_labels(l: &LabelVolume, dims: Dims, pad: usize) -> LabelVolume {
    let mut labels = Vec::with_capacity(dims.len());
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                labels.push(l.get(i + pad, j + pad, k + pad));
            }
        }
    }
    LabelVolume::new(dims, labels).expect("cropped labels stay valid")
}

/// Generate a deterministic synthetic pair: blob anatomy, a
/// diffeomorphic ground-truth field (rescaled until the minimum
/// finite-difference Jacobian determinant exceeds 0.1), a moving image
/// warped through the approximate inverse and intensity-remapped, and
/// matched iso-intensity band segmentations.
///
/// Everything is synthesized on a padded grid and cropped at the end, so
/// voxels near the faces see real anatomy that flowed in from outside
/// the final field of view rather than border streaks.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let pad = if spec.deformation_amplitude > 0.0 { 10 } else { 0 };
    let pdims = Dims::new(spec.dims.nx + 2 * pad, spec.dims.ny + 2 * pad, spec.dims.nz + 2 * pad);
    let mut rng = SplitMix64::new(spec.seed);
    let fixed_p = blob_anatomy(pdims, &mut rng)?;
    let mut truth_p = smooth_random_field(
        pdims,
        pad,
        &mut rng,
        spec.deformation_amplitude,
        spec.deformation_smoothness,
    )?;
    let mut attempts = 0;
    loop {
        let min_det = metrics::jacobian_det(&truth_p)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_det > 0.1 {
            break;
        }
        attempts += 1;
        if attempts > 10 {
            return Err(Error::PhantomGeneration { attempts });
        }
        truth_p = rescale(&truth_p, 0.8);
    }

    let inverse_p = transform::invert_field(&truth_p, 40);
    let remapped_p = fixed_p.map(|x| spec.remap.apply(x))?;
    let moving_p = transform::warp(&remapped_p, &inverse_p).warped;
    let labels_fixed_p = band_labels(&fixed_p);
    let labels_moving_p = metrics::warp_labels(&labels_fixed_p, &inverse_p)?;

    let fixed = crop_volume(&fixed_p, spec.dims, pad);
    let moving = crop_volume(&moving_p, spec.dims, pad);
    let truth = crop_field(&truth_p, spec.dims, pad);
    let labels_fixed = crop_labels(&labels_fixed_p, spec.dims, pad);
    let labels_moving = crop_labels(&labels_moving_p, spec.dims, pad);

    let distinct: std::collections::BTreeSet<u16> = labels_fixed
        .labels()
        .iter()
        .copied()
        .filter(|&l| l != 0)
        .collect();
    if distinct.len() < 3 {
        return Err(Error::PhantomGeneration { attempts });
    }

    Ok(Phantom {
        moving,
        fixed,
        truth,
        labels_moving,
        labels_fixed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_is_deterministic_and_in_range() {
        let mut a = SplitMix64::new(123);
        let mut b = SplitMix64::new(123);
        for _ in 0..100 {
            let x = a.next_f64();
            assert_eq!(x, b.next_f64());
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn zero_amplitude_gives_identity_pair() {
        let spec = PhantomSpec {
            dims: Dims::new(16, 16, 16),
            seed: 5,
            deformation_amplitude: 0.0,
            deformation_smoothness: 4.0,
            remap: Remap::Quadratic,
        };
        let p = make_phantom(&spec).unwrap();
        assert!(p.truth.vectors().iter().all(|u| *u == [0.0; 3]));
        for (m, f) in p.moving.data().iter().zip(p.fixed.data()) {
            assert_eq!(m.to_bits(), (f * f).to_bits());
        }
        assert_eq!(p.labels_moving, p.labels_fixed);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            dims: Dims::new(12, 12, 12),
            seed: 77,
            deformation_amplitude: 2.0,
            deformation_smoothness: 3.0,
            remap: Remap::Sinus,
        };
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.labels_fixed, b.labels_fixed);
        assert_eq!(a.labels_moving, b.labels_moving);
    }

    #[test]
    fn default_spec_truth_is_diffeomorphic() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let min_det = metrics::jacobian_det(&p.truth)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(min_det > 0.1, "min |J| = {min_det}");
        // amplitude is the rms displacement magnitude (unless the
        // jacobian bound forced a rescale)
        let n = p.truth.vectors().len() as f64;
        let rms = (p
            .truth
            .vectors()
            .iter()
            .map(|u| u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
            .sum::<f64>()
            / n)
            .sqrt();
        assert!(rms <= 3.0 + 1e-9 && rms > 1.5, "rms = {rms}");
    }

    #[test]
    fn labels_have_enough_bands() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let distinct: std::collections::BTreeSet<u16> =
            p.labels_fixed.labels().iter().copied().filter(|&l| l != 0).collect();
        assert!(distinct.len() >= 3);
        let (lo, hi) = p.fixed.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!(hi - lo > 0.8);
    }

    #[test]
    fn inverse_field_round_trips() {
        let spec = PhantomSpec {
            dims: Dims::new(20, 20, 20),
            seed: 11,
            deformation_amplitude: 2.0,
            deformation_smoothness: 5.0,
            ..PhantomSpec::default()
        };
        let p = make_phantom(&spec).unwrap();
        let inverse = transform::invert_field(&p.truth, 40);
        // composing u with its inverse lands close to the identity away
        // from the borders
        let mut worst: f64 = 0.0;
        for k in 4..16 {
            for j in 4..16 {
                for i in 4..16 {
                    let u = p.truth.get(i, j, k);
                    let q = [i as f64 + u[0], j as f64 + u[1], k as f64 + u[2]];
                    let v = transform::sample_field(&inverse, q[0], q[1], q[2]);
                    let err = ((u[0] + v[0]).powi(2)
                        + (u[1] + v[1]).powi(2)
                        + (u[2] + v[2]).powi(2))
                    .sqrt();
                    worst = worst.max(err);
                }
            }
        }
        assert!(worst < 0.05, "inverse consistency error {worst}");
    }
}
