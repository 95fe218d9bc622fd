//! Finite-difference verification of every analytic gradient: the
//! correlation ratio in both arguments, the symmetric loss, mutual
//! information, the diffusion regularizer, and the full objective
//! chained through the warp onto displacement components.

use correg::driver::{total_loss_with_configs, Measure};
use correg::grid::{Dims, DisplacementField, SplitMix64, Volume};
use correg::parzen::ParzenConfig;
use correg::similarity::{correlation_ratio, cr_loss, mutual_information};
use correg::transform::diffusion_reg;

const FD_STEP: f64 = 1e-5;

/// Tolerance rule: 1e-4 relative, 1e-7 absolute below magnitude 1e-3.
fn check(analytic: f64, fd: f64, what: &str) {
    let mag = analytic.abs().max(fd.abs());
    let err = (analytic - fd).abs();
    if mag >= 1e-3 {
        assert!(
            err <= 1e-4 * mag,
            "{what}: analytic {analytic} vs fd {fd} (rel {})",
            err / mag
        );
    } else {
        assert!(err <= 1e-7, "{what}: analytic {analytic} vs fd {fd}");
    }
}

/// Random intensities in [0.2, 0.8] so the test configs over [0, 1]
/// leave headroom for probes: no clamp boundary is ever touched.
fn random_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = SplitMix64::new(seed);
    Volume::new(
        dims,
        (0..dims.len()).map(|_| 0.2 + 0.6 * rng.next_f64()).collect(),
    )
    .unwrap()
}

fn padded_config(bins: usize) -> ParzenConfig {
    ParzenConfig::new(bins, 0.0, 1.0, 1.0 / bins as f64).unwrap()
}

fn probe_voxels(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    (0..count).map(|_| (rng.next_u64() % n as u64) as usize).collect()
}

fn fd_intensity(
    value_of: impl Fn(&Volume) -> f64,
    vol: &Volume,
    idx: usize,
) -> f64 {
    let mut plus = vol.clone();
    plus.data_mut()[idx] += FD_STEP;
    let mut minus = vol.clone();
    minus.data_mut()[idx] -= FD_STEP;
    (value_of(&plus) - value_of(&minus)) / (2.0 * FD_STEP)
}

#[test]
fn correlation_ratio_gradients_match_fd() {
    let dims = Dims::new(8, 8, 8);
    let cfg = padded_config(32);
    for pair in 0..5 {
        let x = random_volume(dims, 1000 + pair);
        let y = random_volume(dims, 2000 + pair);
        let eval = correlation_ratio(&x, &y, &cfg).unwrap();
        for &idx in &probe_voxels(dims.len(), 15, 3000 + pair) {
            let fd_x = fd_intensity(|v| correlation_ratio(v, &y, &cfg).unwrap().value, &x, idx);
            check(eval.grad_first[idx], fd_x, "eta grad_first");
            let fd_y = fd_intensity(|v| correlation_ratio(&x, v, &cfg).unwrap().value, &y, idx);
            check(eval.grad_second[idx], fd_y, "eta grad_second");
        }
    }
}

#[test]
fn cr_loss_gradients_match_fd() {
    let dims = Dims::new(8, 8, 8);
    let cfg = padded_config(32);
    for pair in 0..5 {
        let f = random_volume(dims, 4000 + pair);
        let w = random_volume(dims, 5000 + pair);
        let eval = cr_loss(&f, &w, &cfg, &cfg).unwrap();
        for &idx in &probe_voxels(dims.len(), 15, 6000 + pair) {
            let fd_f = fd_intensity(|v| cr_loss(v, &w, &cfg, &cfg).unwrap().value, &f, idx);
            check(eval.grad_first[idx], fd_f, "cr_loss grad_first");
            let fd_w = fd_intensity(|v| cr_loss(&f, v, &cfg, &cfg).unwrap().value, &w, idx);
            check(eval.grad_second[idx], fd_w, "cr_loss grad_second");
        }
    }
}

#[test]
fn mutual_information_gradients_match_fd() {
    let dims = Dims::new(8, 8, 8);
    let cfg = padded_config(32);
    for pair in 0..5 {
        let x = random_volume(dims, 7000 + pair);
        let y = random_volume(dims, 8000 + pair);
        let eval = mutual_information(&x, &y, &cfg, &cfg).unwrap();
        for &idx in &probe_voxels(dims.len(), 15, 9000 + pair) {
            let fd_x = fd_intensity(|v| mutual_information(v, &y, &cfg, &cfg).unwrap().value, &x, idx);
            check(eval.grad_first[idx], fd_x, "mi grad_first");
            let fd_y = fd_intensity(|v| mutual_information(&x, v, &cfg, &cfg).unwrap().value, &y, idx);
            check(eval.grad_second[idx], fd_y, "mi grad_second");
        }
    }
}

/// Small positive displacements keep warp samples strictly inside the
/// grid at interior probes and away from trilinear cell boundaries.
fn test_field(dims: Dims, seed: u64) -> DisplacementField {
    let mut rng = SplitMix64::new(seed);
    let vectors = (0..dims.len())
        .map(|_| {
            [
                0.1 + 0.25 * rng.next_f64(),
                0.1 + 0.25 * rng.next_f64(),
                0.1 + 0.25 * rng.next_f64(),
            ]
        })
        .collect();
    DisplacementField::new(dims, vectors).unwrap()
}

fn interior_probes(dims: Dims, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = 1 + (rng.next_u64() % (dims.nx as u64 - 2)) as usize;
        let j = 1 + (rng.next_u64() % (dims.ny as u64 - 2)) as usize;
        let k = 1 + (rng.next_u64() % (dims.nz as u64 - 2)) as usize;
        let c = (rng.next_u64() % 3) as usize;
        out.push((dims.idx(i, j, k), c));
    }
    out
}

#[test]
fn diffusion_reg_gradient_matches_fd() {
    let dims = Dims::new(8, 8, 8);
    for trial in 0..3 {
        let field = test_field(dims, 100 + trial);
        let (_, grad) = diffusion_reg(&field);
        for &(idx, c) in &interior_probes(dims, 20, 200 + trial) {
            let mut plus = field.clone();
            plus.vectors_mut()[idx][c] += FD_STEP;
            let mut minus = field.clone();
            minus.vectors_mut()[idx][c] -= FD_STEP;
            let fd = (diffusion_reg(&plus).0 - diffusion_reg(&minus).0) / (2.0 * FD_STEP);
            check(grad[idx][c], fd, "diffusion grad");
        }
    }
}

#[test]
fn total_objective_gradient_matches_fd_through_warp() {
    let dims = Dims::new(8, 8, 8);
    let cfg = padded_config(32);
    for (measure, seed) in [(Measure::Cr, 300u64), (Measure::Mi, 400), (Measure::Cr, 500)] {
        let fixed = random_volume(dims, seed);
        let moving = random_volume(dims, seed + 1);
        let field = test_field(dims, seed + 2);
        let lambda = 2.5;
        let (_, grad) =
            total_loss_with_configs(&fixed, &moving, &field, &cfg, &cfg, measure, lambda).unwrap();
        let value_of = |f: &DisplacementField| {
            total_loss_with_configs(&fixed, &moving, f, &cfg, &cfg, measure, lambda)
                .unwrap()
                .0
                .total
        };
        for &(idx, c) in &interior_probes(dims, 12, seed + 3) {
            let mut plus = field.clone();
            plus.vectors_mut()[idx][c] += FD_STEP;
            let mut minus = field.clone();
            minus.vectors_mut()[idx][c] -= FD_STEP;
            let fd = (value_of(&plus) - value_of(&minus)) / (2.0 * FD_STEP);
            check(grad[idx][c], fd, &format!("total objective ({measure})"));
        }
    }
}
