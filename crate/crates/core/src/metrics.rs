//! Registration-quality metrics: Dice overlap, Jacobian-determinant
//! negativity, and non-diffeomorphic volume.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::grid::{DisplacementField, LabelVolume};
use crate::transform::diffusion_reg;

/// Flat summary serialized to JSON with stable keys. `dice_mean` is null
/// when no label pair was supplied.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub dice_per_label: BTreeMap<u16, f64>,
    pub dice_mean: Option<f64>,
    pub pct_neg_jacobian: f64,
    pub pct_ndv: f64,
    pub field_grad_energy: f64,
}

/// Dice similarity per label plus the mean over labels present in either
/// volume. Background (label 0) is excluded; a label present in exactly
/// one volume scores 0.
pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<(BTreeMap<u16, f64>, Option<f64>)> {
    a.dims().check_matches(b.dims())?;
    // per label: (count in a, count in b, overlap)
    let mut counts: BTreeMap<u16, (usize, usize, usize)> = BTreeMap::new();
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        if la != 0 {
            let e = counts.entry(la).or_default();
            e.0 += 1;
            if la == lb {
                e.2 += 1;
            }
        }
        if lb != 0 {
            counts.entry(lb).or_default().1 += 1;
        }
    }
    let per_label: BTreeMap<u16, f64> = counts
        .into_iter()
        .map(|(label, (na, nb, inter))| (label, 2.0 * inter as f64 / (na + nb) as f64))
        .collect();
    let mean = if per_label.is_empty() {
        None
    } else {
        Some(per_label.values().sum::<f64>() / per_label.len() as f64)
    };
    Ok((per_label, mean))
}

/// Round half-fractions toward the smaller index.
#[inline]
fn nearest_index(coord: f64, n: usize) -> usize {
    let r = (coord - 0.5).ceil();
    (r.max(0.0) as usize).min(n - 1)
}

/// Nearest-neighbor resampling of a label map at p + u(p), border
/// clamped; sampling ties round toward the smaller index.
pub fn warp_labels(labels: &LabelVolume, field: &DisplacementField) -> Result<LabelVolume> {
    labels.dims().check_matches(field.dims())?;
    let dims = labels.dims();
    let mut out = Vec::with_capacity(dims.len());
    let mut idx = 0;
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let u = field.vectors()[idx];
                let si = nearest_index(i as f64 + u[0], dims.nx);
                let sj = nearest_index(j as f64 + u[1], dims.ny);
                let sk = nearest_index(k as f64 + u[2], dims.nz);
                out.push(labels.get(si, sj, sk));
                idx += 1;
            }
        }
    }
    LabelVolume::new(dims, out)
}

#[inline]
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Jacobian determinant of p -> p + u(p) per voxel: central differences
/// at interior voxels, one-sided at the faces.
pub fn jacobian_det(field: &DisplacementField) -> Vec<f64> {
    let dims = field.dims();
    let v = field.vectors();
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let sizes = [dims.nx, dims.ny, dims.nz];
    let mut out = Vec::with_capacity(dims.len());
    let mut idx = 0;
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let pos = [i, j, k];
                // jac[a][b] = d(p_a + u_a)/d p_b
                let mut jac = [[0.0; 3]; 3];
                for b in 0..3 {
                    let (lo, hi, scale) = if pos[b] == 0 {
                        (idx, idx + strides[b], 1.0)
                    } else if pos[b] + 1 == sizes[b] {
                        (idx - strides[b], idx, 1.0)
                    } else {
                        (idx - strides[b], idx + strides[b], 0.5)
                    };
                    for a in 0..3 {
                        jac[a][b] = (v[hi][a] - v[lo][a]) * scale;
                    }
                }
                for a in 0..3 {
                    jac[a][a] += 1.0;
                }
                out.push(det3(&jac));
                idx += 1;
            }
        }
    }
    out
}

/// Percentage of voxels whose central-difference Jacobian determinant is
/// non-positive.
pub fn pct_nonpositive_jacobian(field: &DisplacementField) -> f64 {
    let dets = jacobian_det(field);
    let folded = dets.iter().filter(|&&d| d <= 0.0).count();
    100.0 * folded as f64 / dets.len() as f64
}

/// Non-diffeomorphic volume percentage. At each voxel the Jacobian is
/// formed once per forward/backward difference choice per axis (8
/// combinations, falling back to the available side at faces); the
/// voxel's non-diffeomorphic mass is the mean negative part of those
/// determinants.
pub fn ndv(field: &DisplacementField) -> f64 {
    let dims = field.dims();
    let v = field.vectors();
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let sizes = [dims.nx, dims.ny, dims.nz];
    let mut total_mass = 0.0;
    let mut idx = 0;
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let pos = [i, j, k];
                let mut mass = 0.0;
                for combo in 0..8u32 {
                    let mut jac = [[0.0; 3]; 3];
                    for b in 0..3 {
                        let backward = (combo >> b) & 1 == 1;
                        // fall back to the available side at faces
                        let use_backward = if pos[b] == 0 {
                            false
                        } else if pos[b] + 1 == sizes[b] {
                            true
                        } else {
                            backward
                        };
                        let (lo, hi) = if use_backward {
                            (idx - strides[b], idx)
                        } else {
                            (idx, idx + strides[b])
                        };
                        for a in 0..3 {
                            jac[a][b] = v[hi][a] - v[lo][a];
                        }
                    }
                    for a in 0..3 {
                        jac[a][a] += 1.0;
                    }
                    mass += (-det3(&jac)).max(0.0);
                }
                total_mass += mass / 8.0;
                idx += 1;
            }
        }
    }
    100.0 * total_mass / dims.len() as f64
}

/// Assemble the full report for a field, optionally scoring label overlap
/// for a (fixed labels, moving labels) pair; the moving labels are warped
/// by the field before comparison.
pub fn report(
    field: &DisplacementField,
    labels: Option<(&LabelVolume, &LabelVolume)>,
) -> Result<MetricsReport> {
    let (dice_per_label, dice_mean) = match labels {
        Some((fixed, moving)) => {
            let warped = warp_labels(moving, field)?;
            dice(fixed, &warped)?
        }
        None => (BTreeMap::new(), None),
    };
    Ok(MetricsReport {
        dice_per_label,
        dice_mean,
        pct_neg_jacobian: pct_nonpositive_jacobian(field),
        pct_ndv: ndv(field),
        field_grad_energy: diffusion_reg(field).0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, SplitMix64};

    fn labels_from(dims: Dims, labels: Vec<u16>) -> LabelVolume {
        LabelVolume::new(dims, labels).unwrap()
    }

    #[test]
    fn dice_identical_maps() {
        let dims = Dims::new(3, 3, 3);
        let mut data = vec![0u16; 27];
        data[0] = 1;
        data[1] = 1;
        data[5] = 2;
        let a = labels_from(dims, data.clone());
        let b = labels_from(dims, data);
        let (per, mean) = dice(&a, &b).unwrap();
        assert_eq!(per[&1], 1.0);
        assert_eq!(per[&2], 1.0);
        assert_eq!(mean, Some(1.0));
    }

    #[test]
    fn dice_disjoint_and_half_overlap() {
        let dims = Dims::new(4, 2, 2);
        // disjoint supports for label 1
        let mut a = vec![0u16; 16];
        let mut b = vec![0u16; 16];
        a[0] = 1;
        b[1] = 1;
        let (per, _) = dice(&labels_from(dims, a), &labels_from(dims, b)).unwrap();
        assert_eq!(per[&1], 0.0);

        // 4 voxels vs 4 voxels with overlap 2 -> 0.5
        let mut a = vec![0u16; 16];
        let mut b = vec![0u16; 16];
        for i in 0..4 {
            a[i] = 1;
        }
        for i in 2..6 {
            b[i] = 1;
        }
        let (per, mean) = dice(&labels_from(dims, a), &labels_from(dims, b)).unwrap();
        assert_eq!(per[&1], 0.5);
        assert_eq!(mean, Some(0.5));
    }

    #[test]
    fn dice_skips_absent_scores_one_sided_zero() {
        let dims = Dims::new(2, 2, 2);
        let mut a = vec![0u16; 8];
        a[0] = 3; // label 3 only in a
        let b = vec![0u16; 8];
        let (per, mean) = dice(&labels_from(dims, a), &labels_from(dims, b)).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(per[&3], 0.0);
        assert_eq!(mean, Some(0.0));
        // label absent from both is skipped entirely
        assert!(!per.contains_key(&7));
    }

    #[test]
    fn dice_is_symmetric() {
        let dims = Dims::new(4, 4, 4);
        let mut rng = SplitMix64::new(17);
        let a: Vec<u16> = (0..64).map(|_| (rng.next_u64() % 4) as u16).collect();
        let b: Vec<u16> = (0..64).map(|_| (rng.next_u64() % 4) as u16).collect();
        let a = labels_from(dims, a);
        let b = labels_from(dims, b);
        let (pa, ma) = dice(&a, &b).unwrap();
        let (pb, mb) = dice(&b, &a).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ma, mb);
    }

    #[test]
    fn warp_labels_identity_and_shift() {
        let dims = Dims::new(4, 4, 4);
        let mut data = vec![0u16; 64];
        data[dims.idx(1, 1, 1)] = 2;
        let l = labels_from(dims, data);
        let zero = DisplacementField::zeros(dims).unwrap();
        assert_eq!(warp_labels(&l, &zero).unwrap(), l);

        let mut shift = DisplacementField::zeros(dims).unwrap();
        for u in shift.vectors_mut() {
            u[0] = 1.0;
        }
        let warped = warp_labels(&l, &shift).unwrap();
        assert_eq!(warped.get(0, 1, 1), 2);
        assert_eq!(warped.get(1, 1, 1), 0);
    }

    #[test]
    fn warp_labels_half_voxel_tie_rounds_down() {
        // hand-enumerated 3x3x3 case: sampling at i + 0.5 must pick i
        let dims = Dims::new(3, 3, 3);
        let mut data = vec![0u16; 27];
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    data[dims.idx(i, j, k)] = i as u16 + 1;
                }
            }
        }
        let l = labels_from(dims, data);
        let mut field = DisplacementField::zeros(dims).unwrap();
        for u in field.vectors_mut() {
            u[0] = 0.5;
        }
        let warped = warp_labels(&l, &field).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                // 0 + 0.5 ties to index 0, 1 + 0.5 ties to 1, 2 + 0.5 clamps to 2
                assert_eq!(warped.get(0, j, k), 1);
                assert_eq!(warped.get(1, j, k), 2);
                assert_eq!(warped.get(2, j, k), 3);
            }
        }
        // just above the tie it rounds up
        for u in field.vectors_mut() {
            u[0] = 0.51;
        }
        let warped = warp_labels(&l, &field).unwrap();
        assert_eq!(warped.get(0, 0, 0), 2);
    }

    #[test]
    fn jacobian_of_zero_and_translation_fields_is_one() {
        let dims = Dims::new(4, 4, 4);
        let zero = DisplacementField::zeros(dims).unwrap();
        assert!(jacobian_det(&zero).iter().all(|&d| d == 1.0));
        let t = DisplacementField::new(dims, vec![[2.0, -1.0, 0.5]; 64]).unwrap();
        assert!(jacobian_det(&t).iter().all(|&d| d == 1.0));
    }

    #[test]
    fn jacobian_of_uniform_scaling_field() {
        let dims = Dims::new(6, 6, 6);
        let c = 2.5;
        let mut field = DisplacementField::zeros(dims).unwrap();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    field.set(
                        i,
                        j,
                        k,
                        [
                            0.1 * (i as f64 - c),
                            0.1 * (j as f64 - c),
                            0.1 * (k as f64 - c),
                        ],
                    );
                }
            }
        }
        // affine field: finite differences are exact, det = 1.1^3 everywhere
        for d in jacobian_det(&field) {
            assert!((d - 1.331).abs() < 1e-12);
        }
        assert_eq!(pct_nonpositive_jacobian(&field), 0.0);
        assert_eq!(ndv(&field), 0.0);
    }

    #[test]
    fn folding_field_is_detected() {
        let dims = Dims::new(6, 4, 4);
        let mut field = DisplacementField::zeros(dims).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..6 {
                    field.set(i, j, k, [-2.0 * i as f64, 0.0, 0.0]);
                }
            }
        }
        let dets = jacobian_det(&field);
        // du_x/dx = -2 everywhere, so det = -1
        assert!(dets.iter().all(|&d| (d + 1.0).abs() < 1e-12));
        assert_eq!(pct_nonpositive_jacobian(&field), 100.0);
        assert!(ndv(&field) > 0.0);
    }

    #[test]
    fn identity_report_anchor() {
        let dims = Dims::new(4, 4, 4);
        let mut data = vec![0u16; 64];
        data[5] = 1;
        data[6] = 2;
        data[7] = 3;
        let labels = labels_from(dims, data);
        let zero = DisplacementField::zeros(dims).unwrap();
        let r = report(&zero, Some((&labels, &labels))).unwrap();
        assert_eq!(r.dice_mean, Some(1.0));
        assert_eq!(r.pct_neg_jacobian, 0.0);
        assert_eq!(r.pct_ndv, 0.0);
        assert_eq!(r.field_grad_energy, 0.0);
    }

    #[test]
    fn report_serializes_with_stable_keys() {
        let dims = Dims::new(2, 2, 2);
        let zero = DisplacementField::zeros(dims).unwrap();
        let r = report(&zero, None).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        let obj = json.as_object().unwrap();
        for key in [
            "dice_per_label",
            "dice_mean",
            "pct_neg_jacobian",
            "pct_ndv",
            "field_grad_energy",
        ] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert!(json["dice_mean"].is_null());
    }
}
