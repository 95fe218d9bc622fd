//! Instance-specific registration: coarse-to-fine optimization of a
//! dense displacement field under similarity + lambda * smoothness,
//! plus the landscape and lambda sweep studies.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Dims, DisplacementField, LabelVolume, Volume};
use crate::metrics::{self, MetricsReport};
use crate::parzen::{default_config, ParzenConfig};
use crate::similarity::{cr_loss_impl, mutual_information_impl, SimilarityEval};

pub use crate::similarity::Measure;
use crate::transform::{affine_field, chain_to_field, diffusion_reg, sample_field, warp, AffineParams};

/// Default lambda grids for sweep studies, one pair per measure.
pub const DEFAULT_LAMBDAS_CR: [f64; 2] = [4.2, 7.7];
pub const DEFAULT_LAMBDAS_MI: [f64; 2] = [1.7, 4.5];

#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub measure: Measure,
    /// Weight of the diffusion regularizer.
    pub lambda: f64,
    /// Pyramid depth; each level halves the grid.
    pub levels: usize,
    pub iters_per_level: usize,
    /// Initial Adam step size in voxels; a cosine schedule decays it to
    /// zero within each level.
    pub step_size: f64,
    pub adam_betas: (f64, f64),
    pub bins: usize,
    pub bandwidth_scale: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            measure: Measure::Cr,
            lambda: 4.2,
            levels: 3,
            iters_per_level: 200,
            step_size: 1.0,
            adam_betas: (0.9, 0.999),
            bins: 32,
            bandwidth_scale: 1.0,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be nonnegative".into()));
        }
        if self.levels < 1 {
            return Err(Error::InvalidConfig("levels must be at least 1".into()));
        }
        if self.iters_per_level < 1 {
            return Err(Error::InvalidConfig("iters_per_level must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig("step_size must be positive".into()));
        }
        if self.bins < 2 {
            return Err(Error::InvalidConfig("bins must be at least 2".into()));
        }
        Ok(())
    }
}

/// One recorded objective evaluation; total = similarity + reg_weighted.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub similarity: f64,
    pub reg_weighted: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegistrationReport {
    #[serde(skip)]
    pub final_field: DisplacementField,
    /// One entry per iteration (levels * iters_per_level), evaluated
    /// before each update.
    pub loss_history: Vec<LossTerms>,
    /// Objective of the returned field at the finest level.
    pub final_loss: LossTerms,
    pub metrics: MetricsReport,
    /// Not serialized: wall time is run-dependent while the report files
    /// must be byte-reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// One sampled point of a translation or rotation landscape sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LandscapeRow {
    pub param: f64,
    /// Similarity loss only (lower is better); lambda is excluded.
    pub objective: f64,
}

/// One registration outcome of a lambda sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub total: f64,
    pub similarity: f64,
    pub reg_weighted: f64,
    pub mean_abs_disp: f64,
    pub metrics: MetricsReport,
}

/// Sweep axis: translation in voxels or rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
}

impl Axis {
    fn params(self, value: f64) -> AffineParams {
        let mut p = AffineParams::identity();
        match self {
            Axis::Tx => p.translation[0] = value,
            Axis::Ty => p.translation[1] = value,
            Axis::Tz => p.translation[2] = value,
            Axis::Rx => p.rotation_deg[0] = value,
            Axis::Ry => p.rotation_deg[1] = value,
            Axis::Rz => p.rotation_deg[2] = value,
        }
        p
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tx" => Ok(Axis::Tx),
            "ty" => Ok(Axis::Ty),
            "tz" => Ok(Axis::Tz),
            "rx" => Ok(Axis::Rx),
            "ry" => Ok(Axis::Ry),
            "rz" => Ok(Axis::Rz),
            other => Err(format!("unknown axis {other:?} (expected tx, ty, tz, rx, ry or rz)")),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Axis::Tx => "tx",
            Axis::Ty => "ty",
            Axis::Tz => "tz",
            Axis::Rx => "rx",
            Axis::Ry => "ry",
            Axis::Rz => "rz",
        };
        write!(f, "{s}")
    }
}

/// Similarity loss between a fixed image and an already-warped image,
/// with gradients; MI is negated so both measures are minimized.
pub(crate) fn similarity_loss(
    fixed: &Volume,
    warped: &Volume,
    cfg_fixed: &ParzenConfig,
    cfg_warped: &ParzenConfig,
    measure: Measure,
    want_grads: bool,
) -> Result<SimilarityEval> {
    match measure {
        Measure::Cr => cr_loss_impl(fixed, warped, cfg_fixed, cfg_warped, want_grads),
        Measure::Mi => {
            let mut eval = mutual_information_impl(fixed, warped, cfg_fixed, cfg_warped, want_grads)?;
            eval.value = -eval.value;
            for g in &mut eval.grad_first {
                *g = -*g;
            }
            for g in &mut eval.grad_second {
                *g = -*g;
            }
            Ok(eval)
        }
    }
}

/// Objective of a candidate field: similarity(fixed, moving warped by the
/// field) + lambda * diffusion, with the gradient chained onto the
/// displacement components.
pub fn total_loss_with_configs(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg_fixed: &ParzenConfig,
    cfg_moving: &ParzenConfig,
    measure: Measure,
    lambda: f64,
) -> Result<(LossTerms, Vec<[f64; 3]>)> {
    fixed.dims().check_matches(field.dims())?;
    let we = warp(moving, field);
    let sim = similarity_loss(fixed, &we.warped, cfg_fixed, cfg_moving, measure, true)?;
    let (reg_value, reg_grad) = diffusion_reg(field);
    let mut grad = chain_to_field(&sim.grad_second, &we)?;
    for (g, r) in grad.iter_mut().zip(&reg_grad) {
        for c in 0..3 {
            g[c] += lambda * r[c];
        }
    }
    let terms = LossTerms {
        total: sim.value + lambda * reg_value,
        similarity: sim.value,
        reg_weighted: lambda * reg_value,
    };
    Ok((terms, grad))
}

/// As `total_loss_with_configs`, with Parzen configs derived from the
/// two images' intensity ranges.
pub fn total_loss(
    fixed: &Volume,
    moving: &Volume,
    field: &DisplacementField,
    cfg: &RegistrationConfig,
) -> Result<(LossTerms, Vec<[f64; 3]>)> {
    cfg.validate()?;
    let cfg_fixed = default_config(fixed, cfg.bins, cfg.bandwidth_scale)?;
    let cfg_moving = default_config(moving, cfg.bins, cfg.bandwidth_scale)?;
    total_loss_with_configs(fixed, moving, field, &cfg_fixed, &cfg_moving, cfg.measure, cfg.lambda)
}

/// Box-average downsampling by 2 per axis (partial boxes at odd faces).
fn downsample(v: &Volume) -> Volume {
    let dims = v.dims();
    let out_dims = Dims::new(dims.nx.div_ceil(2), dims.ny.div_ceil(2), dims.nz.div_ceil(2));
    let mut data = vec![0.0; out_dims.len()];
    for k in 0..out_dims.nz {
        for j in 0..out_dims.ny {
            for i in 0..out_dims.nx {
                let mut acc = 0.0;
                let mut count = 0.0;
                for dk in 0..2 {
                    for dj in 0..2 {
                        for di in 0..2 {
                            let (si, sj, sk) = (2 * i + di, 2 * j + dj, 2 * k + dk);
                            if si < dims.nx && sj < dims.ny && sk < dims.nz {
                                acc += v.get(si, sj, sk);
                                count += 1.0;
                            }
                        }
                    }
                }
                data[out_dims.idx(i, j, k)] = acc / count;
            }
        }
    }
    let s = v.spacing();
    Volume::with_spacing(out_dims, [s[0] * 2.0, s[1] * 2.0, s[2] * 2.0], data)
        .expect("downsampled volume stays valid")
}

/// Trilinear upsampling of a coarse field onto a finer grid; vector
/// magnitudes double along with the grid resolution.
fn upsample_field(coarse: &DisplacementField, fine_dims: Dims) -> DisplacementField {
    let mut vectors = Vec::with_capacity(fine_dims.len());
    for k in 0..fine_dims.nz {
        for j in 0..fine_dims.ny {
            for i in 0..fine_dims.nx {
                let s = sample_field(coarse, i as f64 / 2.0, j as f64 / 2.0, k as f64 / 2.0);
                vectors.push([2.0 * s[0], 2.0 * s[1], 2.0 * s[2]]);
            }
        }
    }
    DisplacementField::new(fine_dims, vectors).expect("upsampled field stays finite")
}

struct AdamState {
    m: Vec<[f64; 3]>,
    v: Vec<[f64; 3]>,
    t: u64,
    beta1: f64,
    beta2: f64,
}

impl AdamState {
    fn new(n: usize, betas: (f64, f64)) -> Self {
        AdamState {
            m: vec![[0.0; 3]; n],
            v: vec![[0.0; 3]; n],
            t: 0,
            beta1: betas.0,
            beta2: betas.1,
        }
    }

    fn step(&mut self, field: &mut DisplacementField, grad: &[[f64; 3]], step_size: f64) {
        const ADAM_EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((u, g), (m, v)) in field
            .vectors_mut()
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for c in 0..3 {
                m[c] = self.beta1 * m[c] + (1.0 - self.beta1) * g[c];
                v[c] = self.beta2 * v[c] + (1.0 - self.beta2) * g[c] * g[c];
                let m_hat = m[c] / bc1;
                let v_hat = v[c] / bc2;
                u[c] -= step_size * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Step schedule within one pyramid level: linear warmup over the first
/// iterations, cosine decay to zero afterwards. The warmup keeps the
/// freshly reset moment estimates from driving full-size steps on a
/// field inherited from the coarser level.
fn scheduled_step(base: f64, iter: usize, iters: usize) -> f64 {
    if iters <= 1 {
        return base;
    }
    let warmup = (iters / 10).max(10).min(iters / 2).max(1);
    if iter < warmup {
        return base * (iter + 1) as f64 / warmup as f64;
    }
    let phase = (iter - warmup) as f64 / (iters - 1 - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// Register `moving` onto `fixed` by coarse-to-fine Adam updates of a
/// dense displacement field. Deterministic: identical inputs produce a
/// bitwise-identical report.
pub fn register(fixed: &Volume, moving: &Volume, cfg: &RegistrationConfig) -> Result<RegistrationReport> {
    cfg.validate()?;
    fixed.dims().check_matches(moving.dims())?;
    let start = std::time::Instant::now();

    // pyramid, finest first
    let mut fixed_pyramid = vec![fixed.clone()];
    let mut moving_pyramid = vec![moving.clone()];
    for level in 1..cfg.levels {
        let prev = fixed_pyramid[level - 1].dims();
        if prev.nx.div_ceil(2) < 2 || prev.ny.div_ceil(2) < 2 || prev.nz.div_ceil(2) < 2 {
            return Err(Error::InvalidConfig(format!(
                "pyramid level {level} would shrink {} below 2 voxels per axis",
                fixed.dims()
            )));
        }
        fixed_pyramid.push(downsample(&fixed_pyramid[level - 1]));
        moving_pyramid.push(downsample(&moving_pyramid[level - 1]));
    }

    let mut history = Vec::with_capacity(cfg.levels * cfg.iters_per_level);
    let mut field: Option<DisplacementField> = None;
    for level in (0..cfg.levels).rev() {
        let f_l = &fixed_pyramid[level];
        let m_l = &moving_pyramid[level];
        let dims = f_l.dims();
        let mut u = match field.take() {
            None => DisplacementField::zeros(dims)?,
            Some(coarse) => upsample_field(&coarse, dims),
        };
        let cfg_fixed = default_config(f_l, cfg.bins, cfg.bandwidth_scale)?;
        let cfg_moving = default_config(m_l, cfg.bins, cfg.bandwidth_scale)?;
        let mut adam = AdamState::new(dims.len(), cfg.adam_betas);
        for iter in 0..cfg.iters_per_level {
            let (terms, grad) = total_loss_with_configs(
                f_l,
                m_l,
                &u,
                &cfg_fixed,
                &cfg_moving,
                cfg.measure,
                cfg.lambda,
            )?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    level,
                    iteration: iter,
                });
            }
            history.push(terms);
            let step = scheduled_step(cfg.step_size, iter, cfg.iters_per_level);
            adam.step(&mut u, &grad, step);
        }
        field = Some(u);
    }
    let final_field = field.expect("at least one pyramid level ran");

    let cfg_fixed = default_config(fixed, cfg.bins, cfg.bandwidth_scale)?;
    let cfg_moving = default_config(moving, cfg.bins, cfg.bandwidth_scale)?;
    let (final_loss, _) = total_loss_with_configs(
        fixed,
        moving,
        &final_field,
        &cfg_fixed,
        &cfg_moving,
        cfg.measure,
        cfg.lambda,
    )?;
    let metrics = metrics::report(&final_field, None)?;
    Ok(RegistrationReport {
        final_field,
        loss_history: history,
        final_loss,
        metrics,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Evaluate the similarity loss along one affine axis: `steps` samples
/// spaced evenly over [-range, range]. The regularizer is excluded.
pub fn landscape(
    fixed: &Volume,
    moving: &Volume,
    cfg: &RegistrationConfig,
    axis: Axis,
    range: f64,
    steps: usize,
) -> Result<Vec<LandscapeRow>> {
    cfg.validate()?;
    fixed.dims().check_matches(moving.dims())?;
    if steps < 3 {
        return Err(Error::InvalidConfig("steps must be at least 3".into()));
    }
    if !(range > 0.0) {
        return Err(Error::InvalidConfig("range must be positive".into()));
    }
    let cfg_fixed = default_config(fixed, cfg.bins, cfg.bandwidth_scale)?;
    let cfg_moving = default_config(moving, cfg.bins, cfg.bandwidth_scale)?;
    let mut rows = Vec::with_capacity(steps);
    for s in 0..steps {
        let param = -range + 2.0 * range * s as f64 / (steps - 1) as f64;
        let field = affine_field(&axis.params(param), fixed.dims());
        let we = warp(moving, &field);
        let sim = similarity_loss(fixed, &we.warped, &cfg_fixed, &cfg_moving, cfg.measure, false)?;
        rows.push(LandscapeRow {
            param,
            objective: sim.value,
        });
    }
    Ok(rows)
}

/// Run one registration per lambda (sorted ascending) and attach label
/// overlap metrics to each outcome.
pub fn lambda_sweep(
    fixed: &Volume,
    moving: &Volume,
    labels_fixed: &LabelVolume,
    labels_moving: &LabelVolume,
    cfg: &RegistrationConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("lambda grid must be nonempty".into()));
    }
    if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(Error::InvalidConfig("lambdas must be nonnegative and finite".into()));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite lambdas"));
    let mut rows = Vec::with_capacity(sorted.len());
    for lambda in sorted {
        let mut run_cfg = cfg.clone();
        run_cfg.lambda = lambda;
        let report = register(fixed, moving, &run_cfg)?;
        let metrics = metrics::report(&report.final_field, Some((labels_fixed, labels_moving)))?;
        rows.push(SweepRow {
            lambda,
            total: report.final_loss.total,
            similarity: report.final_loss.similarity,
            reg_weighted: report.final_loss.reg_weighted,
            mean_abs_disp: report.final_field.mean_magnitude(),
            metrics,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SplitMix64;

    #[test]
    fn default_lambda_grids() {
        assert_eq!(DEFAULT_LAMBDAS_CR, [4.2, 7.7]);
        assert_eq!(DEFAULT_LAMBDAS_MI, [1.7, 4.5]);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = RegistrationConfig::default();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        cfg = RegistrationConfig::default();
        cfg.levels = 0;
        assert!(cfg.validate().is_err());
        cfg = RegistrationConfig::default();
        cfg.step_size = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn downsample_averages_boxes() {
        let dims = Dims::new(4, 4, 4);
        let mut v = Volume::zeros(dims).unwrap();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    v.set(i, j, k, i as f64);
                }
            }
        }
        let d = downsample(&v);
        assert_eq!(d.dims(), Dims::new(2, 2, 2));
        assert!((d.get(0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((d.get(1, 0, 0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn upsample_doubles_constant_fields() {
        let coarse_dims = Dims::new(3, 3, 3);
        let coarse =
            DisplacementField::new(coarse_dims, vec![[1.0, -0.5, 0.25]; coarse_dims.len()]).unwrap();
        let fine = upsample_field(&coarse, Dims::new(6, 6, 6));
        for u in fine.vectors() {
            assert!((u[0] - 2.0).abs() < 1e-12);
            assert!((u[1] + 1.0).abs() < 1e-12);
            assert!((u[2] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_zero_field_has_no_reg_term() {
        let dims = Dims::new(8, 8, 8);
        let mut rng = SplitMix64::new(3);
        let v = Volume::new(dims, (0..dims.len()).map(|_| rng.next_f64()).collect()).unwrap();
        let field = DisplacementField::zeros(dims).unwrap();
        let mut cfg = RegistrationConfig::default();
        cfg.lambda = 10.0;
        let (with_reg, _) = total_loss(&v, &v, &field, &cfg).unwrap();
        cfg.lambda = 0.0;
        let (without, _) = total_loss(&v, &v, &field, &cfg).unwrap();
        assert_eq!(with_reg.reg_weighted, 0.0);
        assert_eq!(with_reg.total, without.total);
    }

    #[test]
    fn scheduled_step_warms_up_then_decays_to_zero() {
        assert!(scheduled_step(1.0, 0, 100) <= 0.1 + 1e-12);
        assert_eq!(scheduled_step(1.0, 9, 100), 1.0);
        assert!(scheduled_step(1.0, 99, 100) < 1e-15);
        assert!(scheduled_step(1.0, 50, 100) < 1.0);
        assert_eq!(scheduled_step(0.5, 0, 1), 0.5);
    }
}
