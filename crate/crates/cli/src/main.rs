//! Command-line front end: phantom synthesis, registration, landscape
//! and lambda sweeps, metrics, and similarity timing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use correg::driver::{
    landscape, lambda_sweep, register, Axis, RegistrationConfig, DEFAULT_LAMBDAS_CR,
    DEFAULT_LAMBDAS_MI,
};
use correg::grid::{io, make_phantom, Dims, PhantomSpec, Remap};
use correg::metrics;
use correg::parzen::default_config;
use correg::similarity::{eval_timed, Measure};

#[derive(Parser)]
#[command(name = "correg", version, about = "Multi-modal deformable registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cr,
    Mi,
}

impl From<MetricArg> for Measure {
    fn from(m: MetricArg) -> Measure {
        match m {
            MetricArg::Cr => Measure::Cr,
            MetricArg::Mi => Measure::Mi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RemapArg {
    Quadratic,
    Inverted,
    Sinus,
}

impl From<RemapArg> for Remap {
    fn from(r: RemapArg) -> Remap {
        match r {
            RemapArg::Quadratic => Remap::Quadratic,
            RemapArg::Inverted => Remap::Inverted,
            RemapArg::Sinus => Remap::Sinus,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Tx,
    Ty,
    Tz,
    Rx,
    Ry,
    Rz,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Axis {
        match a {
            AxisArg::Tx => Axis::Tx,
            AxisArg::Ty => Axis::Ty,
            AxisArg::Tz => Axis::Tz,
            AxisArg::Rx => Axis::Rx,
            AxisArg::Ry => Axis::Ry,
            AxisArg::Rz => Axis::Rz,
        }
    }
}

/// Shared registration knobs.
#[derive(Args)]
struct RegArgs {
    #[arg(long, value_enum, default_value = "cr")]
    metric: MetricArg,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    #[arg(long, default_value_t = 1.0)]
    bandwidth_scale: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RegArgs {
    fn config(&self, lambda: f64) -> RegistrationConfig {
        RegistrationConfig {
            measure: self.metric.into(),
            lambda,
            levels: self.levels,
            iters_per_level: self.iters,
            step_size: self.step,
            bins: self.bins,
            bandwidth_scale: self.bandwidth_scale,
            seed: self.seed,
            ..RegistrationConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal pair with ground truth.
    Synth {
        /// Grid size: one value (cubic) or three comma-separated.
        #[arg(long, default_value = "48")]
        dims: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// RMS displacement magnitude of the ground-truth field, voxels.
        #[arg(long, default_value_t = 3.0)]
        amplitude: f64,
        /// Gaussian smoothing sigma of the ground-truth field, voxels.
        #[arg(long, default_value_t = 6.0)]
        sigma: f64,
        #[arg(long, value_enum, default_value = "quadratic")]
        remap: RemapArg,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Register a moving volume onto a fixed volume.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long, default_value_t = 4.2)]
        lambda: f64,
        #[command(flatten)]
        reg: RegArgs,
        #[arg(long)]
        out_field: PathBuf,
        #[arg(long)]
        out_report: Option<PathBuf>,
    },
    /// Sweep the similarity objective along one affine axis.
    Landscape {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Half-width of the symmetric sweep (voxels or degrees).
        #[arg(long, default_value_t = 10.0)]
        range: f64,
        #[arg(long, default_value_t = 21)]
        steps: usize,
        #[command(flatten)]
        reg: RegArgs,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Register once per lambda and tabulate the trade-off.
    Sweep {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        labels_fixed: PathBuf,
        #[arg(long)]
        labels_moving: PathBuf,
        /// Comma-separated lambda grid; defaults to the per-metric grid.
        #[arg(long)]
        lambdas: Option<String>,
        #[command(flatten)]
        reg: RegArgs,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Score a displacement field against a label pair.
    Metrics {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        labels_fixed: PathBuf,
        #[arg(long)]
        labels_moving: PathBuf,
        #[arg(long)]
        out_json: PathBuf,
    },
    /// Time a similarity measure on a volume pair.
    Time {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long, value_enum, default_value = "cr")]
        metric: MetricArg,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
    },
}

fn parse_dims(text: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = text.split(',').collect();
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad dimension {t:?}"));
    match parts.as_slice() {
        [one] => {
            let n = parse(one)?;
            Ok(Dims::new(n, n, n))
        }
        [x, y, z] => Ok(Dims::new(parse(x)?, parse(y)?, parse(z)?)),
        _ => Err(format!("expected N or NX,NY,NZ, got {text:?}")),
    }
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad lambda {t:?}")))
        .collect()
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Synth {
            dims,
            seed,
            amplitude,
            sigma,
            remap,
            out_dir,
        } => {
            let spec = PhantomSpec {
                dims: parse_dims(&dims)?,
                seed,
                deformation_amplitude: amplitude,
                deformation_smoothness: sigma,
                remap: remap.into(),
            };
            let phantom = make_phantom(&spec).map_err(|e| e.to_string())?;
            fs::create_dir_all(&out_dir).map_err(|e| format!("creating {}: {e}", out_dir.display()))?;
            io::save_volume(&phantom.fixed, out_dir.join("fixed.mhd")).map_err(|e| e.to_string())?;
            io::save_volume(&phantom.moving, out_dir.join("moving.mhd")).map_err(|e| e.to_string())?;
            io::save_field(&phantom.truth, out_dir.join("truth.mhd")).map_err(|e| e.to_string())?;
            io::save_labels(&phantom.labels_fixed, out_dir.join("labels_fixed.mhd"))
                .map_err(|e| e.to_string())?;
            io::save_labels(&phantom.labels_moving, out_dir.join("labels_moving.mhd"))
                .map_err(|e| e.to_string())?;
            println!("wrote phantom ({}) to {}", phantom.fixed.dims(), out_dir.display());
            Ok(())
        }
        Command::Register {
            fixed,
            moving,
            lambda,
            reg,
            out_field,
            out_report,
        } => {
            let fixed = io::load_volume(&fixed).map_err(|e| e.to_string())?;
            let moving = io::load_volume(&moving).map_err(|e| e.to_string())?;
            let cfg = reg.config(lambda);
            let report = register(&fixed, &moving, &cfg).map_err(|e| e.to_string())?;
            io::save_field(&report.final_field, &out_field).map_err(|e| e.to_string())?;
            if let Some(path) = out_report {
                write_json(&report, &path)?;
            }
            println!(
                "registered in {:.2}s: total {:.6} similarity {:.6} reg {:.6}",
                report.wall_seconds,
                report.final_loss.total,
                report.final_loss.similarity,
                report.final_loss.reg_weighted
            );
            Ok(())
        }
        Command::Landscape {
            fixed,
            moving,
            axis,
            range,
            steps,
            reg,
            out_csv,
        } => {
            let fixed = io::load_volume(&fixed).map_err(|e| e.to_string())?;
            let moving = io::load_volume(&moving).map_err(|e| e.to_string())?;
            let cfg = reg.config(0.0);
            let axis: Axis = axis.into();
            let rows = landscape(&fixed, &moving, &cfg, axis, range, steps).map_err(|e| e.to_string())?;
            let mut out = String::from("axis,param,objective\n");
            for row in &rows {
                out.push_str(&format!("{axis},{},{}\n", row.param, row.objective));
            }
            fs::write(&out_csv, out).map_err(|e| format!("writing {}: {e}", out_csv.display()))?;
            println!("wrote {} rows to {}", rows.len(), out_csv.display());
            Ok(())
        }
        Command::Sweep {
            fixed,
            moving,
            labels_fixed,
            labels_moving,
            lambdas,
            reg,
            out_csv,
        } => {
            let fixed = io::load_volume(&fixed).map_err(|e| e.to_string())?;
            let moving = io::load_volume(&moving).map_err(|e| e.to_string())?;
            let lf = io::load_labels(&labels_fixed).map_err(|e| e.to_string())?;
            let lm = io::load_labels(&labels_moving).map_err(|e| e.to_string())?;
            let grid = match &lambdas {
                Some(text) => parse_lambdas(text)?,
                None => match reg.metric {
                    MetricArg::Cr => DEFAULT_LAMBDAS_CR.to_vec(),
                    MetricArg::Mi => DEFAULT_LAMBDAS_MI.to_vec(),
                },
            };
            let cfg = reg.config(0.0);
            let rows = lambda_sweep(&fixed, &moving, &lf, &lm, &cfg, &grid).map_err(|e| e.to_string())?;
            let mut out = String::from(
                "lambda,total,similarity,reg_weighted,mean_abs_disp,dice_mean,pct_neg_jacobian,pct_ndv,field_grad_energy\n",
            );
            for row in &rows {
                let dice = row
                    .metrics
                    .dice_mean
                    .map(|d| d.to_string())
                    .unwrap_or_else(|| "nan".to_string());
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    row.lambda,
                    row.total,
                    row.similarity,
                    row.reg_weighted,
                    row.mean_abs_disp,
                    dice,
                    row.metrics.pct_neg_jacobian,
                    row.metrics.pct_ndv,
                    row.metrics.field_grad_energy
                ));
            }
            fs::write(&out_csv, out).map_err(|e| format!("writing {}: {e}", out_csv.display()))?;
            println!("wrote {} rows to {}", rows.len(), out_csv.display());
            Ok(())
        }
        Command::Metrics {
            field,
            labels_fixed,
            labels_moving,
            out_json,
        } => {
            let field = io::load_field(&field).map_err(|e| e.to_string())?;
            let lf = io::load_labels(&labels_fixed).map_err(|e| e.to_string())?;
            let lm = io::load_labels(&labels_moving).map_err(|e| e.to_string())?;
            let report = metrics::report(&field, Some((&lf, &lm))).map_err(|e| e.to_string())?;
            write_json(&report, &out_json)?;
            println!("wrote metrics to {}", out_json.display());
            Ok(())
        }
        Command::Time {
            fixed,
            moving,
            metric,
            bins,
            repeats,
        } => {
            let fixed = io::load_volume(&fixed).map_err(|e| e.to_string())?;
            let moving = io::load_volume(&moving).map_err(|e| e.to_string())?;
            let cfg_f = default_config(&fixed, bins, 1.0).map_err(|e| e.to_string())?;
            let cfg_m = default_config(&moving, bins, 1.0).map_err(|e| e.to_string())?;
            let measure: Measure = metric.into();
            let (eval, secs) =
                eval_timed(measure, &fixed, &moving, &cfg_f, &cfg_m, repeats).map_err(|e| e.to_string())?;
            println!("metric={measure} value={} mean_seconds={secs}", eval.value);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            let mut stderr = std::io::stderr().lock();
            let _ = writeln!(stderr, "error: {message}");
            ExitCode::FAILURE
        }
    }
}
