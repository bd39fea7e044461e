//! Command line front end: dataset synthesis, calibration, fit evaluation,
//! ego-motion runs and drift reports.
//!
//! Every command writes `run.json` next to its outputs with the parsed
//! configuration, the seed and SHA-256 hashes of the files it produced.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::egomotion::write_trajectory;
use crate::error::{Error, Result};
use crate::experiment::{
    build_sweep, calibration_step, collect_training, default_knot_count, find_datasets,
    SceneConfig, SweepConfig,
};
use crate::likelihood::{
    bin_reports, default_knots, fit_lut, FitOptions, ParamLut, MIN_BIN_SAMPLES,
};
use crate::pipeline::{run_odometry, EstimatorKind, FlowKind, Metrics, OdometryOptions};
use crate::synth::{build_dataset, Dataset, TrajectoryKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "lcmflow",
    version,
    about = "LCM flow likelihoods and LCMSAC odometry on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset, or the calibration contrast sweep.
    Synth(SynthArgs),
    /// Fit a parameter LUT to the flow errors of one or more datasets.
    Calibrate(CalibrateArgs),
    /// Per-bin K-S statistics of the LCM, Gaussian and log-logistic fits.
    Evalfit(EvalfitArgs),
    /// Sequential ego-motion over a dataset with RANSAC or LCMSAC.
    Egomotion(EgomotionArgs),
    /// Tabulate drift from metrics files.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SceneArgs {
    #[arg(long, default_value_t = SceneConfig::default().width)]
    pub width: usize,
    #[arg(long, default_value_t = SceneConfig::default().height)]
    pub height: usize,
    /// Horizontal field of view, degrees.
    #[arg(long, default_value_t = SceneConfig::default().fov_deg)]
    pub fov: f64,
    /// Texture contrast, intensity units.
    #[arg(long, default_value_t = SceneConfig::default().contrast)]
    pub contrast: f64,
    /// Sensor noise standard deviation, intensity units.
    #[arg(long, default_value_t = SceneConfig::default().sensor_noise)]
    pub noise: f64,
    /// Camera travel per frame, meters.
    #[arg(long, default_value_t = SceneConfig::default().speed)]
    pub speed: f64,
    #[arg(long, default_value_t = SceneConfig::default().lk.window)]
    pub lk_window: usize,
    #[arg(long, default_value_t = SceneConfig::default().sparse_points)]
    pub sparse_points: usize,
}

impl SceneArgs {
    pub fn config(&self) -> SceneConfig {
        let base = SceneConfig::default();
        SceneConfig {
            width: self.width,
            height: self.height,
            fov_deg: self.fov,
            contrast: self.contrast,
            sensor_noise: self.noise,
            speed: self.speed,
            lk: crate::flow::LkParams {
                window: self.lk_window,
                ..base.lk
            },
            sparse_points: self.sparse_points,
            ..base
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, required_unless_present = "sweep")]
    pub traj: Option<TrajectoryKind>,
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Build the calibration sweep into numbered subdirectories instead.
    #[arg(long, conflicts_with = "traj")]
    pub sweep: bool,
    /// Frames per figure-eight lap the sweep is calibrated for.
    #[arg(long, default_value_t = SweepConfig::default().fig8_lap_frames)]
    pub lap_frames: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    /// Dataset directory, or a directory of datasets; repeatable.
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = FlowKind::Dense)]
    pub flow: FlowKind,
    /// Number of LUT knots; defaults to 8 for dense and 6 for sparse flow.
    #[arg(long)]
    pub knots: Option<usize>,
    /// Grid step thinning dense flow; defaults to 3.
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `lut.json` and `bins.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalfitArgs {
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long, value_enum, default_value_t = FlowKind::Dense)]
    pub flow: FlowKind,
    #[arg(long)]
    pub step: Option<usize>,
    /// Bins with fewer samples are reported with NaN statistics.
    #[arg(long, default_value_t = MIN_BIN_SAMPLES)]
    pub min_samples: usize,
    /// Output directory for `evalfit.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EgomotionArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Calibrated LUT; required for LCMSAC.
    #[arg(long)]
    pub lut: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub estimator: EstimatorKind,
    #[arg(long, value_enum, default_value_t = FlowKind::Dense)]
    pub flow: FlowKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid step thinning dense and ground-truth flow.
    #[arg(long, default_value_t = 4)]
    pub dense_step: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Output directory for `trajectory.csv` and `metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Metrics files written by `egomotion`.
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
    /// Output directory for `report.csv` and `report.txt`; the table is
    /// always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    seed: Option<u64>,
    artifacts: BTreeMap<String, String>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Evalfit(a) => cmd_evalfit(a),
        Command::Egomotion(a) => cmd_egomotion(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash over the names and contents of every file in a dataset directory.
fn sha256_dataset(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != "run.json"))
        .collect();
    names.sort();
    let mut hasher = Sha256::new();
    for p in &names {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        hasher.update(p.file_name().unwrap_or_default().as_encoded_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_text(path, &(text + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    seed: Option<u64>,
    artifacts: BTreeMap<String, String>,
) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            command,
            config,
            seed,
            artifacts,
        },
    )
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn open_all(roots: &[PathBuf]) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for root in roots {
        for dir in find_datasets(root)? {
            out.push(Dataset::open(&dir)?);
        }
    }
    Ok(out)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let scene = a.scene.config();
    let mut artifacts = BTreeMap::new();
    if a.sweep {
        let sweep = SweepConfig {
            fig8_lap_frames: a.lap_frames,
            seed: a.seed,
            ..SweepConfig::default()
        };
        for dir in build_sweep(&scene, &sweep, &a.out)? {
            let name = dir
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            artifacts.insert(name, sha256_dataset(&dir)?);
        }
    } else {
        let kind = a
            .traj
            .ok_or_else(|| Error::Domain("missing --traj".into()))?;
        let spec = scene.dataset(kind, a.frames, a.seed)?;
        build_dataset(&spec, &a.out)?;
        artifacts.insert(
            "manifest.json".into(),
            sha256_file(&a.out.join("manifest.json"))?,
        );
        artifacts.insert("dataset".into(), sha256_dataset(&a.out)?);
    }
    write_run(&a.out, "synth", a, Some(a.seed), artifacts)
}

pub fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let datasets = open_all(&a.datasets)?;
    let step = a.step.unwrap_or(calibration_step(a.flow));
    let data = collect_training(&datasets, a.flow, step)?;
    if data.is_empty() {
        return Err(Error::domain("no valid calibration samples"));
    }
    let knots = default_knots(&data, a.knots.unwrap_or(default_knot_count(a.flow)))?;
    let fit = fit_lut(
        &data,
        &knots,
        &FitOptions {
            restarts: a.restarts,
            seed: a.seed,
            ..FitOptions::default()
        },
    )?;
    create_dir(&a.out)?;
    let lut_path = a.out.join("lut.json");
    fit.lut.save(&lut_path)?;

    let bins_path = a.out.join("bins.csv");
    let mut w = csv::Writer::from_path(&bins_path).map_err(|e| csv_err(&bins_path, e))?;
    w.write_record([
        "bin_lo",
        "bin_hi",
        "knot",
        "n",
        "median_abs",
        "beta",
        "gamma",
        "w_l",
        "ks_lcm",
        "ks_gauss",
        "ks_loglogistic",
    ])
    .map_err(|e| csv_err(&bins_path, e))?;
    for r in bin_reports(&fit.lut, &data, MIN_BIN_SAMPLES) {
        w.write_record(
            [
                r.lo,
                r.hi,
                r.knot,
                r.n as f64,
                r.median_abs,
                r.entry.beta,
                r.entry.gamma,
                r.entry.w_l,
                r.ks_lcm,
                r.ks_gauss,
                r.ks_loglogistic,
            ]
            .map(|v| v.to_string()),
        )
        .map_err(|e| csv_err(&bins_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&bins_path, e))?;
    drop(w);

    let mut artifacts = BTreeMap::new();
    artifacts.insert("lut.json".into(), sha256_file(&lut_path)?);
    artifacts.insert("bins.csv".into(), sha256_file(&bins_path)?);
    write_run(&a.out, "calibrate", a, Some(a.seed), artifacts)
}

pub fn cmd_evalfit(a: &EvalfitArgs) -> Result<()> {
    let lut = ParamLut::load(&a.lut)?;
    let datasets = open_all(&a.datasets)?;
    let data = collect_training(
        &datasets,
        a.flow,
        a.step.unwrap_or(calibration_step(a.flow)),
    )?;
    create_dir(&a.out)?;
    let path = a.out.join("evalfit.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "bin_lo",
        "bin_hi",
        "n",
        "ks_lcm",
        "ks_gauss",
        "ks_loglogistic",
    ])
    .map_err(|e| csv_err(&path, e))?;
    for r in bin_reports(&lut, &data, a.min_samples) {
        w.write_record([
            r.lo.to_string(),
            r.hi.to_string(),
            r.n.to_string(),
            r.ks_lcm.to_string(),
            r.ks_gauss.to_string(),
            r.ks_loglogistic.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    drop(w);
    let mut artifacts = BTreeMap::new();
    artifacts.insert("evalfit.csv".into(), sha256_file(&path)?);
    write_run(&a.out, "evalfit", a, None, artifacts)
}

pub fn cmd_egomotion(a: &EgomotionArgs) -> Result<()> {
    let lut = a.lut.as_deref().map(ParamLut::load).transpose()?;
    if a.estimator == EstimatorKind::Lcmsac && lut.is_none() {
        return Err(Error::domain("--lut is required for the lcmsac estimator"));
    }
    let ds = Dataset::open(&a.dataset)?;
    let (poses, metrics) = run_odometry(
        &ds,
        lut.as_ref(),
        &OdometryOptions {
            estimator: a.estimator,
            flow: a.flow,
            seed: a.seed,
            dense_step: a.dense_step,
            max_iters: a.max_iters,
        },
    )?;
    create_dir(&a.out)?;
    let traj_path = a.out.join("trajectory.csv");
    write_trajectory(&traj_path, &poses)?;
    let metrics_path = a.out.join("metrics.json");
    write_json(&metrics_path, &metrics)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("trajectory.csv".into(), sha256_file(&traj_path)?);
    artifacts.insert("metrics.json".into(), sha256_file(&metrics_path)?);
    write_run(&a.out, "egomotion", a, Some(a.seed), artifacts)
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One report row per metrics file; deltas are relative to the first row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub source: String,
    pub estimator: EstimatorKind,
    pub flow: FlowKind,
    pub seed: u64,
    pub frames: usize,
    pub drift_pct: f64,
    pub delta_pct: f64,
    pub reduction_pct: f64,
    pub mean_inlier_ratio: f64,
    pub failures: usize,
}

pub fn report_rows(files: &[(String, Metrics)]) -> Result<Vec<ReportRow>> {
    let base = files
        .first()
        .ok_or_else(|| Error::domain("no metrics to report"))?
        .1
        .drift_pct;
    Ok(files
        .iter()
        .map(|(source, m)| ReportRow {
            source: source.clone(),
            estimator: m.estimator,
            flow: m.flow,
            seed: m.seed,
            frames: m.frames,
            drift_pct: m.drift_pct,
            delta_pct: m.drift_pct - base,
            reduction_pct: if base > 0.0 {
                100.0 * (base - m.drift_pct) / base
            } else {
                f64::NAN
            },
            mean_inlier_ratio: m.mean_inlier_ratio,
            failures: m.failures,
        })
        .collect())
}

const REPORT_HEADER: [&str; 10] = [
    "source",
    "estimator",
    "flow",
    "seed",
    "frames",
    "drift_pct",
    "delta_pct",
    "reduction_pct",
    "inlier_ratio",
    "failures",
];

fn value_name<T: clap::ValueEnum>(v: &T) -> String {
    v.to_possible_value()
        .map(|p| p.get_name().to_string())
        .unwrap_or_default()
}

fn row_cells(r: &ReportRow) -> [String; 10] {
    [
        r.source.clone(),
        value_name(&r.estimator),
        value_name(&r.flow),
        r.seed.to_string(),
        r.frames.to_string(),
        format!("{:.3}", r.drift_pct),
        format!("{:+.3}", r.delta_pct),
        format!("{:.3}", r.reduction_pct),
        format!("{:.3}", r.mean_inlier_ratio),
        r.failures.to_string(),
    ]
}

/// Column-aligned text rendering of a report.
pub fn format_table(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 10]> = rows.iter().map(row_cells).collect();
    let mut widths = REPORT_HEADER.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |items: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = items
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut REPORT_HEADER.iter().copied());
    for row in &cells {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut files = Vec::with_capacity(a.metrics.len());
    for path in &a.metrics {
        let label = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        files.push((label, read_metrics(path)?));
    }
    let rows = report_rows(&files)?;
    let table = format_table(&rows);
    print!("{table}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
        w.write_record(REPORT_HEADER)
            .map_err(|e| csv_err(&csv_path, e))?;
        for r in &rows {
            w.write_record(row_cells(r))
                .map_err(|e| csv_err(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        drop(w);
        let txt_path = dir.join("report.txt");
        write_text(&txt_path, &table)?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("report.csv".into(), sha256_file(&csv_path)?);
        artifacts.insert("report.txt".into(), sha256_file(&txt_path)?);
        write_run(dir, "report", a, None, artifacts)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(est: EstimatorKind, drift: f64) -> Metrics {
        Metrics {
            estimator: est,
            flow: FlowKind::Dense,
            seed: 3,
            frames: 10,
            drift_pct: drift,
            mean_inlier_ratio: 0.9,
            failures: 0,
            per_frame: vec![],
        }
    }

    #[test]
    fn report_deltas_are_relative_to_first_row() {
        let rows = report_rows(&[
            ("a".into(), metrics(EstimatorKind::Ransac, 4.0)),
            ("b".into(), metrics(EstimatorKind::Lcmsac, 1.0)),
        ])
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].delta_pct, 0.0);
        assert_eq!(rows[1].delta_pct, -3.0);
        assert_eq!(rows[1].reduction_pct, 75.0);
        let text = format_table(&rows);
        assert!(text.contains("4.000"));
        assert!(text.contains("-3.000"));
        assert!(text.contains("lcmsac"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(report_rows(&[]).is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(
            run(["lcmflow", "synth", "--traj", "spiral", "--out", "x"]),
            EXIT_USAGE
        );
        assert_eq!(run(["lcmflow", "report"]), EXIT_USAGE);
        assert_eq!(run(["lcmflow", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn numerical_errors_map_to_three() {
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::Domain("x".into())), EXIT_DATA);
    }
}
