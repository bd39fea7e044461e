//! Sequential odometry on a straight run with both estimators and every
//! flow kind, reporting drift as a percentage of distance travelled.
//!
//! cargo run --release --example odometry -- [frames]

use lcmflow::experiment::{calibration_step, collect_training, default_knot_count, SceneConfig};
use lcmflow::likelihood::{default_knots, fit_lut, FitOptions};
use lcmflow::pipeline::{run_odometry, EstimatorKind, FlowKind, OdometryOptions};
use lcmflow::synth::{build_dataset, Dataset, TrajectoryKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let frames: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(40);
    let tmp = tempfile::tempdir()?;
    let scene = SceneConfig::default();

    // Calibration and evaluation use different scene seeds.
    let calib_dir = tmp.path().join("calib");
    build_dataset(
        &scene.dataset(TrajectoryKind::Straight, 8, 100)?,
        &calib_dir,
    )?;
    let calib = Dataset::open(&calib_dir)?;
    let eval_dir = tmp.path().join("eval");
    build_dataset(
        &scene.dataset(TrajectoryKind::Straight, frames, 1)?,
        &eval_dir,
    )?;
    let eval = Dataset::open(&eval_dir)?;

    for flow in [FlowKind::Gt, FlowKind::Dense, FlowKind::Sparse] {
        let lut_flow = if flow == FlowKind::Gt {
            FlowKind::Dense
        } else {
            flow
        };
        let data = collect_training(
            std::slice::from_ref(&calib),
            lut_flow,
            calibration_step(lut_flow),
        )?;
        let knots = default_knots(&data, default_knot_count(lut_flow) / 2)?;
        let lut = fit_lut(&data, &knots, &FitOptions::default())?.lut;
        for estimator in [EstimatorKind::Ransac, EstimatorKind::Lcmsac] {
            let opts = OdometryOptions {
                estimator,
                flow,
                seed: 0,
                dense_step: 4,
                max_iters: 200,
            };
            let (_, m) = run_odometry(&eval, Some(&lut), &opts)?;
            println!(
                "{flow:?} {estimator:?}: drift {:.3}% over {} frames, mean inliers {:.2}, failures {}",
                m.drift_pct, m.frames, m.mean_inlier_ratio, m.failures
            );
        }
    }
    Ok(())
}
