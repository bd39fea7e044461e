//! One frame pair with dense flow: RANSAC and LCMSAC poses against the
//! truth, using a LUT calibrated on the pair itself.
//!
//! cargo run --release --example egomotion_pair

use lcmflow::egomotion::{lcmsac_egomotion, ransac_egomotion, EgoProblem, SacConfig};
use lcmflow::experiment::SceneConfig;
use lcmflow::geometry::Pose;
use lcmflow::likelihood::{default_knots, fit_lut, FitOptions};
use lcmflow::pipeline::{load_flow, training_set, FlowKind};
use lcmflow::synth::{build_dataset, Dataset, TrajectoryKind};

fn report(name: &str, est: &Pose, truth: &Pose, inliers: f64) {
    let dp = (est.position - truth.position).norm();
    let da = est.rotation().angle_to(&truth.rotation());
    println!(
        "{name:>7}: position error {:.2} mm, rotation error {:.4} deg, inliers {:.2}",
        dp * 1e3,
        da.to_degrees(),
        inliers
    );
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let spec = SceneConfig::default().dataset(TrajectoryKind::Straight, 6, 11)?;
    build_dataset(&spec, dir.path())?;
    let ds = Dataset::open(dir.path())?;

    // Calibrate on all pairs, then estimate the last one.
    let data = training_set(&ds, FlowKind::Dense, 2)?;
    let lut = fit_lut(&data, &default_knots(&data, 4)?, &FitOptions::default())?.lut;

    let k = ds.pairs() - 1;
    let poses = &ds.manifest.poses;
    let flow = load_flow(&ds, k, FlowKind::Dense, 4)?;
    let problem = EgoProblem::new(
        poses[k],
        &flow,
        &ds.structure(k)?,
        &ds.depth(k)?,
        &ds.camera(),
    )?;
    println!("pair {k}: {} flow vectors", problem.len());

    let r = ransac_egomotion(&problem, &poses[k], &SacConfig::ransac(0))?;
    report("RANSAC", &r.pose, &poses[k + 1], r.inlier_ratio());
    let l = lcmsac_egomotion(&problem, &lut, &poses[k], &SacConfig::lcmsac(0, true))?;
    report("LCMSAC", &l.pose, &poses[k + 1], l.inlier_ratio());
    Ok(())
}
