//! Calibrates a flow-error LUT on a small contrast sweep and prints the
//! per-bin comparison against Gaussian and log-logistic fits.
//!
//! cargo run --release --example calibrate_lut -- [dense|sparse]

use lcmflow::experiment::{
    build_sweep, calibration_step, collect_training, default_knot_count, SceneConfig, SweepConfig,
};
use lcmflow::likelihood::{bin_reports, default_knots, fit_lut, FitOptions, MIN_BIN_SAMPLES};
use lcmflow::pipeline::FlowKind;
use lcmflow::synth::Dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let flow = match std::env::args().nth(1).as_deref() {
        Some("sparse") => FlowKind::Sparse,
        _ => FlowKind::Dense,
    };
    let dir = tempfile::tempdir()?;
    let sweep = SweepConfig {
        contrasts: vec![10.0, 60.0],
        fig8_segments: 2,
        ..SweepConfig::default()
    };
    let dirs = build_sweep(&SceneConfig::default(), &sweep, dir.path())?;
    let datasets = dirs
        .iter()
        .map(|d| Dataset::open(d))
        .collect::<lcmflow::Result<Vec<_>>>()?;
    let data = collect_training(&datasets, flow, calibration_step(flow))?;
    println!(
        "{} datasets, {} error components",
        datasets.len(),
        data.len()
    );

    let knots = default_knots(&data, default_knot_count(flow) - 2)?;
    let fit = fit_lut(&data, &knots, &FitOptions::default())?;
    println!("mean NLL {:.4} -> {:.4}\n", fit.initial_cost, fit.cost);
    println!(
        "{:>9} {:>9} {:>7} | {:>6} {:>7} {:>5} | {:>7} {:>7} {:>7}",
        "t lo", "t hi", "n", "beta", "gamma", "w_L", "K-S lcm", "gauss", "loglog"
    );
    for b in bin_reports(&fit.lut, &data, MIN_BIN_SAMPLES) {
        println!(
            "{:>9.2} {:>9.2} {:>7} | {:>6.3} {:>7.4} {:>5.2} | {:>7.4} {:>7.4} {:>7.4}",
            b.lo,
            b.hi,
            b.n,
            b.entry.beta,
            b.entry.gamma,
            b.entry.w_l,
            b.ks_lcm,
            b.ks_gauss,
            b.ks_loglogistic
        );
    }
    Ok(())
}
