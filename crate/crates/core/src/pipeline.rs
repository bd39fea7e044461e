//! Dataset-level workflows: calibration samples and sequential odometry.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::egomotion::{drift_rate, lcmsac_egomotion, ransac_egomotion, EgoProblem, SacConfig};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{ground_truth_flow, Pose};
use crate::imaging::to_eigenbasis;
use crate::likelihood::{ParamLut, TrainingSet};
use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Dense,
    Sparse,
    /// Ground-truth flow, bypassing the flow solver.
    Gt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ransac,
    Lcmsac,
}

fn on_grid(p: &Vector2<f64>, step: usize) -> bool {
    let step = step.max(1);
    (p.x as usize).is_multiple_of(step) && (p.y as usize).is_multiple_of(step)
}

fn keep(flow: FlowField, pred: impl Fn(&Vector2<f64>) -> bool) -> FlowField {
    let mut out = FlowField::default();
    for ((p, v), ok) in flow.positions.iter().zip(&flow.vectors).zip(&flow.valid) {
        if pred(p) {
            out.positions.push(*p);
            out.vectors.push(*v);
            out.valid.push(*ok);
        }
    }
    out
}

/// Measured flow of pair `k`; dense and ground-truth fields are thinned to
/// a regular grid with the given step.
pub fn load_flow(ds: &Dataset, k: usize, kind: FlowKind, step: usize) -> Result<FlowField> {
    Ok(match kind {
        FlowKind::Dense => keep(ds.dense_flow(k)?, |p| on_grid(p, step)),
        FlowKind::Sparse => ds.sparse_flow(k)?,
        FlowKind::Gt => keep(ds.gt_flow(k)?, |p| on_grid(p, step)),
    })
}

/// Eigenbasis flow errors of every frame pair, each component paired with
/// its own texture.
pub fn training_set(ds: &Dataset, kind: FlowKind, step: usize) -> Result<TrainingSet> {
    let cam = ds.camera();
    let poses = &ds.manifest.poses;
    let mut set = TrainingSet::default();
    for k in 0..ds.pairs() {
        let measured = load_flow(ds, k, kind, step)?;
        let structure = ds.structure(k)?;
        let depth = ds.depth(k)?;
        let truth = ground_truth_flow(&poses[k + 1], &poses[k], &measured.positions, &depth, &cam);
        for i in 0..measured.len() {
            if !(measured.valid[i] && truth.valid[i]) {
                continue;
            }
            let (t1, t2, phi) = structure.nearest(&measured.positions[i]);
            let z = to_eigenbasis(&(measured.vectors[i] - truth.vectors[i]), phi);
            set.push(z.x, t1);
            set.push(z.y, t2);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryOptions {
    pub estimator: EstimatorKind,
    pub flow: FlowKind,
    pub seed: u64,
    /// Grid step used to thin dense and ground-truth flow.
    pub dense_step: usize,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub k: usize,
    /// Position error of the frame k+1 estimate, meters.
    pub translation_error: f64,
    /// Rotation angle between estimated and true orientation, radians.
    pub rotation_error: f64,
    pub samples: usize,
    pub inlier_ratio: f64,
    pub iterations: usize,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub estimator: EstimatorKind,
    pub flow: FlowKind,
    pub seed: u64,
    pub frames: usize,
    pub drift_pct: f64,
    pub mean_inlier_ratio: f64,
    pub failures: usize,
    pub per_frame: Vec<FrameMetrics>,
}

/// Sequential odometry: each pose is estimated from the flow between the
/// previous estimate's frame and the next, with ground-truth depth of the
/// earlier frame and zero motion as the starting guess.
pub fn run_odometry(
    ds: &Dataset,
    lut: Option<&ParamLut>,
    opts: &OdometryOptions,
) -> Result<(Vec<Pose>, Metrics)> {
    let truth = &ds.manifest.poses;
    let cam = ds.camera();
    let lcmsac_lut = match (opts.estimator, lut) {
        (EstimatorKind::Lcmsac, None) => {
            return Err(Error::domain("LCMSAC needs a calibrated LUT"));
        }
        (_, l) => l,
    };
    let mut est = vec![truth[0]];
    let mut per_frame = Vec::with_capacity(ds.pairs());
    for k in 0..ds.pairs() {
        let flow = load_flow(ds, k, opts.flow, opts.dense_step)?;
        let problem = EgoProblem::new(est[k], &flow, &ds.structure(k)?, &ds.depth(k)?, &cam)?;
        let seed = opts
            .seed
            .wrapping_mul(0x1_0000_0000)
            .wrapping_add(k as u64 * 1000);
        let result = match opts.estimator {
            EstimatorKind::Ransac => ransac_egomotion(
                &problem,
                &est[k],
                &SacConfig {
                    max_iters: opts.max_iters,
                    ..SacConfig::ransac(seed)
                },
            )?,
            EstimatorKind::Lcmsac => lcmsac_egomotion(
                &problem,
                lcmsac_lut.expect("checked above"),
                &est[k],
                &SacConfig {
                    max_iters: opts.max_iters,
                    ..SacConfig::lcmsac(seed, opts.flow == FlowKind::Dense)
                },
            )?,
        };
        let pose = result.pose;
        let t = truth[k + 1];
        let rot_err = (pose.rotation().inverse() * t.rotation()).angle();
        per_frame.push(FrameMetrics {
            k,
            translation_error: (pose.position - t.position).norm(),
            rotation_error: rot_err,
            samples: problem.len(),
            inlier_ratio: result.inlier_ratio(),
            iterations: result.iterations,
            success: result.success,
        });
        est.push(pose);
    }
    let drift = drift_rate(&est, truth)?;
    let mean_inlier_ratio =
        per_frame.iter().map(|f| f.inlier_ratio).sum::<f64>() / per_frame.len() as f64;
    let failures = per_frame.iter().filter(|f| !f.success).count();
    Ok((
        est,
        Metrics {
            estimator: opts.estimator,
            flow: opts.flow,
            seed: opts.seed,
            frames: truth.len(),
            drift_pct: drift,
            mean_inlier_ratio,
            failures,
            per_frame,
        },
    ))
}
