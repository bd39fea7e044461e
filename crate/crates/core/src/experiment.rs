//! Standard scenes and the contrast-sweep calibration shared by the command
//! line tool, the examples and the acceptance suite.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::LkParams;
use crate::geometry::CameraModel;
use crate::likelihood::TrainingSet;
use crate::pipeline::{training_set, FlowKind};
use crate::synth::{
    build_dataset, Dataset, DatasetSpec, SceneSpec, TrajectoryKind, TrajectorySpec,
};

/// Approximate length of one figure-eight lap per meter of its width.
pub const FIG8_LENGTH_PER_WIDTH: f64 = 6.1;

/// Camera, scene and flow settings of an experiment; each dataset adds a
/// trajectory and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub distance: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub contrast: f64,
    pub modulation: f64,
    pub sharpness: f64,
    pub sensor_noise: f64,
    /// Camera travel per frame, meters.
    pub speed: f64,
    pub frame_rate: f64,
    pub lk: LkParams,
    pub structure_window: usize,
    pub sparse_points: usize,
    pub sparse_min_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 160,
            height: 90,
            fov_deg: 90.0,
            distance: 5.0,
            band_low: 0.5,
            band_high: 1.5,
            contrast: 120.0,
            modulation: 0.8,
            sharpness: 6.0,
            sensor_noise: 2.0,
            speed: 0.1,
            frame_rate: 10.0,
            lk: LkParams {
                window: 11,
                max_level: 2,
                max_iters: 30,
                eps: 0.01,
            },
            structure_window: 15,
            sparse_points: 300,
            sparse_min_distance: 6.0,
        }
    }
}

impl SceneConfig {
    /// Span giving `frames` frames at the configured speed: path length for
    /// `straight`, width of a full lap for `fig8`.
    pub fn span(&self, kind: TrajectoryKind, frames: usize) -> f64 {
        let length = self.speed * frames.saturating_sub(1) as f64;
        match kind {
            TrajectoryKind::Fig8 => length / FIG8_LENGTH_PER_WIDTH,
            _ => length,
        }
    }

    pub fn dataset(&self, kind: TrajectoryKind, frames: usize, seed: u64) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            scene: SceneSpec {
                distance: self.distance,
                band_low: self.band_low,
                band_high: self.band_high,
                contrast: self.contrast,
                modulation: self.modulation,
                sharpness: self.sharpness,
                seed,
            },
            trajectory: TrajectorySpec::new(kind, self.span(kind, frames), frames, self.frame_rate),
            camera: CameraModel::new(self.width, self.height, self.fov_deg.to_radians())?,
            lk: self.lk,
            structure_window: self.structure_window,
            sensor_noise: self.sensor_noise,
            noise_seed: seed ^ 77,
            sparse_points: self.sparse_points,
            sparse_min_distance: self.sparse_min_distance,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Calibration data: for every contrast, a short straight sequence plus
/// short pieces of the figure-eight lap spread around the loop, so the
/// training errors cover both translation and in-image rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub contrasts: Vec<f64>,
    pub straight_frames: usize,
    pub fig8_segments: usize,
    pub segment_frames: usize,
    /// Frames per lap of the figure-eight being calibrated for; sets the
    /// rotation rate of the segments.
    pub fig8_lap_frames: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            contrasts: vec![4.0, 10.0, 25.0, 60.0, 120.0],
            straight_frames: 5,
            fig8_segments: 5,
            segment_frames: 3,
            fig8_lap_frames: 400,
            seed: 0,
        }
    }
}

pub fn sweep_specs(scene: &SceneConfig, sweep: &SweepConfig) -> Result<Vec<DatasetSpec>> {
    if sweep.contrasts.is_empty() || sweep.straight_frames < 2 || sweep.segment_frames < 2 {
        return Err(Error::domain(
            "sweep needs contrasts and at least two frames per sequence",
        ));
    }
    if sweep.fig8_lap_frames < sweep.segment_frames {
        return Err(Error::domain("figure-eight segments longer than the lap"));
    }
    let n = sweep.contrasts.len();
    let pieces = (n * sweep.fig8_segments) as f64;
    let mut specs = Vec::with_capacity(n * (1 + sweep.fig8_segments));
    for (i, &contrast) in sweep.contrasts.iter().enumerate() {
        let cfg = SceneConfig { contrast, ..*scene };
        let base = sweep.seed.wrapping_mul(10_000);
        specs.push(cfg.dataset(
            TrajectoryKind::Straight,
            sweep.straight_frames,
            base + 1000 + i as u64,
        )?);
        for j in 0..sweep.fig8_segments {
            let mut spec = cfg.dataset(
                TrajectoryKind::Fig8,
                sweep.segment_frames,
                base + 2000 + 10 * i as u64 + j as u64,
            )?;
            spec.trajectory.span = cfg.span(TrajectoryKind::Fig8, sweep.fig8_lap_frames);
            spec.trajectory.loop_start = (i as f64 + (n * j) as f64 + 0.5) / pieces;
            spec.trajectory.loop_fraction =
                (sweep.segment_frames - 1) as f64 / (sweep.fig8_lap_frames - 1) as f64;
            spec.validate()?;
            specs.push(spec);
        }
    }
    Ok(specs)
}

/// Renders the sweep into numbered subdirectories of `root`.
pub fn build_sweep(scene: &SceneConfig, sweep: &SweepConfig, root: &Path) -> Result<Vec<PathBuf>> {
    sweep_specs(scene, sweep)?
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let dir = root.join(format!("sweep_{i:03}"));
            build_dataset(spec, &dir)?;
            Ok(dir)
        })
        .collect()
}

/// Grid step for thinning calibration flow; sparse flow is kept whole.
pub fn calibration_step(flow: FlowKind) -> usize {
    match flow {
        FlowKind::Sparse => 1,
        _ => 3,
    }
}

/// LUT size used per flow kind; sparse flow yields far fewer samples.
pub fn default_knot_count(flow: FlowKind) -> usize {
    match flow {
        FlowKind::Sparse => 6,
        _ => 8,
    }
}

/// Pooled training errors of several datasets.
pub fn collect_training(datasets: &[Dataset], flow: FlowKind, step: usize) -> Result<TrainingSet> {
    let mut data = TrainingSet::default();
    for ds in datasets {
        data.extend(&training_set(ds, flow, step)?);
    }
    Ok(data)
}

/// Dataset directories under `root`: `root` itself if it holds a manifest,
/// otherwise its immediate subdirectories that do, in name order.
pub fn find_datasets(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("manifest.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("manifest.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(root, "no dataset manifest found"));
    }
    Ok(dirs)
}
