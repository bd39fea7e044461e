//! Procedural scenes, trajectories and on-disk datasets.
//!
//! A scene is a single textured plane at world `z = distance`, seen by a
//! camera looking along `+z`. Its texture is band-limited value noise: a few
//! octaves of bilinearly interpolated random lattices between two spatial
//! frequencies, optionally modulated by a slow envelope so that the same
//! frame holds both strongly and weakly textured regions. The texture is a
//! pure function of world coordinates, so frames rendered at different poses
//! are exactly consistent with each other and with the ground-truth flow.
//!
//! [`build_dataset`] renders a trajectory, adds seeded sensor noise,
//! quantises to 8 bits and stores, for every frame pair, ground-truth flow,
//! dense and sparse Lucas-Kanade flow, depth and the structure field.

use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{dense_flow, lucas_kanade, FlowField, LkParams};
use crate::geometry::{
    all_pixels, ground_truth_flow, pixel_to_ray_unchecked, CameraModel, DepthMap, Pose,
};
use crate::imaging::{good_features, structure_field, Image, StructureField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Distance from the trajectory plane to the textured plane, meters.
    pub distance: f64,
    /// Lowest texture frequency, cycles per meter.
    pub band_low: f64,
    /// Highest texture frequency, cycles per meter.
    pub band_high: f64,
    /// Maximum deviation from mid-grey, intensity units.
    pub contrast: f64,
    /// Depth of the slow amplitude envelope in `[0, 1)`; 0 disables it.
    pub modulation: f64,
    /// Gain of a `tanh` sharpening of the noise into edge-like transitions; 0 disables it.
    pub sharpness: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) {
            return Err(Error::domain("plane distance must be positive"));
        }
        if !(self.band_low > 0.0 && self.band_low < self.band_high && self.band_high.is_finite()) {
            return Err(Error::domain("texture band needs 0 < low < high"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 127.0) {
            return Err(Error::domain("contrast must lie in (0, 127]"));
        }
        if !(0.0..1.0).contains(&self.modulation) {
            return Err(Error::domain("modulation must lie in [0, 1)"));
        }
        if !(self.sharpness >= 0.0 && self.sharpness.is_finite()) {
            return Err(Error::domain("sharpness must be finite and non-negative"));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform value in `[-1, 1]` at an integer lattice node.
#[inline]
fn lattice(salt: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(salt ^ splitmix((ix as u64) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Octave {
    freq: f64,
    offset: (f64, f64),
    salt: u64,
}

impl Octave {
    fn new(freq: f64, seed: u64, index: u64) -> Self {
        let salt = splitmix(seed ^ splitmix(index));
        let unit = |h: u64| (h >> 11) as f64 / (1u64 << 53) as f64;
        Octave {
            freq,
            offset: (
                unit(splitmix(salt)) * 1000.0,
                unit(splitmix(salt ^ 1)) * 1000.0,
            ),
            salt,
        }
    }

    #[inline]
    fn value(&self, x: f64, y: f64) -> f64 {
        let u = x * self.freq + self.offset.0;
        let v = y * self.freq + self.offset.1;
        let (fu, fv) = (u.floor(), v.floor());
        let (ix, iy) = (fu as i64, fv as i64);
        let (a, b) = (u - fu, v - fv);
        let n00 = lattice(self.salt, ix, iy);
        let n10 = lattice(self.salt, ix + 1, iy);
        let n01 = lattice(self.salt, ix, iy + 1);
        let n11 = lattice(self.salt, ix + 1, iy + 1);
        let top = n00 + a * (n10 - n00);
        let bottom = n01 + a * (n11 - n01);
        top + b * (bottom - top)
    }
}

/// Continuous texture on the scene plane, intensity as a function of world `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    pub spec: SceneSpec,
    octaves: Vec<Octave>,
    envelope: Octave,
}

impl Texture {
    /// Signed deviation from mid-grey, bounded by the contrast.
    #[inline]
    pub fn deviation(&self, x: f64, y: f64) -> f64 {
        let sum: f64 = self.octaves.iter().map(|o| o.value(x, y)).sum();
        let mut s = sum / self.octaves.len() as f64;
        let g = self.spec.sharpness;
        if g > 0.0 {
            s = (g * s).tanh() / g.tanh();
        }
        let mut v = self.spec.contrast * s;
        if self.spec.modulation > 0.0 {
            let e = 0.5 * (self.envelope.value(x, y) + 1.0);
            v *= 1.0 - self.spec.modulation * e;
        }
        v
    }

    #[inline]
    pub fn value(&self, x: f64, y: f64) -> f64 {
        128.0 + self.deviation(x, y)
    }
}

/// Octaves spaced geometrically from `band_low` to `band_high`, at most an
/// octave apart, with equal weights.
pub fn make_texture(spec: &SceneSpec) -> Result<Texture> {
    spec.validate()?;
    let ratio = spec.band_high / spec.band_low;
    let n = (ratio.log2().ceil() as usize + 1).max(2);
    let octaves = (0..n)
        .map(|j| {
            let f = spec.band_low * ratio.powf(j as f64 / (n - 1) as f64);
            Octave::new(f, spec.seed, j as u64)
        })
        .collect();
    let envelope = Octave::new(spec.band_low / 4.0, spec.seed, u64::MAX);
    Ok(Texture {
        spec: *spec,
        octaves,
        envelope,
    })
}

/// Sub-pixel offsets of the 2x2 supersampling pattern.
const SUBSAMPLES: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Renders the plane seen from `pose`. Each pixel averages a 2x2 grid of
/// rays; depth is the exact inverse z-depth along the pixel-centre ray.
pub fn render_frame(
    texture: &Texture,
    camera: &CameraModel,
    pose: &Pose,
) -> Result<(Image, DepthMap)> {
    camera.validate()?;
    let rot = pose.rotation();
    let height = texture.spec.distance - pose.position.z;
    let (w, h) = (camera.width, camera.height);
    let hit = |p: Vector2<f64>| -> Option<(Vector3<f64>, f64)> {
        let ray = pixel_to_ray_unchecked(camera, &p);
        let dir = rot * ray;
        if dir.z <= 0.0 {
            return None;
        }
        let s = height / dir.z;
        (s > 0.0).then(|| (pose.position + dir * s, s * ray.z))
    };
    let rows: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut img = Vec::with_capacity(w);
            let mut inv = Vec::with_capacity(w);
            for x in 0..w {
                let c = Vector2::new(x as f64, y as f64);
                let (_, z) = hit(c)?;
                let mut acc = 0.0;
                for (dx, dy) in SUBSAMPLES {
                    let (pt, _) = hit(c + Vector2::new(dx, dy))?;
                    acc += texture.value(pt.x, pt.y);
                }
                img.push((acc / 4.0).clamp(0.0, 255.0));
                inv.push(1.0 / z);
            }
            Some((img, inv))
        })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    let mut inverse = Vec::with_capacity(w * h);
    for r in rows {
        let (i, d) = r.ok_or_else(|| {
            Error::domain("scene plane is not in front of the camera at every pixel")
        })?;
        data.extend(i);
        inverse.extend(d);
    }
    Ok((Image::new(w, h, data)?, DepthMap::new(w, h, inverse)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryKind {
    /// Constant-velocity line along world x with fixed orientation.
    Straight,
    /// Closed figure-eight in the plane parallel to the scene, heading along the path.
    Fig8,
    /// Camera at rest; every frame has the same pose.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Path length for `straight`, peak-to-peak width for `fig8`, meters.
    pub span: f64,
    pub frames: usize,
    pub frame_rate: f64,
    /// Where on the closed `fig8` loop the first frame sits, as a fraction
    /// of one lap. Ignored by the other kinds.
    #[serde(default)]
    pub loop_start: f64,
    /// Portion of the `fig8` loop traversed; 1 closes the loop.
    #[serde(default = "one")]
    pub loop_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl TrajectorySpec {
    /// A full-lap trajectory.
    pub fn new(kind: TrajectoryKind, span: f64, frames: usize, frame_rate: f64) -> Self {
        TrajectorySpec {
            kind,
            span,
            frames,
            frame_rate,
            loop_start: 0.0,
            loop_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.loop_start) {
            return Err(Error::domain("loop start must lie in [0, 1)"));
        }
        if !(self.loop_fraction > 0.0 && self.loop_fraction <= 1.0) {
            return Err(Error::domain("loop fraction must lie in (0, 1]"));
        }
        if self.frames < 2 {
            return Err(Error::domain("a trajectory needs at least 2 frames"));
        }
        if !(self.span > 0.0 && self.span.is_finite()) {
            return Err(Error::domain("trajectory span must be positive"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::domain("frame rate must be positive"));
        }
        Ok(())
    }

    /// Timestamp of frame `k`, seconds.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.frame_rate
    }
}

/// One pose per frame. The figure-eight is the lemniscate of Gerono
/// `(A sin s, A sin s cos s)` with `A = span / 2`, with `s` uniform in time.
/// A full lap ends where it started.
pub fn make_trajectory(spec: &TrajectorySpec) -> Result<Vec<Pose>> {
    spec.validate()?;
    let n = spec.frames;
    let last = (n - 1) as f64;
    Ok(match spec.kind {
        TrajectoryKind::Static => vec![Pose::identity(); n],
        TrajectoryKind::Straight => (0..n)
            .map(|k| {
                Pose::new(
                    Vector3::new(spec.span * k as f64 / last, 0.0, 0.0),
                    0.0,
                    0.0,
                    0.0,
                )
            })
            .collect(),
        TrajectoryKind::Fig8 => {
            let a = spec.span / 2.0;
            let mut poses = Vec::with_capacity(n);
            let mut prev_yaw: Option<f64> = None;
            for k in 0..n {
                let u = if k + 1 == n { 1.0 } else { k as f64 / last };
                let s = std::f64::consts::TAU * (spec.loop_start + spec.loop_fraction * u);
                let pos = Vector3::new(a * s.sin(), a * s.sin() * s.cos(), 0.0);
                let raw = (a * (2.0 * s).cos()).atan2(a * s.cos());
                let yaw = match prev_yaw {
                    None => raw,
                    Some(p) => p + wrap_angle(raw - p),
                };
                prev_yaw = Some(yaw);
                poses.push(Pose::new(pos, yaw, 0.0, 0.0));
            }
            poses
        }
    })
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    a - t * ((a + std::f64::consts::PI) / t).floor()
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraModel,
    pub lk: LkParams,
    /// Side of the structure tensor window; its Gaussian sigma is a sixth of it.
    pub structure_window: usize,
    /// Standard deviation of additive Gaussian sensor noise, intensity units.
    pub sensor_noise: f64,
    pub noise_seed: u64,
    /// Maximum number of tracked points for sparse flow.
    pub sparse_points: usize,
    pub sparse_min_distance: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.trajectory.validate()?;
        self.camera.validate()?;
        self.lk.validate()?;
        if self.structure_window < 3 || self.structure_window.is_multiple_of(2) {
            return Err(Error::domain("structure window must be odd and >= 3"));
        }
        if !(self.sensor_noise >= 0.0) {
            return Err(Error::domain("sensor noise must be non-negative"));
        }
        Ok(())
    }
}

pub const MANIFEST_FORMAT: &str = "lcmflow-dataset-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: DatasetSpec,
    pub frames: usize,
    pub poses: Vec<Pose>,
}

/// Renders frame `k` with sensor noise, quantised to 8 bits.
pub fn noisy_frame(
    texture: &Texture,
    spec: &DatasetSpec,
    pose: &Pose,
    k: usize,
) -> Result<(Image, DepthMap)> {
    let (mut img, depth) = render_frame(texture, &spec.camera, pose)?;
    if spec.sensor_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(spec.noise_seed ^ splitmix(k as u64)));
        let normal =
            Normal::new(0.0, spec.sensor_noise).map_err(|e| Error::domain(e.to_string()))?;
        for v in img.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in img.data.iter_mut() {
        *v = v.round().clamp(0.0, 255.0);
    }
    Ok((img, depth))
}

pub fn frame_structure(img: &Image, spec: &DatasetSpec) -> Result<StructureField> {
    structure_field(
        img,
        spec.structure_window,
        spec.structure_window as f64 / 6.0,
    )
}

/// Sparse tracking points of a frame: strongest corners by smaller eigenvalue.
pub fn sparse_points(structure: &StructureField, spec: &DatasetSpec) -> Vec<Vector2<f64>> {
    good_features(
        structure,
        spec.sparse_points,
        spec.sparse_min_distance,
        spec.lk.window / 2,
        0.01,
    )
}

/// Renders the dataset into `root`, creating the directory if needed.
pub fn build_dataset(spec: &DatasetSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    let texture = make_texture(&spec.scene)?;
    let poses = make_trajectory(&spec.trajectory)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let pixels = all_pixels(&spec.camera);

    let (mut img, mut depth) = noisy_frame(&texture, spec, &poses[0], 0)?;
    let mut structure = frame_structure(&img, spec)?;
    let save_frame = |k: usize, img: &Image, depth: &DepthMap, st: &StructureField| -> Result<()> {
        img.write_pgm(&root.join(format!("frame_{k:05}.pgm")))?;
        write_f32_grid(
            &root.join(format!("depth_{k:05}.f32")),
            depth.width,
            depth.height,
            1,
            &depth.inverse_depth,
        )?;
        let triples: Vec<f64> = (0..st.t1.len())
            .flat_map(|i| [st.t1[i], st.t2[i], st.phi[i]])
            .collect();
        write_f32_grid(
            &root.join(format!("structure_{k:05}.f32")),
            st.width,
            st.height,
            3,
            &triples,
        )
    };
    save_frame(0, &img, &depth, &structure)?;
    for k in 0..poses.len() - 1 {
        let (next_img, next_depth) = noisy_frame(&texture, spec, &poses[k + 1], k + 1)?;
        let next_structure = frame_structure(&next_img, spec)?;
        let gt = ground_truth_flow(&poses[k + 1], &poses[k], &pixels, &depth, &spec.camera);
        let dense = dense_flow(&img, &next_img, &spec.lk)?;
        let sparse = lucas_kanade(&img, &next_img, &sparse_points(&structure, spec), &spec.lk)?;
        gt.write(&root.join(format!("gtflow_{k:05}.flf")))?;
        dense.write(&root.join(format!("flow_dense_{k:05}.flf")))?;
        sparse.write(&root.join(format!("flow_sparse_{k:05}.flf")))?;
        save_frame(k + 1, &next_img, &next_depth, &next_structure)?;
        img = next_img;
        depth = next_depth;
        structure = next_structure;
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        spec: *spec,
        frames: poses.len(),
        poses,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

const GRID_MAGIC: &[u8; 4] = b"F32G";

/// Little-endian `F32G` grid: magic, `u32` width, height and channel count,
/// then interleaved `f32` values row-major.
pub fn write_f32_grid(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[f64],
) -> Result<()> {
    if data.len() != width * height * channels {
        return Err(Error::domain("grid data does not match its dimensions"));
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(GRID_MAGIC);
    for v in [width, height, channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns `(width, height, channels, values)`.
pub fn read_f32_grid(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != GRID_MAGIC {
        return Err(Error::format(path, "missing F32G header"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    if bytes.len() != 16 + 4 * w * h * c {
        return Err(Error::format(path, "grid size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((w, h, c, data))
}

/// Read access to a dataset written by [`build_dataset`].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::format(
                &path,
                format!("unknown format {:?}", manifest.format),
            ));
        }
        if manifest.poses.len() != manifest.frames || manifest.frames < 2 {
            return Err(Error::format(&path, "pose list does not match frame count"));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn camera(&self) -> CameraModel {
        self.manifest.spec.camera
    }

    pub fn pairs(&self) -> usize {
        self.manifest.frames - 1
    }

    pub fn frame(&self, k: usize) -> Result<Image> {
        Image::read_pgm(&self.root.join(format!("frame_{k:05}.pgm")))
    }

    pub fn depth(&self, k: usize) -> Result<DepthMap> {
        let path = self.root.join(format!("depth_{k:05}.f32"));
        let (w, h, c, data) = read_f32_grid(&path)?;
        if c != 1 {
            return Err(Error::format(&path, "depth grid must have one channel"));
        }
        DepthMap::new(w, h, data)
    }

    pub fn structure(&self, k: usize) -> Result<StructureField> {
        let path = self.root.join(format!("structure_{k:05}.f32"));
        let (w, h, c, data) = read_f32_grid(&path)?;
        if c != 3 {
            return Err(Error::format(
                &path,
                "structure grid must have three channels",
            ));
        }
        Ok(StructureField {
            width: w,
            height: h,
            t1: data.iter().step_by(3).copied().collect(),
            t2: data.iter().skip(1).step_by(3).copied().collect(),
            phi: data.iter().skip(2).step_by(3).copied().collect(),
        })
    }

    pub fn gt_flow(&self, k: usize) -> Result<FlowField> {
        FlowField::read(&self.root.join(format!("gtflow_{k:05}.flf")))
    }

    pub fn dense_flow(&self, k: usize) -> Result<FlowField> {
        FlowField::read(&self.root.join(format!("flow_dense_{k:05}.flf")))
    }

    pub fn sparse_flow(&self, k: usize) -> Result<FlowField> {
        FlowField::read(&self.root.join(format!("flow_sparse_{k:05}.flf")))
    }
}
