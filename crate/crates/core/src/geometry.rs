//! Pinhole camera, rigid-body poses and the ground-truth flow they induce.
//!
//! Camera axes follow the usual computer-vision frame: `+z` along the optical
//! axis, `+x` to the right of the image and `+y` down. A [`Pose`] carries the
//! camera position in the world frame together with Z-Y-X (yaw, pitch, roll)
//! Euler angles of the camera-to-world rotation, so with all angles zero the
//! world axes coincide with the camera axes and yaw turns the camera about its
//! optical axis.
//!
//! Depth maps store *inverse z-depth*: for a pixel whose ray hits the scene at
//! camera-frame point `X`, the stored value is `1 / X.z`. A fronto-parallel
//! plane therefore has a constant depth map, and inverse depth of any plane is
//! affine in the pixel coordinates, which makes bilinear lookup exact.

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub horizontal_fov: f64,
}

impl CameraModel {
    pub fn new(width: usize, height: usize, horizontal_fov: f64) -> Result<Self> {
        let cam = CameraModel {
            width,
            height,
            horizontal_fov,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// 640x360 with a 120 degree horizontal field of view.
    pub fn default_sim() -> Self {
        CameraModel {
            width: 640,
            height: 360,
            horizontal_fov: 120f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::domain("camera dimensions must be positive"));
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < std::f64::consts::PI) {
            return Err(Error::domain(format!(
                "horizontal fov {} outside (0, pi)",
                self.horizontal_fov
            )));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.horizontal_fov / 2.0).tan()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (self.width - 1) as f64
            && p.y <= (self.height - 1) as f64
    }
}

/// Camera position (meters, world frame) and Z-Y-X Euler angles (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(position: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Self {
        Pose {
            position,
            yaw,
            pitch,
            roll,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Vector3::zeros(), 0.0, 0.0, 0.0)
    }

    /// Camera-to-world rotation `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    /// Homogeneous camera-to-world transform.
    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.position),
            UnitQuaternion::from_rotation_matrix(&self.rotation()),
        )
    }

    /// Six-vector `[x, y, z, yaw, pitch, roll]`.
    pub fn to_vector(&self) -> [f64; 6] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.yaw,
            self.pitch,
            self.roll,
        ]
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Pose::new(Vector3::new(v[0], v[1], v[2]), v[3], v[4], v[5])
    }
}

/// Per-pixel inverse z-depth aligned to a rendered frame. Invalid pixels hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub inverse_depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, inverse_depth: Vec<f64>) -> Result<Self> {
        if width * height != inverse_depth.len() || width == 0 || height == 0 {
            return Err(Error::domain("depth map dimensions do not match data"));
        }
        if inverse_depth.iter().any(|v| v.is_finite() && *v <= 0.0) {
            return Err(Error::domain("inverse depth must be positive where finite"));
        }
        Ok(DepthMap {
            width,
            height,
            inverse_depth,
        })
    }

    pub fn constant(width: usize, height: usize, inverse_depth: f64) -> Self {
        DepthMap {
            width,
            height,
            inverse_depth: vec![inverse_depth; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.inverse_depth[y * self.width + x]
    }

    /// Bilinear lookup; `None` if outside the map or any neighbour is invalid.
    pub fn sample(&self, p: &Vector2<f64>) -> Option<f64> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let (w, h) = (self.width, self.height);
        if p.x > (w - 1) as f64 || p.y > (h - 1) as f64 {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(w - 1);
        let y0 = (p.y.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = p.x - x0 as f64;
        let ay = p.y - y0 as f64;
        let v00 = self.at(x0, y0);
        let v10 = self.at(x1, y0);
        let v01 = self.at(x0, y1);
        let v11 = self.at(x1, y1);
        let v = (1.0 - ax) * (1.0 - ay) * v00
            + ax * (1.0 - ay) * v10
            + (1.0 - ax) * ay * v01
            + ax * ay * v11;
        (v.is_finite() && v > 0.0).then_some(v)
    }
}

/// Unit ray through pixel `p`, expressed in the camera frame.
pub fn pixel_to_ray(camera: &CameraModel, p: &Vector2<f64>) -> Result<Vector3<f64>> {
    if !camera.contains(p) {
        return Err(Error::domain(format!(
            "pixel ({}, {}) outside {}x{} image",
            p.x, p.y, camera.width, camera.height
        )));
    }
    Ok(pixel_to_ray_unchecked(camera, p))
}

pub(crate) fn pixel_to_ray_unchecked(camera: &CameraModel, p: &Vector2<f64>) -> Vector3<f64> {
    let c = camera.principal_point();
    let f = camera.focal();
    Vector3::new((p.x - c.x) / f, (p.y - c.y) / f, 1.0).normalize()
}

/// Perspective projection of a camera-frame direction. The result may lie
/// outside the image.
pub fn ray_to_pixel(camera: &CameraModel, v: &Vector3<f64>) -> Result<Vector2<f64>> {
    if v.z <= 0.0 || !v.z.is_finite() {
        return Err(Error::BehindCamera(v.z));
    }
    let c = camera.principal_point();
    let f = camera.focal();
    Ok(Vector2::new(c.x + f * v.x / v.z, c.y + f * v.y / v.z))
}

/// Transform taking camera-frame points at `x_km1` into the camera frame at `x_k`.
pub fn relative_transform(x_k: &Pose, x_km1: &Pose) -> Isometry3<f64> {
    x_k.to_isometry().inverse() * x_km1.to_isometry()
}

/// Camera-frame point seen at pixel `p` with inverse z-depth `inverse_depth`.
pub fn lift_pixel(camera: &CameraModel, p: &Vector2<f64>, inverse_depth: f64) -> Vector3<f64> {
    let ray = pixel_to_ray_unchecked(camera, p);
    ray / (ray.z * inverse_depth)
}

/// Where pixel `p` of frame k-1 lands in frame k. `None` when the depth is
/// invalid or the point ends up behind the camera.
pub fn predict_pixel(
    x_k: &Pose,
    x_km1: &Pose,
    p: &Vector2<f64>,
    depth: &DepthMap,
    camera: &CameraModel,
) -> Option<Vector2<f64>> {
    let rel = relative_transform(x_k, x_km1);
    predict_with(&rel, p, depth, camera)
}

fn predict_with(
    rel: &Isometry3<f64>,
    p: &Vector2<f64>,
    depth: &DepthMap,
    camera: &CameraModel,
) -> Option<Vector2<f64>> {
    if !camera.contains(p) {
        return None;
    }
    let rho = depth.sample(p)?;
    let ray = pixel_to_ray_unchecked(camera, p);
    // Homogeneous lift [ray; rho * ray.z], transformed then dehomogenised by C.
    let h = rho * ray.z;
    let moved = rel.rotation * ray + rel.translation.vector * h;
    ray_to_pixel(camera, &moved).ok()
}

/// Ground-truth flow `g(p) - p` for each requested pixel.
pub fn ground_truth_flow(
    x_k: &Pose,
    x_km1: &Pose,
    pixels: &[Vector2<f64>],
    depth: &DepthMap,
    camera: &CameraModel,
) -> FlowField {
    let rel = relative_transform(x_k, x_km1);
    let mut vectors = Vec::with_capacity(pixels.len());
    let mut valid = Vec::with_capacity(pixels.len());
    for p in pixels {
        match predict_with(&rel, p, depth, camera) {
            Some(g) => {
                vectors.push(g - p);
                valid.push(true);
            }
            None => {
                vectors.push(Vector2::zeros());
                valid.push(false);
            }
        }
    }
    FlowField {
        positions: pixels.to_vec(),
        vectors,
        valid,
    }
}

/// Every pixel centre of the camera, row-major.
pub fn all_pixels(camera: &CameraModel) -> Vec<Vector2<f64>> {
    grid_pixels(camera, 1, 0)
}

/// Regular grid of pixel centres with the given step, skipping `margin`
/// pixels at each border.
pub fn grid_pixels(camera: &CameraModel, step: usize, margin: usize) -> Vec<Vector2<f64>> {
    let step = step.max(1);
    let mut out = Vec::new();
    let mut y = margin;
    while y + margin < camera.height {
        let mut x = margin;
        while x + margin < camera.width {
            out.push(Vector2::new(x as f64, y as f64));
            x += step;
        }
        y += step;
    }
    out
}
