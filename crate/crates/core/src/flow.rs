//! Two-frame pyramidal Lucas-Kanade optical flow.
//!
//! [`lucas_kanade`] tracks individual points, iterating each point's own
//! window at every pyramid level. [`dense_flow`] solves the same per-level
//! normal equations at every pixel. Its window sums are box filters over the
//! frame, with each window pixel's residual linearised about that pixel's own
//! warp, so the cost stays linear in the pixel count. Dense mode keeps
//! low-texture pixels in its output; judging them is left to the likelihood
//! model.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{convolve_separable, gaussian_kernel, gradients, Field, Image};

/// Flow samples in the image basis, in pixels per frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    pub positions: Vec<Vector2<f64>>,
    pub vectors: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

const FLF_MAGIC: &[u8; 4] = b"FLF1";

impl FlowField {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Flow with the same positions, one vector per sample.
    pub fn with_vectors(positions: Vec<Vector2<f64>>, vectors: Vec<Vector2<f64>>) -> Self {
        let valid = vec![true; positions.len()];
        FlowField {
            positions,
            vectors,
            valid,
        }
    }

    /// Little-endian `FLF1` encoding: magic, `u32` count, then per sample
    /// `f32 u, f32 v, f32 du, f32 dv, u8 valid`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 17 * self.len());
        out.extend_from_slice(FLF_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for ((p, d), ok) in self.positions.iter().zip(&self.vectors).zip(&self.valid) {
            for v in [p.x, p.y, d.x, d.y] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.push(u8::from(*ok));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != FLF_MAGIC {
            return Err("missing FLF1 header".into());
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 17 * n {
            return Err(format!(
                "expected {} bytes for {} samples, found {}",
                8 + 17 * n,
                n,
                bytes.len()
            ));
        }
        let mut field = FlowField::default();
        for rec in bytes[8..].chunks_exact(17) {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            field.positions.push(Vector2::new(f(0), f(1)));
            field.vectors.push(Vector2::new(f(2), f(3)));
            field.valid.push(rec[16] != 0);
        }
        Ok(field)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FlowField::from_bytes(&bytes).map_err(|r| Error::format(path, r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LkParams {
    /// Integration window side, odd.
    pub window: usize,
    /// Index of the coarsest pyramid level (0 = single scale).
    pub max_level: usize,
    pub max_iters: usize,
    /// Update-norm stopping threshold in pixels.
    pub eps: f64,
}

impl Default for LkParams {
    fn default() -> Self {
        LkParams {
            window: 21,
            max_level: 3,
            max_iters: 30,
            eps: 0.01,
        }
    }
}

impl LkParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "LK window {} must be odd and >= 3",
                self.window
            )));
        }
        if self.max_iters == 0 || !(self.eps > 0.0) {
            return Err(Error::domain("LK needs max_iters >= 1 and eps > 0"));
        }
        Ok(())
    }
}

/// Smaller eigenvalue of the window-averaged tensor below which a point is
/// considered untrackable.
const MIN_EIGEN: f64 = 1e-4;

fn pyr_down(img: &Image) -> Image {
    let kernel = gaussian_kernel(5, 1.0);
    let blurred = convolve_separable(&img.data, img.width, img.height, &kernel);
    let w = img.width.div_ceil(2);
    let h = img.height.div_ceil(2);
    Image::from_fn(w, h, |x, y| blurred[2 * y * img.width + 2 * x])
}

/// `levels` images, level 0 being the input and each further level a
/// 5-tap Gaussian (sigma 1) blur decimated by two.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<Vec<Image>> {
    if levels == 0 {
        return Err(Error::domain("a pyramid needs at least one level"));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = pyr_down(out.last().unwrap());
        if next.width < 8 || next.height < 8 {
            return Err(Error::domain(format!(
                "{levels} pyramid levels shrink {}x{} below 8x8",
                img.width, img.height
            )));
        }
        out.push(next);
    }
    Ok(out)
}

struct Level {
    prev: Image,
    next: Image,
    gx: Field,
    gy: Field,
}

fn build_levels(prev: &Image, next: &Image, params: &LkParams) -> Result<Vec<Level>> {
    params.validate()?;
    if prev.width != next.width || prev.height != next.height {
        return Err(Error::SizeMismatch(
            prev.width,
            prev.height,
            next.width,
            next.height,
        ));
    }
    let pp = build_pyramid(prev, params.max_level + 1)?;
    let np = build_pyramid(next, params.max_level + 1)?;
    pp.into_iter()
        .zip(np)
        .map(|(prev, next)| {
            let (gx, gy) = gradients(&prev)?;
            Ok(Level { prev, next, gx, gy })
        })
        .collect()
}

#[inline]
fn min_eig(a: f64, b: f64, c: f64) -> f64 {
    0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

#[inline]
fn in_bounds(img: &Image, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (img.width - 1) as f64 && y <= (img.height - 1) as f64
}

fn track_point(levels: &[Level], p: &Vector2<f64>, params: &LkParams) -> Option<Vector2<f64>> {
    let r = (params.window / 2) as isize;
    let n = params.window * params.window;
    let mut ip = vec![0.0; n];
    let mut wx = vec![0.0; n];
    let mut wy = vec![0.0; n];
    let mut guess = Vector2::zeros();
    for (li, lvl) in levels.iter().enumerate().rev() {
        let scale = 0.5f64.powi(li as i32);
        let (px, py) = (p.x * scale, p.y * scale);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        let mut k = 0;
        for j in -r..=r {
            for i in -r..=r {
                let (qx, qy) = (px + i as f64, py + j as f64);
                ip[k] = lvl.prev.sample(qx, qy);
                let gx =
                    crate::imaging::bilinear(&lvl.gx.data, lvl.gx.width, lvl.gx.height, qx, qy);
                let gy =
                    crate::imaging::bilinear(&lvl.gy.data, lvl.gy.width, lvl.gy.height, qx, qy);
                wx[k] = gx;
                wy[k] = gy;
                a += gx * gx;
                b += gx * gy;
                c += gy * gy;
                k += 1;
            }
        }
        let det = a * c - b * b;
        let mut d = Vector2::zeros();
        if min_eig(a, b, c) / n as f64 >= MIN_EIGEN && det > 0.0 {
            for _ in 0..params.max_iters {
                let (ox, oy) = (px + guess.x + d.x, py + guess.y + d.y);
                let (mut bx, mut by) = (0.0, 0.0);
                let mut k = 0;
                for j in -r..=r {
                    for i in -r..=r {
                        let it = ip[k] - lvl.next.sample(ox + i as f64, oy + j as f64);
                        bx += wx[k] * it;
                        by += wy[k] * it;
                        k += 1;
                    }
                }
                let eta = Vector2::new((c * bx - b * by) / det, (a * by - b * bx) / det);
                d += eta;
                if !in_bounds(&lvl.next, px + guess.x + d.x, py + guess.y + d.y) {
                    return None;
                }
                if eta.norm() < params.eps {
                    break;
                }
            }
        } else if li == 0 {
            return None;
        }
        if li == 0 {
            guess += d;
        } else {
            guess = (guess + d) * 2.0;
        }
    }
    let end = p + guess;
    (in_bounds(&levels[0].next, end.x, end.y) && guess.iter().all(|v| v.is_finite()))
        .then_some(guess)
}

/// Sparse pyramidal Lucas-Kanade at the given points of `prev`.
pub fn lucas_kanade(
    prev: &Image,
    next: &Image,
    points: &[Vector2<f64>],
    params: &LkParams,
) -> Result<FlowField> {
    if let Some(p) = points.iter().find(|p| !in_bounds(prev, p.x, p.y)) {
        return Err(Error::domain(format!(
            "point ({}, {}) out of bounds",
            p.x, p.y
        )));
    }
    let levels = build_levels(prev, next, params)?;
    let tracked: Vec<Option<Vector2<f64>>> = points
        .par_iter()
        .map(|p| track_point(&levels, p, params))
        .collect();
    Ok(FlowField {
        positions: points.to_vec(),
        vectors: tracked
            .iter()
            .map(|t| t.unwrap_or_else(Vector2::zeros))
            .collect(),
        valid: tracked.iter().map(Option::is_some).collect(),
    })
}

/// Sums over a `window` x `window` box centred at every pixel, truncated at
/// the image border.
fn box_sum(data: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
    let r = window / 2;
    let stride = w + 1;
    let mut integral = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += data[y * w + x];
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, o)| {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for (x, v) in o.iter_mut().enumerate() {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            *v = integral[y1 * stride + x1]
                - integral[y0 * stride + x1]
                - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
        }
    });
    out
}

/// Dense pyramidal Lucas-Kanade: one flow vector per pixel of `prev`.
pub fn dense_flow(prev: &Image, next: &Image, params: &LkParams) -> Result<FlowField> {
    let levels = build_levels(prev, next, params)?;
    let mut u: Vec<f64> = Vec::new();
    let mut v: Vec<f64> = Vec::new();
    for (li, lvl) in levels.iter().enumerate().rev() {
        let (w, h) = (lvl.prev.width, lvl.prev.height);
        if u.is_empty() {
            u = vec![0.0; w * h];
            v = vec![0.0; w * h];
        } else {
            let (cw, ch) = (levels[li + 1].prev.width, levels[li + 1].prev.height);
            let mut nu = vec![0.0; w * h];
            let mut nv = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = (x as f64 * 0.5, y as f64 * 0.5);
                    nu[y * w + x] = 2.0 * crate::imaging::bilinear(&u, cw, ch, cx, cy);
                    nv[y * w + x] = 2.0 * crate::imaging::bilinear(&v, cw, ch, cx, cy);
                }
            }
            u = nu;
            v = nv;
        }
        let gx = &lvl.gx.data;
        let gy = &lvl.gy.data;
        let mut active = vec![true; w * h];
        let mut src = [
            vec![0.0; w * h],
            vec![0.0; w * h],
            vec![0.0; w * h],
            vec![0.0; w * h],
            vec![0.0; w * h],
        ];
        let mut count_src = vec![0.0; w * h];
        for _ in 0..params.max_iters {
            // A few pixels, mostly at the border, cycle without converging;
            // stop once they are all that is left.
            if active.iter().filter(|a| **a).count() * 100 < w * h {
                break;
            }
            // Each window pixel q contributes its residual re-linearised about
            // its own warp: e_q = I0(q) - I1(q + d_q) + grad(q) . d_q, so that
            // the solve below is the window LK step for a shared flow.
            // Samples warped outside the frame are masked out.
            for i in 0..w * h {
                let (x, y) = ((i % w) as f64 + u[i], (i / w) as f64 + v[i]);
                let m = if in_bounds(&lvl.next, x, y) { 1.0 } else { 0.0 };
                let e = lvl.prev.data[i] - lvl.next.sample(x, y) + gx[i] * u[i] + gy[i] * v[i];
                src[0][i] = m * gx[i] * gx[i];
                src[1][i] = m * gx[i] * gy[i];
                src[2][i] = m * gy[i] * gy[i];
                src[3][i] = m * gx[i] * e;
                src[4][i] = m * gy[i] * e;
                count_src[i] = m;
            }
            let [sa, sb, sc, bx, by] = src.each_ref().map(|s| box_sum(s, w, h, params.window));
            let count = box_sum(&count_src, w, h, params.window);
            for i in 0..w * h {
                if !active[i] {
                    continue;
                }
                let det = sa[i] * sc[i] - sb[i] * sb[i];
                if count[i] < 1.0
                    || det <= 0.0
                    || min_eig(sa[i], sb[i], sc[i]) / count[i] < MIN_EIGEN
                {
                    active[i] = false;
                    continue;
                }
                let nu = (sc[i] * bx[i] - sb[i] * by[i]) / det;
                let nv = (sa[i] * by[i] - sb[i] * bx[i]) / det;
                let step = (nu - u[i]).hypot(nv - v[i]);
                u[i] = nu;
                v[i] = nv;
                if step < params.eps {
                    active[i] = false;
                }
            }
        }
    }
    let (w, h) = (prev.width, prev.height);
    let mut field = FlowField::default();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            field.positions.push(Vector2::new(x as f64, y as f64));
            let d = Vector2::new(u[i], v[i]);
            let ok = d.iter().all(|c| c.is_finite());
            field.vectors.push(if ok { d } else { Vector2::zeros() });
            field.valid.push(ok);
        }
    }
    Ok(field)
}
