//! Grayscale images, Scharr gradients and per-pixel structure tensors.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major grayscale image with real-valued intensities in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || width * height != data.len() {
            return Err(Error::domain(format!(
                "image data of length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("image intensities must be finite"));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixel lookup with replicated borders.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample with coordinates clamped to the image.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    /// Rotate by 90 degrees so that pixel `(x, y)` moves to `(height - 1 - y, x)`.
    pub fn rotate90(&self) -> Image {
        let (w, h) = (self.width, self.height);
        Image::from_fn(h, w, |x, y| self.at(y, h - 1 - x))
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::format(path, "truncated PGM header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "P5" {
            return Err(Error::format(path, "expected binary PGM (P5)"));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad header field {s:?}")))
        };
        let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::format(path, "only 8-bit PGM is supported"));
        }
        let mut bytes = vec![0u8; w * h];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Image::new(w, h, bytes.into_iter().map(f64::from).collect())
    }

    /// Writes an 8-bit binary PGM, rounding and clamping intensities.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

#[inline]
pub(crate) fn bilinear(data: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let xf = x.clamp(0.0, (width - 1) as f64);
    let yf = y.clamp(0.0, (height - 1) as f64);
    let x0 = xf as usize;
    let y0 = yf as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let ax = xf - x0 as f64;
    let ay = yf - y0 as f64;
    let r0 = y0 * width;
    let r1 = y1 * width;
    let top = data[r0 + x0] + ax * (data[r0 + x1] - data[r0 + x0]);
    let bottom = data[r1 + x0] + ax * (data[r1 + x1] - data[r1 + x0]);
    top + ay * (bottom - top)
}

/// A scalar per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Field {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Scharr derivatives normalised so a unit-slope ramp has gradient 1.
pub fn gradients(img: &Image) -> Result<(Field, Field)> {
    if img.width < 3 || img.height < 3 {
        return Err(Error::domain(format!(
            "gradients need at least 3x3 pixels, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    gx.par_chunks_mut(w)
        .zip(gy.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (rx, ry))| {
            let y = y as isize;
            for x in 0..w as isize {
                let p = |dx: isize, dy: isize| img.at_clamped(x + dx, y + dy);
                let dx = 3.0 * (p(1, -1) - p(-1, -1))
                    + 10.0 * (p(1, 0) - p(-1, 0))
                    + 3.0 * (p(1, 1) - p(-1, 1));
                let dy = 3.0 * (p(-1, 1) - p(-1, -1))
                    + 10.0 * (p(0, 1) - p(0, -1))
                    + 3.0 * (p(1, 1) - p(1, -1));
                rx[x as usize] = dx / 32.0;
                ry[x as usize] = dy / 32.0;
            }
        });
    Ok((
        Field {
            width: w,
            height: h,
            data: gx,
        },
        Field {
            width: w,
            height: h,
            data: gy,
        },
    ))
}

/// Per-pixel structure tensor eigenvalues `t1 >= t2 >= 0` and the angle of
/// the dominant eigenvector in the image basis.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureField {
    pub width: usize,
    pub height: usize,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub phi: Vec<f64>,
}

impl StructureField {
    /// `(t1, t2, phi)` at a pixel.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let i = y * self.width + x;
        (self.t1[i], self.t2[i], self.phi[i])
    }

    /// Values at the nearest pixel to `p` (clamped to the image).
    pub fn nearest(&self, p: &Vector2<f64>) -> (f64, f64, f64) {
        let x = (p.x.round().max(0.0) as usize).min(self.width - 1);
        let y = (p.y.round().max(0.0) as usize).min(self.height - 1);
        self.at(x, y)
    }
}

/// Normalised 1-D Gaussian taps of odd length `window`.
pub(crate) fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable convolution with replicated borders.
pub(crate) fn convolve_separable(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = &data[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * src[xx];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (j, kv) in kernel.iter().enumerate() {
            let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[yy * w..(yy + 1) * w];
            for (o, s) in row.iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    });
    out
}

/// Gaussian-weighted structure tensor over a `window` x `window` support,
/// eigendecomposed at every pixel.
pub fn structure_field(img: &Image, window: usize, sigma: f64) -> Result<StructureField> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::domain(format!(
            "window {window} must be odd and >= 3"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain("sigma must be positive"));
    }
    let (gx, gy) = gradients(img)?;
    let (w, h) = (img.width, img.height);
    let kernel = gaussian_kernel(window, sigma);
    let xx: Vec<f64> = gx.data.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = gx.data.iter().zip(&gy.data).map(|(a, b)| a * b).collect();
    let yy: Vec<f64> = gy.data.iter().map(|v| v * v).collect();
    let s11 = convolve_separable(&xx, w, h, &kernel);
    let s12 = convolve_separable(&xy, w, h, &kernel);
    let s22 = convolve_separable(&yy, w, h, &kernel);
    let mut t1 = vec![0.0; w * h];
    let mut t2 = vec![0.0; w * h];
    let mut phi = vec![0.0; w * h];
    for i in 0..w * h {
        let (a, b, c) = eigen_clamped(s11[i], s12[i], s22[i]);
        t1[i] = a;
        t2[i] = b;
        phi[i] = c;
    }
    Ok(StructureField {
        width: w,
        height: h,
        t1,
        t2,
        phi,
    })
}

/// Default structure window of 21 pixels with `sigma = window / 6`.
pub fn default_structure_field(img: &Image) -> Result<StructureField> {
    structure_field(img, 21, 21.0 / 6.0)
}

fn eigen_clamped(s11: f64, s12: f64, s22: f64) -> (f64, f64, f64) {
    let (t1, t2, phi) = eigen_raw(s11, s12, s22);
    (t1.max(0.0), t2.max(0.0), phi)
}

fn eigen_raw(s11: f64, s12: f64, s22: f64) -> (f64, f64, f64) {
    let half_tr = 0.5 * (s11 + s22);
    let diff = 0.5 * (s11 - s22);
    let disc = diff.hypot(s12);
    let phi = if s12.abs() < 1e-12 && (s11 - s22).abs() < 1e-12 {
        0.0
    } else {
        let a = 0.5 * (2.0 * s12).atan2(s11 - s22);
        // atan2 returns (-pi, pi]; halving keeps (-pi/2, pi/2].
        if a <= -std::f64::consts::FRAC_PI_2 {
            a + std::f64::consts::PI
        } else {
            a
        }
    };
    (half_tr + disc, half_tr - disc, phi)
}

/// Closed-form eigendecomposition of the symmetric matrix `[s11 s12; s12 s22]`.
///
/// Returns `(t1, t2, phi)` with `t1 >= t2 >= 0` and `phi` the angle of the
/// `t1` eigenvector in `(-pi/2, pi/2]`. Isotropic tensors get `phi = 0`.
/// Small negative eigenvalues from round-off are clamped to zero; anything
/// more negative than the tolerance is rejected.
pub fn eigendecompose_2x2(s11: f64, s12: f64, s22: f64) -> Result<(f64, f64, f64)> {
    let (t1, t2, phi) = eigen_raw(s11, s12, s22);
    let tol = 1e-9_f64.max(1e-12 * (s11.abs() + s22.abs()));
    if t2 < -tol || !t1.is_finite() {
        return Err(Error::domain(format!(
            "tensor [{s11}, {s12}; {s12}, {s22}] is not positive semi-definite"
        )));
    }
    Ok((t1.max(0.0), t2.max(0.0), phi))
}

/// Image-basis vector expressed in the eigenbasis rotated by `phi`.
#[inline]
pub fn to_eigenbasis(y: &Vector2<f64>, phi: f64) -> Vector2<f64> {
    let (s, c) = phi.sin_cos();
    Vector2::new(c * y.x + s * y.y, -s * y.x + c * y.y)
}

#[inline]
pub fn from_eigenbasis(y: &Vector2<f64>, phi: f64) -> Vector2<f64> {
    let (s, c) = phi.sin_cos();
    Vector2::new(c * y.x - s * y.y, s * y.x + c * y.y)
}

/// Up to `max_count` well-textured pixels, strongest smaller eigenvalue
/// first, at least `min_distance` apart and `margin` pixels from the border.
/// Pixels below `quality` times the strongest response are skipped.
pub fn good_features(
    structure: &StructureField,
    max_count: usize,
    min_distance: f64,
    margin: usize,
    quality: f64,
) -> Vec<Vector2<f64>> {
    let (w, h) = (structure.width, structure.height);
    let mut cand: Vec<usize> = (0..w * h)
        .filter(|&i| {
            let (x, y) = (i % w, i / w);
            x >= margin && y >= margin && x + margin < w && y + margin < h
        })
        .collect();
    let best = cand.iter().map(|&i| structure.t2[i]).fold(0.0, f64::max);
    if best <= 0.0 {
        return Vec::new();
    }
    cand.retain(|&i| structure.t2[i] >= quality * best);
    cand.sort_by(|&a, &b| structure.t2[b].total_cmp(&structure.t2[a]).then(a.cmp(&b)));
    let d2 = min_distance * min_distance;
    let mut out: Vec<Vector2<f64>> = Vec::new();
    for i in cand {
        if out.len() >= max_count {
            break;
        }
        let p = Vector2::new((i % w) as f64, (i / w) as f64);
        if out.iter().all(|q| (q - p).norm_squared() >= d2) {
            out.push(p);
        }
    }
    out
}
