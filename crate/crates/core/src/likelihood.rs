//! Texture-scheduled Laplace-Cauchy mixture (LCM) likelihood.
//!
//! A flow error component `z` (pixels/frame, expressed in the structure
//! tensor eigenbasis) is modelled by
//!
//! ```text
//! q(z; beta, gamma, w_L) = w_L * a/2 * exp(-a |z|) + (1 - w_L) * gamma / (pi (gamma^2 + z^2)),
//! a = tan(pi * beta / 2)
//! ```
//!
//! a Laplace peak whose log-density slope is parametrised by the normalised
//! angle `beta`, mixed with a Cauchy component for the heavy tails. The
//! parameters are scheduled on texture `t` (a structure tensor eigenvalue)
//! through a [`ParamLut`]: a handful of knots in texture with `(beta, gamma,
//! w_L)` entries, linearly interpolated in `log10(t)`.
//!
//! The LUT is calibrated by minimising the mean negative log-likelihood of a
//! [`TrainingSet`] of `(z, t)` pairs with [`fit_lut`]. The optimiser is
//! derivative-free Nelder-Mead on the unconstrained reparametrisation
//! `(logit beta, ln gamma, logit w_L)`, so no analytic gradient is involved.
//!
//! Goodness of fit is measured with the one-sample Kolmogorov-Smirnov
//! statistic ([`ks_statistic`]); [`baseline_fits`] provides the Gaussian and
//! log-logistic comparison families.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StarvedKnot};
use crate::optim::NelderMead;

/// Textures below this floor are treated as equal to it before taking logs.
pub const TEXTURE_FLOOR: f64 = 1e-3;

/// Minimum number of samples each knot's texture bin must hold for fitting.
pub const MIN_BIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcmParams {
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "w_l")]
    pub w_l: f64,
}

impl LcmParams {
    pub fn new(beta: f64, gamma: f64, w_l: f64) -> Result<Self> {
        let p = LcmParams { beta, gamma, w_l };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0
            && self.beta < 1.0
            && self.gamma > 0.0
            && self.gamma.is_finite()
            && (0.0..=1.0).contains(&self.w_l);
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid LCM parameters {self:?}")))
        }
    }

    /// Rate `tan(pi beta / 2)` of the Laplace component.
    pub fn laplace_rate(&self) -> f64 {
        (FRAC_PI_2 * self.beta).tan()
    }

    pub fn density(&self) -> LcmDensity {
        LcmDensity::new(self)
    }

    fn to_unconstrained(self) -> [f64; 3] {
        [logit(self.beta), self.gamma.ln(), logit(self.w_l)]
    }

    fn from_unconstrained(u: &[f64]) -> Self {
        LcmParams {
            beta: sigmoid(u[0]),
            gamma: u[1].exp(),
            w_l: sigmoid(u[2]),
        }
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Precomputed constants of one LCM density, for hot loops.
#[derive(Debug, Clone, Copy)]
pub struct LcmDensity {
    rate: f64,
    laplace_coef: f64,
    cauchy_coef: f64,
    gamma: f64,
    gamma2: f64,
    w_l: f64,
}

impl LcmDensity {
    pub fn new(p: &LcmParams) -> Self {
        let rate = p.laplace_rate();
        LcmDensity {
            rate,
            laplace_coef: 0.5 * p.w_l * rate,
            cauchy_coef: (1.0 - p.w_l) * p.gamma / PI,
            gamma: p.gamma,
            gamma2: p.gamma * p.gamma,
            w_l: p.w_l,
        }
    }

    #[inline]
    pub fn pdf(&self, x: f64) -> f64 {
        self.laplace_coef * (-x.abs() * self.rate).exp() + self.cauchy_coef / (self.gamma2 + x * x)
    }

    /// `ln pdf(x)`, stable far into the tails.
    #[inline]
    pub fn log_pdf(&self, x: f64) -> f64 {
        let p = self.pdf(x);
        if p > 1e-280 {
            return p.ln();
        }
        let a = if self.laplace_coef > 0.0 {
            self.laplace_coef.ln() - x.abs() * self.rate
        } else {
            f64::NEG_INFINITY
        };
        let b = if self.cauchy_coef > 0.0 {
            self.cauchy_coef.ln() - (self.gamma2 + x * x).ln()
        } else {
            f64::NEG_INFINITY
        };
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }

    #[inline]
    pub fn cdf(&self, x: f64) -> f64 {
        let lap = if x < 0.0 {
            0.5 * (x * self.rate).exp()
        } else {
            1.0 - 0.5 * (-x * self.rate).exp()
        };
        let cau = 0.5 + (x / self.gamma).atan() / PI;
        self.w_l * lap + (1.0 - self.w_l) * cau
    }
}

pub fn lcm_pdf(x: f64, theta: &LcmParams) -> Result<f64> {
    theta.validate()?;
    Ok(LcmDensity::new(theta).pdf(x))
}

pub fn lcm_cdf(x: f64, theta: &LcmParams) -> Result<f64> {
    theta.validate()?;
    Ok(LcmDensity::new(theta).cdf(x))
}

/// Half-width `c` of the symmetric interval `[-c, c]` holding probability `level`.
pub fn lcm_confidence_halfwidth(theta: &LcmParams, level: f64) -> Result<f64> {
    theta.validate()?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let d = LcmDensity::new(theta);
    let target = 0.5 * (1.0 + level);
    // The mixture quantile never exceeds the larger component quantile.
    let laplace_q = -(1.0 - level).ln() / d.rate;
    let cauchy_q = theta.gamma * (FRAC_PI_2 * level).tan();
    let mut lo = 0.0;
    let mut hi = match (theta.w_l >= 1.0, theta.w_l <= 0.0) {
        (true, _) => laplace_q,
        (_, true) => cauchy_q,
        _ => laplace_q.max(cauchy_q),
    } * (1.0 + 1e-12)
        + f64::MIN_POSITIVE;
    while d.cdf(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if d.cdf(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Texture-indexed table of LCM parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLut {
    knots: Vec<f64>,
    entries: Vec<LcmParams>,
    log_knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LutDocument {
    knots: Vec<f64>,
    entries: Vec<LcmParams>,
    texture_units: String,
}

const TEXTURE_UNITS: &str = "intensity2_per_pixel2";

impl ParamLut {
    pub fn new(knots: Vec<f64>, entries: Vec<LcmParams>) -> Result<Self> {
        if knots.is_empty() || knots.len() != entries.len() {
            return Err(Error::domain(
                "LUT needs one entry per knot and at least one knot",
            ));
        }
        if knots.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::domain("LUT knots must be positive"));
        }
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("LUT knots must be strictly increasing"));
        }
        for e in &entries {
            e.validate()?;
        }
        let log_knots = knots.iter().map(|k| k.log10()).collect();
        Ok(ParamLut {
            knots,
            entries,
            log_knots,
        })
    }

    pub fn single(knot: f64, entry: LcmParams) -> Result<Self> {
        ParamLut::new(vec![knot], vec![entry])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn entries(&self) -> &[LcmParams] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// Knot indices and the weight on the upper one for texture `t`.
    fn bracket(&self, t: f64) -> (usize, usize, f64) {
        let lt = t.max(TEXTURE_FLOOR).log10();
        let m = self.log_knots.len();
        if lt <= self.log_knots[0] {
            return (0, 0, 0.0);
        }
        if lt >= self.log_knots[m - 1] {
            return (m - 1, m - 1, 0.0);
        }
        let hi = self.log_knots.partition_point(|k| *k <= lt);
        let lo = hi - 1;
        let w = (lt - self.log_knots[lo]) / (self.log_knots[hi] - self.log_knots[lo]);
        (lo, hi, w)
    }

    pub fn lookup(&self, t: f64) -> LcmParams {
        let (lo, hi, w) = self.bracket(t);
        interpolate(&self.entries[lo], &self.entries[hi], w)
    }

    /// Texture bins aligned to the midpoints between knots in log space.
    /// The first bin starts at zero and the last one is unbounded.
    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let m = self.knots.len();
        (0..m)
            .map(|i| {
                let lo = if i == 0 {
                    0.0
                } else {
                    10f64.powf(0.5 * (self.log_knots[i - 1] + self.log_knots[i]))
                };
                let hi = if i + 1 == m {
                    f64::INFINITY
                } else {
                    10f64.powf(0.5 * (self.log_knots[i] + self.log_knots[i + 1]))
                };
                (lo, hi)
            })
            .collect()
    }

    /// Index of the bin holding texture `t`.
    pub fn bin_index(&self, t: f64) -> usize {
        let lt = t.max(TEXTURE_FLOOR).log10();
        self.log_knots
            .windows(2)
            .filter(|w| lt >= 0.5 * (w[0] + w[1]))
            .count()
    }

    pub fn to_json(&self) -> String {
        let doc = LutDocument {
            knots: self.knots.clone(),
            entries: self.entries.clone(),
            texture_units: TEXTURE_UNITS.into(),
        };
        serde_json::to_string_pretty(&doc).expect("LUT serialises")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, String> {
        let doc: LutDocument = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if doc.texture_units != TEXTURE_UNITS {
            return Err(format!("unsupported texture units {:?}", doc.texture_units));
        }
        ParamLut::new(doc.knots, doc.entries).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ParamLut::from_json(&s).map_err(|r| Error::format(path, r))
    }
}

#[inline]
fn interpolate(a: &LcmParams, b: &LcmParams, w: f64) -> LcmParams {
    if w == 0.0 {
        return *a;
    }
    LcmParams {
        beta: (1.0 - w) * a.beta + w * b.beta,
        gamma: (1.0 - w) * a.gamma + w * b.gamma,
        w_l: (1.0 - w) * a.w_l + w * b.w_l,
    }
}

pub fn lut_lookup(t: f64, lut: &ParamLut) -> LcmParams {
    lut.lookup(t)
}

/// Flattened eigenbasis error components `z` and their texture `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub z: Vec<f64>,
    pub t: Vec<f64>,
}

impl TrainingSet {
    pub fn new(z: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if z.len() != t.len() {
            return Err(Error::domain("z and t must have equal length"));
        }
        if z.iter().any(|v| !v.is_finite()) || t.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::domain("training pairs need finite z and t >= 0"));
        }
        Ok(TrainingSet { z, t })
    }

    pub fn push(&mut self, z: f64, t: f64) {
        self.z.push(z);
        self.t.push(t);
    }

    pub fn extend(&mut self, other: &TrainingSet) {
        self.z.extend_from_slice(&other.z);
        self.t.extend_from_slice(&other.t);
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

const CHUNK: usize = 4096;

/// Mean negative log-likelihood of the data under the LUT.
///
/// Partial sums are taken over fixed-size chunks and then added in chunk
/// order, so the result does not depend on the thread count.
pub fn nll_cost(lut: &ParamLut, data: &TrainingSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("NLL of an empty training set"));
    }
    let partial: Vec<f64> = data
        .z
        .par_chunks(CHUNK)
        .zip(data.t.par_chunks(CHUNK))
        .map(|(zs, ts)| {
            zs.iter()
                .zip(ts)
                .map(|(z, t)| -LcmDensity::new(&lut.lookup(*t)).log_pdf(*z))
                .sum::<f64>()
        })
        .collect();
    Ok(partial.iter().sum::<f64>() / data.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_sweeps: usize,
    pub min_bin_samples: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 5,
            seed: 0,
            max_sweeps: 6,
            min_bin_samples: MIN_BIN_SAMPLES,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LutFit {
    pub lut: ParamLut,
    pub initial_cost: f64,
    pub cost: f64,
    /// Cost after initialisation and after every knot update, non-increasing.
    pub history: Vec<f64>,
}

/// `n` knots spaced evenly in `log10` between the 1st and 99th percentiles
/// of the positive textures in the data.
pub fn default_knots(data: &TrainingSet, n: usize) -> Result<Vec<f64>> {
    let mut ts: Vec<f64> = data
        .t
        .iter()
        .copied()
        .filter(|t| *t > TEXTURE_FLOOR)
        .collect();
    if ts.is_empty() || n == 0 {
        return Err(Error::domain("no textured samples to place knots"));
    }
    ts.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&ts, 0.01).log10();
    let hi = quantile_sorted(&ts, 0.99).log10();
    if n == 1 || hi - lo < 1e-9 {
        return Ok(vec![10f64.powf(0.5 * (lo + hi))]);
    }
    Ok((0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect())
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

/// Robust starting point from a bin of error components.
fn initial_params(z: &[f64]) -> LcmParams {
    let mut a: Vec<f64> = z.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    let median = quantile_sorted(&a, 0.5).max(1e-6);
    let q95 = quantile_sorted(&a, 0.95).max(1e-6);
    // Laplace: median |z| = ln 2 / rate. Cauchy: P(|z| < q) = 2/pi atan(q / gamma).
    let rate = LN_2 / median;
    let beta = (rate.atan() / FRAC_PI_2).clamp(1e-3, 1.0 - 1e-3);
    let gamma = (q95 / (FRAC_PI_2 * 0.95).tan()).max(1e-6);
    LcmParams {
        beta,
        gamma,
        w_l: 0.8,
    }
}

/// Per-sample interpolation bracket against a LUT's knots.
struct Bracketed {
    lo: Vec<u32>,
    hi: Vec<u32>,
    w: Vec<f64>,
}

/// Calibrates a LUT on the given knots by minimising [`nll_cost`].
///
/// Knots are updated one at a time: each knot's three parameters are
/// minimised by Nelder-Mead over the samples it influences, holding the
/// other knots fixed, and sweeps repeat until the cost stops improving. In
/// the first sweep every knot is additionally restarted `restarts` times
/// from random perturbations of its current value and the best result kept.
pub fn fit_lut(data: &TrainingSet, knots: &[f64], opts: &FitOptions) -> Result<LutFit> {
    if data.is_empty() {
        return Err(Error::Calibration(
            knots
                .iter()
                .map(|k| StarvedKnot { knot: *k, count: 0 })
                .collect(),
        ));
    }
    let provisional = ParamLut::new(
        knots.to_vec(),
        vec![
            LcmParams {
                beta: 0.5,
                gamma: 1.0,
                w_l: 0.5
            };
            knots.len()
        ],
    )?;
    let m = knots.len();
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); m];
    for (z, t) in data.z.iter().zip(&data.t) {
        bins[provisional.bin_index(*t)].push(*z);
    }
    let starved: Vec<StarvedKnot> = bins
        .iter()
        .zip(knots)
        .filter(|(b, _)| b.len() < opts.min_bin_samples)
        .map(|(b, k)| StarvedKnot {
            knot: *k,
            count: b.len(),
        })
        .collect();
    if !starved.is_empty() {
        return Err(Error::Calibration(starved));
    }

    let mut entries: Vec<LcmParams> = bins.iter().map(|b| initial_params(b)).collect();

    let mut br = Bracketed {
        lo: Vec::with_capacity(data.len()),
        hi: Vec::with_capacity(data.len()),
        w: Vec::with_capacity(data.len()),
    };
    let mut influenced: Vec<Vec<u32>> = vec![Vec::new(); m];
    for (i, t) in data.t.iter().enumerate() {
        let (lo, hi, w) = provisional.bracket(*t);
        br.lo.push(lo as u32);
        br.hi.push(hi as u32);
        br.w.push(w);
        influenced[lo].push(i as u32);
        if hi != lo && w > 0.0 {
            influenced[hi].push(i as u32);
        }
    }

    let n = data.len() as f64;
    let total = |entries: &[LcmParams]| -> f64 {
        let lut = ParamLut::new(knots.to_vec(), entries.to_vec()).expect("feasible entries");
        nll_cost(&lut, data).expect("nonempty data")
    };
    let initial_cost = total(&entries);
    let mut cost = initial_cost;
    let mut history = vec![cost];

    let nm = NelderMead {
        max_evals: 600,
        f_tol_abs: 1e-10,
        f_tol_rel: 1e-12,
        x_tol: 1e-7,
    };

    for sweep in 0..opts.max_sweeps {
        let before = cost;
        for j in 0..m {
            let idx = &influenced[j];
            let block = |cand: &LcmParams, entries: &[LcmParams]| -> f64 {
                let partial: Vec<f64> = idx
                    .par_chunks(CHUNK)
                    .map(|chunk| {
                        chunk
                            .iter()
                            .map(|&i| {
                                let i = i as usize;
                                let (lo, hi) = (br.lo[i] as usize, br.hi[i] as usize);
                                let a = if lo == j { cand } else { &entries[lo] };
                                let b = if hi == j { cand } else { &entries[hi] };
                                let p = interpolate(a, b, br.w[i]);
                                -LcmDensity::new(&p).log_pdf(data.z[i])
                            })
                            .sum::<f64>()
                    })
                    .collect();
                partial.iter().sum::<f64>()
            };
            let start = entries[j].to_unconstrained();
            let objective = |u: &[f64]| block(&LcmParams::from_unconstrained(u), &entries);
            let current = objective(&start);
            let restarts = if sweep == 0 { opts.restarts } else { 0 };
            let results: Vec<(f64, Vec<f64>)> = (0..=restarts)
                .into_par_iter()
                .map(|r| {
                    let mut x0 = start;
                    if r > 0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            opts.seed
                                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                                .wrapping_add((j * 1000 + r) as u64),
                        );
                        for v in x0.iter_mut() {
                            *v += rng.random_range(-1.5..1.5);
                        }
                    }
                    let res = nm.minimize(objective, &x0, &[0.4, 0.4, 0.4]);
                    (res.f, res.x)
                })
                .collect();
            let (best_f, best_x) = results
                .into_iter()
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            if best_f < current {
                let cand = LcmParams::from_unconstrained(&best_x);
                if cand.validate().is_ok() {
                    entries[j] = cand;
                    cost += (best_f - current) / n;
                }
            }
            history.push(cost);
        }
        // Re-anchor the running total to guard against accumulated round-off.
        cost = total(&entries);
        if let Some(last) = history.last_mut() {
            *last = cost;
        }
        if before - cost <= 1e-9 * before.abs().max(1.0) {
            break;
        }
    }

    let lut = ParamLut::new(knots.to_vec(), entries)?;
    Ok(LutFit {
        lut,
        initial_cost,
        cost,
        history,
    })
}

/// One-sample Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("K-S statistic of an empty sample"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    Ok(xs.iter().enumerate().fold(0.0f64, |acc, (i, x)| {
        let f = cdf(*x);
        let above = (i + 1) as f64 / n - f;
        let below = f - i as f64 / n;
        acc.max(above).max(below)
    }))
}

/// K-S statistic of probability-integral-transformed values against U(0, 1).
pub fn ks_uniform(u: &[f64]) -> Result<f64> {
    ks_statistic(u, |v| v.clamp(0.0, 1.0))
}

/// K-S statistic of heteroscedastic data, each `z` judged under the LUT
/// parameters at its own texture.
pub fn ks_lcm(lut: &ParamLut, data: &TrainingSet) -> Result<f64> {
    let u: Vec<f64> = data
        .z
        .iter()
        .zip(&data.t)
        .map(|(z, t)| LcmDensity::new(&lut.lookup(*t)).cdf(*z))
        .collect();
    ks_uniform(&u)
}

pub fn normal_cdf(x: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / (sigma * std::f64::consts::SQRT_2)))
}

/// Log-logistic distribution on magnitudes, scale `alpha` and shape `shape`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogistic {
    pub alpha: f64,
    pub shape: f64,
}

impl LogLogistic {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            1.0 / (1.0 + (x / self.alpha).powf(-self.shape))
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let r = x / self.alpha;
        let lr = r.ln();
        self.shape.ln() - self.alpha.ln() + (self.shape - 1.0) * lr
            - 2.0 * (self.shape * lr).exp().ln_1p()
    }
}

/// Gaussian and log-logistic fits to one texture bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineFit {
    /// Zero-mean Gaussian, `sigma^2 = mean(z^2)`.
    pub gauss_sigma: f64,
    /// Maximum-likelihood log-logistic on `|z|`.
    pub loglogistic: LogLogistic,
    /// Every sample was zero; the fits are meaningless.
    pub degenerate: bool,
}

impl BaselineFit {
    pub fn ks_gauss(&self, z: &[f64]) -> Result<f64> {
        ks_statistic(z, |x| normal_cdf(x, self.gauss_sigma))
    }

    pub fn ks_loglogistic(&self, z: &[f64]) -> Result<f64> {
        let mags: Vec<f64> = z.iter().map(|v| v.abs()).collect();
        ks_statistic(&mags, |x| self.loglogistic.cdf(x))
    }
}

/// Magnitudes below this are lifted to it so the log-logistic likelihood stays finite.
const MAGNITUDE_FLOOR: f64 = 1e-12;

pub fn baseline_fits(z: &[f64]) -> Result<BaselineFit> {
    if z.is_empty() {
        return Err(Error::domain("baseline fit of an empty bin"));
    }
    let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    if var == 0.0 {
        return Ok(BaselineFit {
            gauss_sigma: 0.0,
            loglogistic: LogLogistic {
                alpha: MAGNITUDE_FLOOR,
                shape: 1.0,
            },
            degenerate: true,
        });
    }
    let mut mags: Vec<f64> = z.iter().map(|v| v.abs().max(MAGNITUDE_FLOOR)).collect();
    mags.sort_by(f64::total_cmp);
    let alpha0 = quantile_sorted(&mags, 0.5);
    let spread = (quantile_sorted(&mags, 0.75) / quantile_sorted(&mags, 0.25)).ln();
    let shape0 = if spread > 1e-9 {
        (2.0 * 3f64.ln() / spread).clamp(0.05, 50.0)
    } else {
        1.0
    };
    let logs: Vec<f64> = mags.iter().map(|m| m.ln()).collect();
    let nll = |u: &[f64]| {
        let (la, k) = (u[0], u[1].exp());
        let partial: Vec<f64> = logs
            .par_chunks(CHUNK)
            .map(|c| {
                c.iter()
                    .map(|lx| {
                        let lr = lx - la;
                        -(k.ln() - la + (k - 1.0) * lr - 2.0 * (k * lr).exp().ln_1p())
                    })
                    .sum::<f64>()
            })
            .collect();
        partial.iter().sum::<f64>()
    };
    let res = NelderMead {
        max_evals: 800,
        f_tol_abs: 1e-10,
        f_tol_rel: 1e-12,
        x_tol: 1e-8,
    }
    .minimize(nll, &[alpha0.ln(), shape0.ln()], &[0.3, 0.3]);
    Ok(BaselineFit {
        gauss_sigma: var.sqrt(),
        loglogistic: LogLogistic {
            alpha: res.x[0].exp(),
            shape: res.x[1].exp(),
        },
        degenerate: false,
    })
}

/// Goodness-of-fit summary of one texture bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinReport {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub median_abs: f64,
    pub knot: f64,
    pub entry: LcmParams,
    pub ks_lcm: f64,
    pub ks_gauss: f64,
    pub ks_loglogistic: f64,
}

/// Splits the data into the LUT's bins and compares LCM, Gaussian and
/// log-logistic fits in each. Bins with fewer than `min_samples` samples are
/// reported with NaN statistics.
pub fn bin_reports(lut: &ParamLut, data: &TrainingSet, min_samples: usize) -> Vec<BinReport> {
    let edges = lut.bin_edges();
    let mut bins: Vec<TrainingSet> = vec![TrainingSet::default(); edges.len()];
    for (z, t) in data.z.iter().zip(&data.t) {
        bins[lut.bin_index(*t)].push(*z, *t);
    }
    bins.iter()
        .zip(&edges)
        .enumerate()
        .map(|(i, (bin, &(lo, hi)))| {
            let n = bin.len();
            let median_abs = if n == 0 {
                f64::NAN
            } else {
                let mut a: Vec<f64> = bin.z.iter().map(|v| v.abs()).collect();
                a.sort_by(f64::total_cmp);
                quantile_sorted(&a, 0.5)
            };
            let (ks_lcm_v, ks_g, ks_ll) = if n >= min_samples.max(1) {
                let base = baseline_fits(&bin.z);
                match base {
                    Ok(b) if !b.degenerate => (
                        ks_lcm(lut, bin).unwrap_or(f64::NAN),
                        b.ks_gauss(&bin.z).unwrap_or(f64::NAN),
                        b.ks_loglogistic(&bin.z).unwrap_or(f64::NAN),
                    ),
                    _ => (ks_lcm(lut, bin).unwrap_or(f64::NAN), f64::NAN, f64::NAN),
                }
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
            BinReport {
                lo,
                hi,
                n,
                median_abs,
                knot: lut.knots()[i],
                entry: lut.entries()[i],
                ks_lcm: ks_lcm_v,
                ks_gauss: ks_g,
                ks_loglogistic: ks_ll,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn p(beta: f64, gamma: f64, w_l: f64) -> LcmParams {
        LcmParams::new(beta, gamma, w_l).unwrap()
    }

    /// Adaptive Simpson quadrature, independent of the closed-form CDF.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(
            f: &dyn Fn(f64) -> f64,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn pdf_examples() {
        assert_abs_diff_eq!(
            lcm_pdf(0.0, &p(0.5, 3.0, 1.0)).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            lcm_pdf(0.0, &p(0.3, 1.0, 0.0)).unwrap(),
            1.0 / PI,
            epsilon = 1e-15
        );
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(LcmParams::new(1.0, 1.0, 0.5).is_err());
        assert!(LcmParams::new(0.5, 0.0, 0.5).is_err());
        assert!(LcmParams::new(0.5, 1.0, 1.1).is_err());
        let bad = LcmParams {
            beta: 0.0,
            gamma: 1.0,
            w_l: 0.5,
        };
        assert!(lcm_pdf(0.0, &bad).is_err());
        assert!(lcm_cdf(0.0, &bad).is_err());
    }

    #[test]
    fn components_reduce_exactly() {
        for x in [-7.0f64, -0.3, 0.0, 0.01, 2.5, 40.0] {
            let lap = p(0.7, 2.0, 1.0);
            let a = lap.laplace_rate();
            let expect = 0.5 * a * (-x.abs() * a).exp();
            assert!((lcm_pdf(x, &lap).unwrap() - expect).abs() <= 1e-15);
            let cau = p(0.7, 2.0, 0.0);
            let expect = 2.0 / (PI * (4.0 + x * x));
            assert!((lcm_pdf(x, &cau).unwrap() - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn pdf_integrates_to_one() {
        for theta in [p(0.6, 0.1, 0.8), p(0.1, 10.0, 0.5), p(0.9, 0.01, 0.2)] {
            let d = theta.density();
            let f = |x: f64| d.pdf(x);
            let l = 1e6;
            let body = simpson(&f, -1.0, 1.0, 1e-12)
                + 2.0 * (simpson(&f, 1.0, 100.0, 1e-12) + simpson(&f, 100.0, l, 1e-12));
            // Beyond +-L only the Cauchy tail is left: 2 (1-w) gamma / (pi L).
            let tail = 2.0 * (1.0 - theta.w_l) * theta.gamma / (PI * l);
            assert!(
                (body + tail - 1.0).abs() < 1e-6,
                "{theta:?}: {}",
                body + tail
            );
        }
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(lcm_cdf(0.0, &p(0.2, 0.4, 0.3)).unwrap(), 0.5);
        assert_abs_diff_eq!(
            lcm_cdf(1.0, &p(0.2, 1.0, 0.0)).unwrap(),
            0.75,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cdf_matches_quadrature() {
        let theta = p(0.6, 0.1, 0.8);
        let d = theta.density();
        let f = |x: f64| d.pdf(x);
        for i in 0..100 {
            let x = -20.0 + 40.0 * i as f64 / 99.0;
            let q = if x >= 0.0 {
                0.5 + simpson(&f, 0.0, x, 1e-13)
            } else {
                0.5 - simpson(&f, x, 0.0, 1e-13)
            };
            assert!((d.cdf(x) - q).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn confidence_examples() {
        let c = lcm_confidence_halfwidth(&p(0.3, 1.0, 0.0), 0.5).unwrap();
        assert_abs_diff_eq!(c, 1.0, epsilon = 1e-9);
        let c = lcm_confidence_halfwidth(&p(0.5, 1.0, 1.0), 0.9).unwrap();
        assert_abs_diff_eq!(c, 10f64.ln(), epsilon = 1e-9);
        assert!(lcm_confidence_halfwidth(&p(0.5, 1.0, 1.0), 1.0).is_err());
    }

    fn lut3() -> ParamLut {
        ParamLut::new(
            vec![1.0, 100.0, 10_000.0],
            vec![p(0.2, 2.0, 0.5), p(0.5, 0.5, 0.7), p(0.8, 0.1, 0.9)],
        )
        .unwrap()
    }

    #[test]
    fn lookup_is_exact_at_knots() {
        let lut = lut3();
        for (k, e) in lut.knots().iter().zip(lut.entries()) {
            assert_eq!(lut.lookup(*k), *e);
        }
    }

    #[test]
    fn lookup_midpoint_and_clamping() {
        let lut = lut3();
        let m = lut.lookup(10.0);
        assert_abs_diff_eq!(m.beta, 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(m.gamma, 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m.w_l, 0.6, epsilon = 1e-12);
        assert_eq!(lut.lookup(0.0), lut.entries()[0]);
        assert_eq!(lut.lookup(0.5), lut.entries()[0]);
        assert_eq!(lut.lookup(1e9), lut.entries()[2]);
    }

    #[test]
    fn lut_rejects_unsorted_knots() {
        assert!(ParamLut::new(vec![2.0, 1.0], vec![p(0.5, 1.0, 0.5); 2]).is_err());
        assert!(ParamLut::new(vec![0.0], vec![p(0.5, 1.0, 0.5)]).is_err());
        assert!(ParamLut::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn lut_json_layout() {
        let lut = lut3();
        let v: serde_json::Value = serde_json::from_str(&lut.to_json()).unwrap();
        assert_eq!(v["texture_units"], "intensity2_per_pixel2");
        assert_eq!(v["knots"][1], 100.0);
        assert_eq!(v["entries"][2]["w_l"], 0.9);
        assert_eq!(v["entries"][0]["beta"], 0.2);
        assert_eq!(v["entries"][0]["gamma"], 2.0);
        assert_eq!(ParamLut::from_json(&lut.to_json()).unwrap(), lut);
    }

    #[test]
    fn bins_follow_knot_midpoints() {
        let lut = lut3();
        let e = lut.bin_edges();
        assert_eq!(e[0].0, 0.0);
        assert_abs_diff_eq!(e[0].1, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e[1].1, 1000.0, epsilon = 1e-9);
        assert!(e[2].1.is_infinite());
        assert_eq!(lut.bin_index(0.0), 0);
        assert_eq!(lut.bin_index(9.0), 0);
        assert_eq!(lut.bin_index(11.0), 1);
        assert_eq!(lut.bin_index(5000.0), 2);
    }

    #[test]
    fn nll_examples() {
        let lut = ParamLut::single(5.0, p(0.5, 1.0, 0.0)).unwrap();
        let data = TrainingSet::new(vec![0.0], vec![123.0]).unwrap();
        assert_abs_diff_eq!(nll_cost(&lut, &data).unwrap(), PI.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(PI.ln(), 1.14473, epsilon = 1e-5);
        assert!(nll_cost(&lut, &TrainingSet::default()).is_err());
    }

    #[test]
    fn nll_matches_reference_and_is_a_mean() {
        let lut = lut3();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = TrainingSet::default();
        for _ in 0..1000 {
            data.push(
                rng.random_range(-5.0..5.0),
                10f64.powf(rng.random_range(-1.0..5.0)),
            );
        }
        // Naive reference: explicit bracket search and the textbook formula.
        let mut acc = 0.0;
        for (z, t) in data.z.iter().zip(&data.t) {
            let lt = t.max(TEXTURE_FLOOR).log10();
            let ks: Vec<f64> = lut.knots().iter().map(|k| k.log10()).collect();
            let e = lut.entries();
            let th = if lt <= ks[0] {
                e[0]
            } else if lt >= ks[2] {
                e[2]
            } else {
                let mut i = 0;
                while !(lt >= ks[i] && lt <= ks[i + 1]) {
                    i += 1;
                }
                let w = (lt - ks[i]) / (ks[i + 1] - ks[i]);
                LcmParams {
                    beta: e[i].beta + w * (e[i + 1].beta - e[i].beta),
                    gamma: e[i].gamma + w * (e[i + 1].gamma - e[i].gamma),
                    w_l: e[i].w_l + w * (e[i + 1].w_l - e[i].w_l),
                }
            };
            let a = (PI / 2.0 * th.beta).tan();
            let q = 0.5 * th.w_l * a * (-z.abs() * a).exp()
                + (1.0 - th.w_l) * th.gamma / (PI * (th.gamma * th.gamma + z * z));
            acc -= q.ln();
        }
        let reference = acc / 1000.0;
        let j = nll_cost(&lut, &data).unwrap();
        assert!((j - reference).abs() < 1e-12, "{j} vs {reference}");

        let mut doubled = data.clone();
        doubled.extend(&data);
        assert!((nll_cost(&lut, &doubled).unwrap() - j).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_is_finite_far_out() {
        let d = p(0.9, 0.01, 1.0).density();
        let v = d.log_pdf(1e4);
        assert!(v.is_finite() && v < -1e4);
    }

    #[test]
    fn fit_reports_starved_knots() {
        let data = TrainingSet::new(vec![0.1; 150], vec![1.0; 150]).unwrap();
        match fit_lut(&data, &[1.0, 1000.0], &FitOptions::default()) {
            Err(Error::Calibration(s)) => {
                assert_eq!(s.len(), 1);
                assert_eq!(s[0].knot, 1000.0);
                assert_eq!(s[0].count, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn sample_lcm(theta: &LcmParams, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        if rng.random::<f64>() < theta.w_l {
            let e = -(1.0 - u).ln() / theta.laplace_rate();
            if rng.random::<bool>() {
                e
            } else {
                -e
            }
        } else {
            theta.gamma * (PI * (u - 0.5)).tan()
        }
    }

    #[test]
    fn fit_recovers_two_populations() {
        let a = p(0.6, 0.1, 0.8);
        let b = p(0.3, 1.0, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = TrainingSet::default();
        for _ in 0..20_000 {
            data.push(sample_lcm(&a, &mut rng), 10.0);
            data.push(sample_lcm(&b, &mut rng), 1000.0);
        }
        let fit = fit_lut(&data, &[10.0, 1000.0], &FitOptions::default()).unwrap();
        assert!(fit.cost <= fit.initial_cost);
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for (got, want) in fit.lut.entries().iter().zip([a, b]) {
            assert!((got.beta - want.beta).abs() < 0.05, "{got:?}");
            assert!((got.w_l - want.w_l).abs() < 0.05, "{got:?}");
            assert!((got.gamma / want.gamma - 1.0).abs() < 0.25, "{got:?}");
        }
        let truth = ParamLut::new(vec![10.0, 1000.0], vec![a, b]).unwrap();
        assert!(fit.cost <= nll_cost(&truth, &data).unwrap() + 1e-3);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[0.0], |x| normal_cdf(x, 1.0)).unwrap(), 0.5);
        assert!(ks_statistic(&[], |x| x).is_err());
        let n = 999;
        let grid: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let d = ks_uniform(&grid).unwrap();
        assert!(d <= 1.0 / (n + 1) as f64 + 1e-12, "{d}");
    }

    #[test]
    fn ks_is_invariant_to_monotone_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d1 = ks_statistic(&xs, |x| normal_cdf(x, 1.3)).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let d2 = ks_statistic(&ys, |y| normal_cdf(y.ln(), 1.3)).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn gaussian_baseline_recovers_sigma() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nrm = Normal::new(0.0, 2.0).unwrap();
        let z: Vec<f64> = (0..100_000).map(|_| nrm.sample(&mut rng)).collect();
        let fit = baseline_fits(&z).unwrap();
        assert!((fit.gauss_sigma / 2.0 - 1.0).abs() < 0.02);
        assert!(fit.ks_gauss(&z).unwrap() < 0.01);
    }

    #[test]
    fn gaussian_loses_on_cauchy_data() {
        let theta = p(0.5, 0.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z: Vec<f64> = (0..20_000).map(|_| sample_lcm(&theta, &mut rng)).collect();
        let data = TrainingSet::new(z.clone(), vec![1.0; z.len()]).unwrap();
        let fit = fit_lut(&data, &[1.0], &FitOptions::default()).unwrap();
        let ks_l = ks_lcm(&fit.lut, &data).unwrap();
        let ks_g = baseline_fits(&z).unwrap().ks_gauss(&z).unwrap();
        assert!(ks_g > 5.0 * ks_l, "gauss {ks_g} lcm {ks_l}");
    }

    #[test]
    fn loglogistic_fit_on_loglogistic_data() {
        let truth = LogLogistic {
            alpha: 0.7,
            shape: 2.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = (0..20_000)
            .map(|_| {
                let u: f64 = rng.random_range(1e-9..1.0 - 1e-9);
                let m = truth.alpha * (u / (1.0 - u)).powf(1.0 / truth.shape);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let fit = baseline_fits(&z).unwrap();
        assert!(
            (fit.loglogistic.alpha / truth.alpha - 1.0).abs() < 0.05,
            "{fit:?}"
        );
        assert!(
            (fit.loglogistic.shape / truth.shape - 1.0).abs() < 0.05,
            "{fit:?}"
        );
        assert!(fit.ks_loglogistic(&z).unwrap() < 0.02);
    }

    #[test]
    fn all_zero_bin_is_degenerate() {
        assert!(baseline_fits(&[0.0; 50]).unwrap().degenerate);
        assert!(baseline_fits(&[]).is_err());
    }

    #[test]
    fn starved_bins_report_nan() {
        let lut = lut3();
        let data = TrainingSet::new(vec![0.1, -0.2], vec![100.0, 100.0]).unwrap();
        let r = bin_reports(&lut, &data, 100);
        assert_eq!(r[1].n, 2);
        assert!(r[1].ks_lcm.is_nan() && r[1].ks_gauss.is_nan());
    }

    proptest! {
        #[test]
        fn pdf_symmetric_and_cdf_antisymmetric(
            beta in 0.01..0.99f64, gamma in 0.01..10.0f64, w in 0.0..1.0f64, x in -50.0..50.0f64
        ) {
            let d = p(beta, gamma, w).density();
            prop_assert_eq!(d.pdf(x), d.pdf(-x));
            prop_assert!(d.pdf(x) > 0.0);
            prop_assert!((d.cdf(-x) - (1.0 - d.cdf(x))).abs() <= 1e-12);
        }

        #[test]
        fn confidence_recovers_level(
            beta in 0.05..0.95f64, gamma in 0.01..10.0f64, w in 0.0..1.0f64, level in 0.05..0.99f64
        ) {
            let theta = p(beta, gamma, w);
            let c = lcm_confidence_halfwidth(&theta, level).unwrap();
            let d = theta.density();
            prop_assert!((d.cdf(c) - d.cdf(-c) - level).abs() <= 1e-9);
        }

        #[test]
        fn lookup_is_continuous(t in 0.01..1e6f64) {
            let lut = lut3();
            let a = lut.lookup(t);
            let b = lut.lookup(t * (1.0 + 1e-9));
            prop_assert!((a.beta - b.beta).abs() < 1e-6);
            prop_assert!((a.gamma - b.gamma).abs() < 1e-6);
            prop_assert!((a.w_l - b.w_l).abs() < 1e-6);
        }
    }
}
