//! Maximum-likelihood ego-motion from a flow field with known depth.
//!
//! Each flow sample's residual against the flow predicted by a candidate
//! pose is rotated into that pixel's structure tensor eigenbasis, giving two
//! components `z1`, `z2` paired with textures `t1`, `t2`. Components are
//! treated as independent, so the likelihood of a pose is a product over
//! components of either a fixed-sigma Gaussian or the texture-scheduled LCM
//! density.
//!
//! Two robust estimators wrap the MLE. [`ransac_egomotion`] is the classic
//! Gaussian variant with a fixed pixel gate on whole vectors.
//! [`lcmsac_egomotion`] scores hypotheses by counting eigenbasis components
//! that fall inside the LCM confidence interval at their own texture and
//! refits with the LCM likelihood on those components only.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{pixel_to_ray_unchecked, relative_transform, CameraModel, DepthMap, Pose};
use crate::imaging::StructureField;
use crate::likelihood::{lcm_confidence_halfwidth, LcmDensity, ParamLut};
use crate::optim::NelderMead;

/// Gaussian sigma used by RANSAC, making its 0.5 px gate a 2-sigma gate.
pub const RANSAC_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, Copy)]
struct Sample {
    ray: Vector3<f64>,
    /// `rho * ray.z`, the homogeneous coordinate of the lifted point.
    h: f64,
    pixel: Vector2<f64>,
    flow: Vector2<f64>,
    cos: f64,
    sin: f64,
    t1: f64,
    t2: f64,
}

/// Flow samples of frame k-1 with their depth and eigenbasis, ready for
/// pose evaluation against the known pose of frame k-1.
#[derive(Debug, Clone)]
pub struct EgoProblem {
    pub prev: Pose,
    pub camera: CameraModel,
    samples: Vec<Sample>,
    excluded: usize,
}

impl EgoProblem {
    /// Invalid flow samples and samples without valid depth are dropped and
    /// counted in [`EgoProblem::excluded`].
    pub fn new(
        prev: Pose,
        flow: &FlowField,
        structure: &StructureField,
        depth: &DepthMap,
        camera: &CameraModel,
    ) -> Result<Self> {
        camera.validate()?;
        for (w, h) in [
            (structure.width, structure.height),
            (depth.width, depth.height),
        ] {
            if (w, h) != (camera.width, camera.height) {
                return Err(Error::SizeMismatch(w, h, camera.width, camera.height));
            }
        }
        let mut samples = Vec::with_capacity(flow.len());
        let mut excluded = 0;
        for ((p, d), ok) in flow.positions.iter().zip(&flow.vectors).zip(&flow.valid) {
            let rho = if *ok && camera.contains(p) {
                depth.sample(p)
            } else {
                None
            };
            let Some(rho) = rho else {
                excluded += 1;
                continue;
            };
            let ray = pixel_to_ray_unchecked(camera, p);
            let (t1, t2, phi) = structure.nearest(p);
            let (sin, cos) = phi.sin_cos();
            samples.push(Sample {
                ray,
                h: rho * ray.z,
                pixel: *p,
                flow: *d,
                cos,
                sin,
                t1,
                t2,
            });
        }
        Ok(EgoProblem {
            prev,
            camera: *camera,
            samples,
            excluded,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of input samples dropped for invalid flow or depth.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    /// `(t1, t2)` of every sample.
    pub fn textures(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.t1, s.t2)).collect()
    }

    pub fn positions(&self) -> Vec<Vector2<f64>> {
        self.samples.iter().map(|s| s.pixel).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> EgoProblem {
        EgoProblem {
            prev: self.prev,
            camera: self.camera,
            samples: idx.iter().map(|&i| self.samples[i]).collect(),
            excluded: 0,
        }
    }

    /// Keeps the samples whose dominant texture `t1` is at least `cutoff`.
    pub fn with_texture_cutoff(&self, cutoff: f64) -> EgoProblem {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.samples[i].t1 >= cutoff)
            .collect();
        let mut p = self.subset(&idx);
        p.excluded = self.excluded;
        p
    }
}

/// Rotation and translation mapping frame k-1 camera coordinates to frame k.
struct Motion {
    r: Matrix3<f64>,
    t: Vector3<f64>,
    f: f64,
    c: Vector2<f64>,
}

impl Motion {
    fn new(x: &Pose, problem: &EgoProblem) -> Self {
        let rel = relative_transform(x, &problem.prev);
        Motion {
            r: *rel.rotation.to_rotation_matrix().matrix(),
            t: rel.translation.vector,
            f: problem.camera.focal(),
            c: problem.camera.principal_point(),
        }
    }

    /// Eigenbasis residual `(z1, z2)`, or `None` if the point lands behind the camera.
    #[inline]
    fn residual(&self, s: &Sample) -> Option<(f64, f64)> {
        let m = self.r * s.ray + self.t * s.h;
        if m.z <= 0.0 {
            return None;
        }
        let hx = self.c.x + self.f * m.x / m.z - s.pixel.x;
        let hy = self.c.y + self.f * m.y / m.z - s.pixel.y;
        let (rx, ry) = (s.flow.x - hx, s.flow.y - hy);
        Some((s.cos * rx + s.sin * ry, -s.sin * rx + s.cos * ry))
    }
}

/// Eigenbasis flow error of one sample, paired with its textures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenError {
    pub z1: f64,
    pub t1: f64,
    pub z2: f64,
    pub t2: f64,
}

/// Per-sample eigenbasis errors under pose `x`; `None` where the
/// prediction falls behind the camera.
pub fn eigen_errors(x: &Pose, problem: &EgoProblem) -> Vec<Option<EigenError>> {
    let m = Motion::new(x, problem);
    problem
        .samples
        .iter()
        .map(|s| {
            m.residual(s).map(|(z1, z2)| EigenError {
                z1,
                t1: s.t1,
                z2,
                t2: s.t2,
            })
        })
        .collect()
}

/// Per-vector residual norms in pixels; `INFINITY` where the prediction is invalid.
pub fn residual_norms(x: &Pose, problem: &EgoProblem) -> Vec<f64> {
    let m = Motion::new(x, problem);
    problem
        .samples
        .iter()
        .map(|s| m.residual(s).map_or(f64::INFINITY, |(a, b)| a.hypot(b)))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Likelihood<'a> {
    Lcm(&'a ParamLut),
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy)]
enum ComponentDensity {
    Lcm(LcmDensity),
    Gauss { half_precision: f64, log_norm: f64 },
}

impl ComponentDensity {
    #[inline]
    fn nll(&self, z: f64) -> f64 {
        match self {
            ComponentDensity::Lcm(d) => -d.log_pdf(z),
            ComponentDensity::Gauss {
                half_precision,
                log_norm,
            } => half_precision * z * z + log_norm,
        }
    }
}

/// Negative log-likelihood of a problem restricted to a component mask,
/// with the densities of every component precomputed.
struct Objective<'p> {
    problem: &'p EgoProblem,
    terms: Vec<Term>,
    /// Squared residual-norm gate applied to whole vectors, with the cost
    /// charged beyond it.
    vector_gate: Option<(f64, f64)>,
}

/// One sample: densities of the active components, and per component the
/// bound beyond which it stops counting as an inlier together with the
/// cost it is charged there. Unbounded components use `INFINITY`.
struct Term {
    index: usize,
    density: [Option<ComponentDensity>; 2],
    bound: [f64; 2],
    cap: [f64; 2],
}

/// Component mask: `[z1 active, z2 active]` per sample.
pub type ComponentMask = [Vec<bool>; 2];

impl<'p> Objective<'p> {
    fn new(
        problem: &'p EgoProblem,
        likelihood: &Likelihood,
        mask: Option<&ComponentMask>,
    ) -> Result<Self> {
        if let Some(m) = mask {
            if m[0].len() != problem.len() || m[1].len() != problem.len() {
                return Err(Error::domain("component mask does not match the problem"));
            }
        }
        let gauss = |sigma: f64| ComponentDensity::Gauss {
            half_precision: 0.5 / (sigma * sigma),
            log_norm: (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln(),
        };
        if let Likelihood::Gaussian { sigma } = likelihood {
            if !(*sigma > 0.0) {
                return Err(Error::domain("Gaussian sigma must be positive"));
            }
        }
        let density = |t: f64| match likelihood {
            Likelihood::Lcm(lut) => ComponentDensity::Lcm(LcmDensity::new(&lut.lookup(t))),
            Likelihood::Gaussian { sigma } => gauss(*sigma),
        };
        let terms = problem
            .samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                let (a1, a2) = mask.map_or((true, true), |m| (m[0][i], m[1][i]));
                (a1 || a2).then(|| Term {
                    index: i,
                    density: [a1.then(|| density(s.t1)), a2.then(|| density(s.t2))],
                    bound: [f64::INFINITY; 2],
                    cap: [0.0; 2],
                })
            })
            .collect();
        Ok(Objective {
            problem,
            terms,
            vector_gate: None,
        })
    }

    /// Every component bounded by its own half-width: the likelihood of the
    /// inliers at whichever pose is evaluated.
    fn with_component_bounds(mut self, bounds: &[Vec<f64>; 2]) -> Self {
        for t in &mut self.terms {
            #[allow(clippy::needless_range_loop)]
            for c in 0..2 {
                if let Some(d) = &t.density[c] {
                    let b = bounds[c][t.index];
                    t.bound[c] = b;
                    t.cap[c] = d.nll(b);
                }
            }
        }
        self
    }

    /// Vectors whose residual norm reaches `gate` are charged the cost of a
    /// residual on the gate.
    fn with_vector_gate(mut self, gate: f64) -> Self {
        // Only used with the Gaussian, whose density is shared by all terms.
        let cap = self.terms.first().map_or(0.0, |t| {
            t.density
                .iter()
                .flatten()
                .map(|d| d.nll(gate / 2f64.sqrt()))
                .sum()
        });
        self.vector_gate = Some((gate * gate, cap));
        self
    }

    fn vectors(&self) -> usize {
        self.terms.len()
    }

    fn eval(&self, x: &Pose) -> f64 {
        let m = Motion::new(x, self.problem);
        let mut acc = 0.0;
        for t in &self.terms {
            let Some((z1, z2)) = m.residual(&self.problem.samples[t.index]) else {
                return f64::INFINITY;
            };
            let z = [z1, z2];
            if let Some((gate2, cap)) = self.vector_gate {
                if z1 * z1 + z2 * z2 >= gate2 {
                    acc += cap;
                    continue;
                }
            }
            #[allow(clippy::needless_range_loop)]
            for c in 0..2 {
                if let Some(d) = &t.density[c] {
                    acc += if z[c].abs() < t.bound[c] {
                        d.nll(z[c])
                    } else {
                        t.cap[c]
                    };
                }
            }
        }
        acc
    }
}

/// Negative log-likelihood of pose `x`, summed over both components of every sample.
pub fn flow_nll(x: &Pose, problem: &EgoProblem, likelihood: &Likelihood) -> Result<f64> {
    let obj = Objective::new(problem, likelihood, None)?;
    if obj.vectors() == 0 {
        return Err(Error::domain("no usable flow samples"));
    }
    Ok(obj.eval(x))
}

#[derive(Debug, Clone, Copy)]
pub struct MleOptions {
    pub max_evals: usize,
    /// Optimiser units: one unit moves the position by this many meters ...
    pub position_scale: f64,
    /// ... and each Euler angle by this many radians.
    pub angle_scale: f64,
    /// Stop once the simplex is this small in optimiser units.
    pub x_tol: f64,
    pub restart_seed: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            max_evals: 3000,
            position_scale: 0.01,
            angle_scale: 0.002,
            x_tol: 1e-3,
            restart_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleResult {
    pub pose: Pose,
    pub nll: f64,
    /// Objective evaluations spent.
    pub evals: usize,
    /// `false` when nothing beat the initial pose by more than 1e-12; `pose` is then `init`.
    pub improved: bool,
}

/// Nelder-Mead MLE of the frame k pose, started at `init` and restarted
/// once from a small random perturbation of the first optimum.
pub fn mle_pose(
    problem: &EgoProblem,
    likelihood: &Likelihood,
    init: &Pose,
    mask: Option<&ComponentMask>,
    opts: &MleOptions,
) -> Result<MleResult> {
    let obj = Objective::new(problem, likelihood, mask)?;
    minimize_pose(&obj, init, opts)
}

fn minimize_pose(obj: &Objective, init: &Pose, opts: &MleOptions) -> Result<MleResult> {
    if obj.vectors() < 3 {
        return Err(Error::domain(format!(
            "pose estimation needs at least 3 flow vectors, got {}",
            obj.vectors()
        )));
    }
    let base = init.to_vector();
    let scale = [
        opts.position_scale,
        opts.position_scale,
        opts.position_scale,
        opts.angle_scale,
        opts.angle_scale,
        opts.angle_scale,
    ];
    let to_pose = |u: &[f64]| {
        let v: Vec<f64> = (0..6).map(|i| base[i] + scale[i] * u[i]).collect();
        Pose::from_vector(&v)
    };
    let f = |u: &[f64]| obj.eval(&to_pose(u));
    let f_init = f(&[0.0; 6]);
    let nm = NelderMead {
        max_evals: opts.max_evals,
        f_tol_abs: 1e-9,
        f_tol_rel: 1e-10,
        x_tol: opts.x_tol,
    };
    let first = nm.minimize(f, &[0.0; 6], &[1.0; 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.restart_seed);
    let restart: Vec<f64> = first
        .x
        .iter()
        .map(|v| v + rng.random_range(-0.5..0.5))
        .collect();
    let second = nm.minimize(f, &restart, &[0.5; 6]);
    let evals = 1 + first.evals + second.evals;
    let best = if second.f < first.f { second } else { first };
    if best.f.is_finite() && f_init - best.f > 1e-12 {
        Ok(MleResult {
            pose: to_pose(&best.x),
            nll: best.f,
            evals,
            improved: true,
        })
    } else if f_init.is_finite() {
        Ok(MleResult {
            pose: *init,
            nll: f_init,
            evals,
            improved: false,
        })
    } else {
        Err(Error::Numerical(
            "pose likelihood is not finite near the initial pose".into(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    /// Flow vectors per hypothesis.
    pub min_samples: usize,
    pub max_iters: usize,
    /// Probability of drawing at least one all-inlier sample.
    pub confidence: f64,
    /// Residual-norm gate in pixels (RANSAC) or confidence level (LCMSAC).
    pub inlier_threshold: f64,
    /// Samples with `t1` below this are dropped before LCMSAC sampling.
    pub texture_cutoff: f64,
    pub seed: u64,
}

impl SacConfig {
    pub fn ransac(seed: u64) -> Self {
        SacConfig {
            min_samples: 3,
            max_iters: 200,
            confidence: 0.99,
            inlier_threshold: 0.5,
            texture_cutoff: 0.0,
            seed,
        }
    }

    /// LCMSAC defaults; dense flow gets the texture cutoff of 50.
    pub fn lcmsac(seed: u64, dense: bool) -> Self {
        SacConfig {
            min_samples: 3,
            max_iters: 200,
            confidence: 0.99,
            inlier_threshold: 0.9,
            texture_cutoff: if dense { 50.0 } else { 0.0 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_samples < 3 {
            return Err(Error::domain("min_samples must be at least 3"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::domain("confidence must lie in (0, 1)"));
        }
        if !(self.inlier_threshold > 0.0) || self.max_iters == 0 {
            return Err(Error::domain(
                "inlier threshold and max_iters must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacResult {
    pub pose: Pose,
    /// Inlier components of the winning hypothesis, aligned with the
    /// problem's samples. RANSAC marks both components of a vector together.
    pub inliers: ComponentMask,
    pub iterations: usize,
    /// `false` when no hypothesis gathered `min_samples` inliers; `pose` is then best effort.
    pub success: bool,
}

impl SacResult {
    pub fn inlier_ratio(&self) -> f64 {
        let n = self.inliers[0].len() * 2;
        if n == 0 {
            return 0.0;
        }
        let k: usize = self.inliers.iter().flatten().filter(|b| **b).count();
        k as f64 / n as f64
    }
}

/// Hypotheses evaluated per parallel batch. Fixed so results do not depend
/// on the thread count.
const BATCH: usize = 8;

fn hypothesis_opts(seed: u64) -> MleOptions {
    MleOptions {
        max_evals: 500,
        x_tol: 1e-3,
        restart_seed: seed,
        ..MleOptions::default()
    }
}

fn required_iterations(inlier_fraction: f64, m: usize, confidence: f64) -> usize {
    let good = inlier_fraction.clamp(0.0, 1.0).powi(m as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Best hypothesis: pose, inlier mask and inlier count.
type Consensus = (Pose, ComponentMask, usize);

/// Shared hypothesise-and-score loop. `score` returns the inlier mask and
/// its size for a hypothesis pose; `total` is the size of a full consensus.
fn sample_consensus(
    problem: &EgoProblem,
    init: &Pose,
    config: &SacConfig,
    total: usize,
    score: &(impl Fn(&Pose) -> (ComponentMask, usize) + Sync),
) -> Result<(Option<Consensus>, usize)> {
    config.validate()?;
    if problem.len() < config.min_samples {
        return Err(Error::domain(format!(
            "{} flow vectors, need at least {}",
            problem.len(),
            config.min_samples
        )));
    }
    let gauss = Likelihood::Gaussian {
        sigma: RANSAC_SIGMA,
    };
    let mut best: Option<(Pose, ComponentMask, usize)> = None;
    let mut done = 0usize;
    let mut needed = config.max_iters;
    while done < needed.min(config.max_iters) {
        let batch = BATCH.min(config.max_iters - done);
        let results: Vec<Option<(Pose, ComponentMask, usize)>> = (done..done + batch)
            .into_par_iter()
            .map(|it| {
                let seed = config.seed.wrapping_add(it as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let idx = rand::seq::index::sample(&mut rng, problem.len(), config.min_samples)
                    .into_vec();
                let sub = problem.subset(&idx);
                let hyp = mle_pose(&sub, &gauss, init, None, &hypothesis_opts(seed)).ok()?;
                let (mask, count) = score(&hyp.pose);
                Some((hyp.pose, mask, count))
            })
            .collect();
        for r in results.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| r.2 > b.2) {
                best = Some(r);
            }
        }
        done += batch;
        if let Some(b) = &best {
            needed = required_iterations(
                b.2 as f64 / total as f64,
                config.min_samples,
                config.confidence,
            );
        }
    }
    Ok((best, done))
}

/// Gaussian RANSAC: vectors with residual norm below the gate are inliers.
/// The winning hypothesis is refined by the Gaussian MLE over the inliers,
/// re-classified at each candidate pose, so vectors beyond the gate cost a
/// constant.
pub fn ransac_egomotion(
    problem: &EgoProblem,
    init: &Pose,
    config: &SacConfig,
) -> Result<SacResult> {
    let gate = config.inlier_threshold;
    let score = |x: &Pose| {
        let inl: Vec<bool> = residual_norms(x, problem)
            .iter()
            .map(|r| *r < gate)
            .collect();
        let count = inl.iter().filter(|b| **b).count();
        ([inl.clone(), inl], count)
    };
    let (best, iterations) = sample_consensus(problem, init, config, problem.len(), &score)?;
    let gauss = Likelihood::Gaussian {
        sigma: RANSAC_SIGMA,
    };
    let refit = Objective::new(problem, &gauss, None)?.with_vector_gate(gate);
    finish(init, config, best, iterations, refit, &score, |mask| {
        mask[0].iter().filter(|b| **b).count()
    })
}

/// Per-component LCM confidence half-widths at the sample textures.
pub fn component_halfwidths(
    problem: &EgoProblem,
    lut: &ParamLut,
    level: f64,
) -> Result<[Vec<f64>; 2]> {
    let tex = problem.textures();
    let hw = |t: f64| lcm_confidence_halfwidth(&lut.lookup(t), level);
    let a = tex
        .iter()
        .map(|(t1, _)| hw(*t1))
        .collect::<Result<Vec<_>>>()?;
    let b = tex
        .iter()
        .map(|(_, t2)| hw(*t2))
        .collect::<Result<Vec<_>>>()?;
    Ok([a, b])
}

/// LCMSAC: components inside the LCM confidence interval at their own
/// texture are inliers. The winning hypothesis is refined by the LCM MLE over
/// the inlier components, re-classified at each candidate pose. The
/// returned mask is the inlier set at the final pose, aligned with
/// the problem after the texture cutoff, see [`EgoProblem::with_texture_cutoff`].
pub fn lcmsac_egomotion(
    problem: &EgoProblem,
    lut: &ParamLut,
    init: &Pose,
    config: &SacConfig,
) -> Result<SacResult> {
    config.validate()?;
    if config.inlier_threshold >= 1.0 {
        return Err(Error::domain(
            "LCMSAC threshold is a confidence level in (0, 1)",
        ));
    }
    let problem = problem.with_texture_cutoff(config.texture_cutoff);
    let bounds = component_halfwidths(&problem, lut, config.inlier_threshold)?;
    let score = |x: &Pose| {
        let errs = eigen_errors(x, &problem);
        let mut mask = [vec![false; errs.len()], vec![false; errs.len()]];
        let mut count = 0;
        for (i, e) in errs.iter().enumerate() {
            if let Some(e) = e {
                mask[0][i] = e.z1.abs() < bounds[0][i];
                mask[1][i] = e.z2.abs() < bounds[1][i];
                count += mask[0][i] as usize + mask[1][i] as usize;
            }
        }
        (mask, count)
    };
    let (best, iterations) = sample_consensus(&problem, init, config, 2 * problem.len(), &score)?;
    let refit =
        Objective::new(&problem, &Likelihood::Lcm(lut), None)?.with_component_bounds(&bounds);
    finish(init, config, best, iterations, refit, &score, |mask| {
        (0..mask[0].len())
            .filter(|&i| mask[0][i] || mask[1][i])
            .count()
    })
}

fn finish(
    init: &Pose,
    config: &SacConfig,
    best: Option<(Pose, ComponentMask, usize)>,
    iterations: usize,
    refit: Objective,
    score: &impl Fn(&Pose) -> (ComponentMask, usize),
    vectors: impl Fn(&ComponentMask) -> usize,
) -> Result<SacResult> {
    let n = refit.problem.len();
    let Some((hyp, mask, _)) = best else {
        return Ok(SacResult {
            pose: *init,
            inliers: [vec![false; n], vec![false; n]],
            iterations,
            success: false,
        });
    };
    if vectors(&mask) < config.min_samples {
        return Ok(SacResult {
            pose: hyp,
            inliers: mask,
            iterations,
            success: false,
        });
    }
    let opts = MleOptions {
        restart_seed: config.seed ^ 0x5EED,
        ..MleOptions::default()
    };
    // Inliers are re-classified at every pose the refit visits: a set frozen
    // at the minimal-sample hypothesis stays biased toward that hypothesis.
    let pose = minimize_pose(&refit, &hyp, &opts)?.pose;
    let (mask, _) = score(&pose);
    let success = vectors(&mask) >= config.min_samples;
    Ok(SacResult {
        pose,
        inliers: mask,
        iterations,
        success,
    })
}

/// Final translational error as a percentage of the ground-truth path length.
pub fn drift_rate(estimated: &[Pose], truth: &[Pose]) -> Result<f64> {
    if estimated.len() != truth.len() || truth.len() < 2 {
        return Err(Error::domain(
            "drift needs two trajectories of equal length >= 2",
        ));
    }
    let length: f64 = truth
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm())
        .sum();
    if !(length > 0.0) {
        return Err(Error::domain("ground-truth trajectory has zero length"));
    }
    let end = (estimated.last().unwrap().position - truth.last().unwrap().position).norm();
    Ok(100.0 * end / length)
}

pub fn write_trajectory(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["k", "x", "y", "z", "yaw", "pitch", "roll"])
        .map_err(|e| csv_error(path, e))?;
    for (k, p) in poses.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(p.to_vector().iter().map(|v| format!("{v:.17e}")));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["k", "x", "y", "z", "yaw", "pitch", "roll"] {
        return Err(Error::format(path, "unexpected trajectory header"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let v: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse).collect();
        let v = v.map_err(|e| Error::format(path, format!("bad number: {e}")))?;
        if v.len() != 6 {
            return Err(Error::format(path, "trajectory rows need 7 fields"));
        }
        out.push(Pose::from_vector(&v));
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{grid_pixels, ground_truth_flow};
    use crate::likelihood::LcmParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn camera() -> CameraModel {
        CameraModel::new(160, 90, 120f64.to_radians()).unwrap()
    }

    fn isotropic(cam: &CameraModel, t: f64, phi: f64) -> StructureField {
        let n = cam.width * cam.height;
        StructureField {
            width: cam.width,
            height: cam.height,
            t1: vec![t; n],
            t2: vec![t; n],
            phi: vec![phi; n],
        }
    }

    /// Slightly tilted plane so depth varies across the image.
    fn depth(cam: &CameraModel) -> DepthMap {
        let data = (0..cam.width * cam.height)
            .map(|i| 1.0 / (5.0 + 0.01 * (i % cam.width) as f64 + 0.02 * (i / cam.width) as f64))
            .collect();
        DepthMap::new(cam.width, cam.height, data).unwrap()
    }

    fn poses() -> (Pose, Pose) {
        let prev = Pose::new(Vector3::new(1.0, -0.5, 0.2), 0.3, 0.02, -0.01);
        let next = Pose::new(Vector3::new(1.15, -0.42, 0.25), 0.33, 0.025, -0.005);
        (prev, next)
    }

    fn problem_with(
        mut flow_fn: impl FnMut(usize, Vector2<f64>) -> Vector2<f64>,
        structure: &StructureField,
    ) -> (EgoProblem, Pose) {
        let cam = camera();
        let d = depth(&cam);
        let (prev, next) = poses();
        let pix = grid_pixels(&cam, 12, 6);
        let mut gt = ground_truth_flow(&next, &prev, &pix, &d, &cam);
        for (i, v) in gt.vectors.iter_mut().enumerate() {
            *v = flow_fn(i, *v);
        }
        (
            EgoProblem::new(prev, &gt, structure, &d, &cam).unwrap(),
            next,
        )
    }

    fn clean() -> (EgoProblem, Pose) {
        problem_with(|_, v| v, &isotropic(&camera(), 1000.0, 0.0))
    }

    fn pose_err(a: &Pose, b: &Pose) -> (f64, f64) {
        let va = a.to_vector();
        let vb = b.to_vector();
        let dp = (a.position - b.position).norm();
        let da = (3..6).map(|i| (va[i] - vb[i]).abs()).fold(0.0, f64::max);
        (dp, da)
    }

    fn lut() -> ParamLut {
        ParamLut::new(
            vec![1.0, 1000.0],
            vec![
                LcmParams::new(0.1, 2.0, 0.5).unwrap(),
                LcmParams::new(0.7, 0.1, 0.8).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn truth_gives_zero_errors() {
        let (p, truth) = clean();
        for e in eigen_errors(&truth, &p) {
            let e = e.unwrap();
            assert!(e.z1.abs() < 1e-9 && e.z2.abs() < 1e-9);
        }
    }

    #[test]
    fn zero_angle_basis_gives_raw_residuals() {
        let (p, truth) = problem_with(
            |_, v| v + Vector2::new(0.3, -0.7),
            &isotropic(&camera(), 1.0, 0.0),
        );
        for e in eigen_errors(&truth, &p) {
            let e = e.unwrap();
            assert_abs_diff_eq!(e.z1, 0.3, epsilon = 1e-9);
            assert_abs_diff_eq!(e.z2, -0.7, epsilon = 1e-9);
        }
    }

    #[test]
    fn behind_camera_predictions_are_excluded() {
        let (p, _) = clean();
        let far = Pose::new(Vector3::new(1.0, -0.5, 50.0), 0.3, 0.0, 0.0);
        assert!(eigen_errors(&far, &p).iter().all(Option::is_none));
        assert_eq!(
            flow_nll(&far, &p, &Likelihood::Gaussian { sigma: 1.0 }).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn invalid_flow_is_counted() {
        let cam = camera();
        let d = depth(&cam);
        let mut f =
            FlowField::with_vectors(vec![Vector2::new(10.0, 10.0); 4], vec![Vector2::zeros(); 4]);
        f.valid[1] = false;
        f.positions[2] = Vector2::new(-5.0, 3.0);
        let p =
            EgoProblem::new(Pose::identity(), &f, &isotropic(&cam, 1.0, 0.0), &d, &cam).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.excluded(), 2);
    }

    #[test]
    fn nll_single_sample_cauchy() {
        let cam = camera();
        let d = DepthMap::constant(cam.width, cam.height, 0.2);
        let f = FlowField::with_vectors(vec![Vector2::new(20.0, 30.0)], vec![Vector2::zeros()]);
        let p =
            EgoProblem::new(Pose::identity(), &f, &isotropic(&cam, 7.0, 0.4), &d, &cam).unwrap();
        let lut = ParamLut::single(3.0, LcmParams::new(0.5, 1.0, 0.0).unwrap()).unwrap();
        let v = flow_nll(&Pose::identity(), &p, &Likelihood::Lcm(&lut)).unwrap();
        assert_abs_diff_eq!(v, 2.0 * std::f64::consts::PI.ln(), epsilon = 1e-12);
    }

    #[test]
    fn nll_doubles_with_duplicated_samples() {
        let (p, truth) = problem_with(
            |i, v| v + Vector2::new(0.01 * i as f64, -0.2),
            &isotropic(&camera(), 30.0, 0.3),
        );
        let idx: Vec<usize> = (0..p.len()).chain(0..p.len()).collect();
        let doubled = p.subset(&idx);
        let l = lut();
        let a = flow_nll(&truth, &p, &Likelihood::Lcm(&l)).unwrap();
        let b = flow_nll(&truth, &doubled, &Likelihood::Lcm(&l)).unwrap();
        assert!((b - 2.0 * a).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn nll_empty_problem_is_an_error() {
        let (p, truth) = clean();
        let empty = p.subset(&[]);
        assert!(flow_nll(&truth, &empty, &Likelihood::Gaussian { sigma: 1.0 }).is_err());
    }

    #[test]
    fn truth_minimises_nll_under_perturbation() {
        let (p, truth) = clean();
        let l = lut();
        let lik = Likelihood::Lcm(&l);
        let at_truth = flow_nll(&truth, &p, &lik).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = truth.to_vector();
            let w: Vec<f64> = v
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    x + if i < 3 {
                        rng.random_range(-0.05..0.05)
                    } else {
                        rng.random_range(-0.01..0.01)
                    }
                })
                .collect();
            assert!(flow_nll(&Pose::from_vector(&w), &p, &lik).unwrap() >= at_truth);
        }
    }

    #[test]
    fn mle_stays_at_truth() {
        let (p, truth) = clean();
        let l = lut();
        let r = mle_pose(
            &p,
            &Likelihood::Lcm(&l),
            &truth,
            None,
            &MleOptions::default(),
        )
        .unwrap();
        assert_eq!(r.pose, truth);
        assert!(!r.improved);
    }

    #[test]
    fn mle_recovers_from_perturbed_init() {
        let (p, truth) = clean();
        let v = truth.to_vector();
        let init = Pose::from_vector(&[
            v[0] + 0.1,
            v[1] - 0.1,
            v[2] + 0.1,
            v[3] + 0.02,
            v[4] - 0.02,
            v[5] + 0.02,
        ]);
        let l = lut();
        for lik in [Likelihood::Lcm(&l), Likelihood::Gaussian { sigma: 0.5 }] {
            let r = mle_pose(&p, &lik, &init, None, &MleOptions::default()).unwrap();
            let (dp, da) = pose_err(&r.pose, &truth);
            assert!(dp < 1e-4 && da < 1e-5, "{lik:?}: {dp} m, {da} rad");
        }
    }

    /// Independent least-squares oracle: Gauss-Newton on the stacked raw
    /// residuals with a finite-difference Jacobian.
    fn gauss_newton(p: &EgoProblem, start: &Pose) -> Pose {
        let resid = |v: &[f64]| -> Vec<f64> {
            eigen_errors(&Pose::from_vector(v), p)
                .iter()
                .flat_map(|e| {
                    let e = e.unwrap();
                    [e.z1, e.z2]
                })
                .collect()
        };
        let mut x = start.to_vector().to_vec();
        for _ in 0..20 {
            let r0 = resid(&x);
            let mut jac = nalgebra::DMatrix::zeros(r0.len(), 6);
            for k in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += 1e-7;
                xm[k] -= 1e-7;
                let (rp, rm) = (resid(&xp), resid(&xm));
                for i in 0..r0.len() {
                    jac[(i, k)] = (rp[i] - rm[i]) / 2e-7;
                }
            }
            let r = nalgebra::DVector::from_vec(r0);
            let step = (jac.transpose() * &jac)
                .lu()
                .solve(&(jac.transpose() * r))
                .unwrap();
            for k in 0..6 {
                x[k] -= step[k];
            }
        }
        Pose::from_vector(&x)
    }

    #[test]
    fn gaussian_mle_is_least_squares() {
        use rand_distr::{Distribution, Normal};
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let n = Normal::new(0.0, sigma).unwrap();
        let (p, truth) = problem_with(
            |_, v| v + Vector2::new(n.sample(&mut rng), n.sample(&mut rng)),
            &isotropic(&camera(), 100.0, 0.0),
        );
        let ls = gauss_newton(&p, &truth);
        let r = mle_pose(
            &p,
            &Likelihood::Gaussian { sigma },
            &truth,
            None,
            &MleOptions::default(),
        )
        .unwrap();
        let (dp, da) = pose_err(&r.pose, &ls);
        assert!(dp < 1e-4 && da < 1e-5, "{dp} {da}");
        // Noise moves the estimate, but only by a few sigma / sqrt(N) pixels' worth.
        let (dp_truth, _) = pose_err(&ls, &truth);
        assert!(dp_truth > 1e-6 && dp_truth < 0.1, "{dp_truth}");
    }

    #[test]
    fn mle_needs_three_vectors() {
        let (p, truth) = clean();
        let sub = p.subset(&[0, 1]);
        assert!(mle_pose(
            &sub,
            &Likelihood::Gaussian { sigma: 1.0 },
            &truth,
            None,
            &MleOptions::default()
        )
        .is_err());
    }

    #[test]
    fn ransac_on_clean_data() {
        let (p, truth) = clean();
        let prev = p.prev;
        let r = ransac_egomotion(&p, &prev, &SacConfig::ransac(3)).unwrap();
        assert!(r.success);
        assert!(r.inliers[0].iter().all(|b| *b));
        let (dp, da) = pose_err(&r.pose, &truth);
        assert!(dp < 1e-4 && da < 1e-4, "{dp} {da}");
    }

    fn outlier_problem() -> (EgoProblem, Pose, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = grid_pixels(&camera(), 12, 6).len();
        let bad: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.3).collect();
        let noise: Vec<Vector2<f64>> = (0..n)
            .map(|_| Vector2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
            .collect();
        let (p, truth) = problem_with(
            |i, v| if bad[i] { v + noise[i] } else { v },
            &isotropic(&camera(), 1000.0, 0.2),
        );
        (p, truth, bad)
    }

    #[test]
    fn truncated_objective_charges_outliers_a_constant() {
        let st = isotropic(&camera(), 1000.0, 0.0);
        let l = lut();
        let at = |shift: f64| {
            let (p, truth) = problem_with(
                |i, v| {
                    if i == 7 {
                        v + Vector2::new(shift, 0.0)
                    } else {
                        v
                    }
                },
                &st,
            );
            let n = p.len();
            let bounded = Objective::new(&p, &Likelihood::Lcm(&l), None)
                .unwrap()
                .with_component_bounds(&[vec![0.5; n], vec![0.5; n]])
                .eval(&truth);
            let gated = Objective::new(&p, &Likelihood::Gaussian { sigma: 0.3 }, None)
                .unwrap()
                .with_vector_gate(0.5)
                .eval(&truth);
            let plain = Objective::new(&p, &Likelihood::Lcm(&l), None)
                .unwrap()
                .eval(&truth);
            (bounded, gated, plain)
        };
        let (b0, g0, p0) = at(0.0);
        assert_abs_diff_eq!(b0, p0, epsilon = 1e-9);
        let (b1, g1, p1) = at(3.0);
        let (b2, g2, p2) = at(30.0);
        assert_abs_diff_eq!(b1, b2, epsilon = 1e-9);
        assert_abs_diff_eq!(g1, g2, epsilon = 1e-9);
        assert!(b1 > b0 && g1 > g0);
        assert!(p2 > p1);
    }

    #[test]
    fn ransac_rejects_gross_outliers() {
        let (p, truth, bad) = outlier_problem();
        let prev = p.prev;
        let r = ransac_egomotion(&p, &prev, &SacConfig::ransac(5)).unwrap();
        for (i, b) in bad.iter().enumerate() {
            assert_eq!(r.inliers[0][i], !b, "sample {i}");
        }
        let (dp, da) = pose_err(&r.pose, &truth);
        assert!(dp < 1e-4 && da < 1e-4, "{dp} {da}");
    }

    #[test]
    fn lcmsac_rejects_gross_outliers() {
        let (p, truth, _) = outlier_problem();
        let prev = p.prev;
        let l = lut();
        let r = lcmsac_egomotion(&p, &l, &prev, &SacConfig::lcmsac(5, false)).unwrap();
        assert!(r.success);
        let (dp, da) = pose_err(&r.pose, &truth);
        assert!(dp < 1e-4 && da < 1e-4, "{dp} {da}");
    }

    #[test]
    fn lcmsac_on_clean_data() {
        let (p, truth) = clean();
        let prev = p.prev;
        let r = lcmsac_egomotion(&p, &lut(), &prev, &SacConfig::lcmsac(1, false)).unwrap();
        assert!(r.inliers.iter().flatten().all(|b| *b));
        let (dp, da) = pose_err(&r.pose, &truth);
        assert!(dp < 1e-4 && da < 1e-4, "{dp} {da}");
    }

    #[test]
    fn lcmsac_applies_texture_cutoff() {
        let (p, _) = problem_with(
            |v, _| Vector2::new(v as f64, 0.0),
            &isotropic(&camera(), 10.0, 0.0),
        );
        let prev = p.prev;
        assert!(lcmsac_egomotion(&p, &lut(), &prev, &SacConfig::lcmsac(1, true)).is_err());
    }

    #[test]
    fn low_texture_bound_is_wide() {
        let (p, _) = clean();
        let l = lut();
        let low = p.with_texture_cutoff(0.0).subset(&[0]);
        let mut s = low.clone();
        s.samples[0].t1 = 0.01;
        let wide = component_halfwidths(&s, &l, 0.9).unwrap()[0][0];
        s.samples[0].t1 = 1e5;
        let narrow = component_halfwidths(&s, &l, 0.9).unwrap()[0][0];
        assert!(wide > 10.0 * narrow);
    }

    #[test]
    fn too_few_vectors_fail() {
        let (p, truth) = clean();
        let sub = p.subset(&[0, 1]);
        assert!(ransac_egomotion(&sub, &truth, &SacConfig::ransac(0)).is_err());
        assert!(lcmsac_egomotion(&sub, &lut(), &truth, &SacConfig::lcmsac(0, false)).is_err());
    }

    #[test]
    fn sac_is_deterministic() {
        let (p, _, _) = outlier_problem();
        let prev = p.prev;
        let a = ransac_egomotion(&p, &prev, &SacConfig::ransac(9)).unwrap();
        let b = ransac_egomotion(&p, &prev, &SacConfig::ransac(9)).unwrap();
        assert_eq!(a, b);
        let l = lut();
        let a = lcmsac_egomotion(&p, &l, &prev, &SacConfig::lcmsac(9, false)).unwrap();
        let b = lcmsac_egomotion(&p, &l, &prev, &SacConfig::lcmsac(9, false)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn required_iterations_formula() {
        assert_eq!(required_iterations(1.0, 3, 0.99), 1);
        assert_eq!(required_iterations(0.5, 3, 0.99), 35);
        assert_eq!(required_iterations(0.0, 3, 0.99), usize::MAX);
    }

    #[test]
    fn drift_examples() {
        let truth: Vec<Pose> = (0..101)
            .map(|k| Pose::new(Vector3::new(k as f64, 0.0, 0.0), 0.0, 0.0, 0.0))
            .collect();
        assert_eq!(drift_rate(&truth, &truth).unwrap(), 0.0);
        let mut est = truth.clone();
        est[100].position.y += 1.0;
        assert_abs_diff_eq!(drift_rate(&est, &truth).unwrap(), 1.0, epsilon = 1e-12);
        let still = vec![Pose::identity(); 3];
        assert!(drift_rate(&still, &still).is_err());
        assert!(drift_rate(&truth[..1], &truth[..1]).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let (a, b) = poses();
        write_trajectory(&path, &[a, b]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("k,x,y,z,yaw,pitch,roll\n0,"));
        assert_eq!(read_trajectory(&path).unwrap(), vec![a, b]);
    }

    proptest! {
        #[test]
        fn lcmsac_decisions_ignore_global_rotation(angle in -3.0..3.0f64, seed in 0u64..1000) {
            // Rotating residuals and eigenbases together leaves every component unchanged.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let phi: f64 = rng.random_range(-1.5..1.5);
            let rot = |v: Vector2<f64>, a: f64| Vector2::new(a.cos() * v.x - a.sin() * v.y, a.sin() * v.x + a.cos() * v.y);
            let z = crate::imaging::to_eigenbasis(&r, phi);
            let z_rot = crate::imaging::to_eigenbasis(&rot(r, angle), phi + angle);
            prop_assert!((z - z_rot).norm() < 1e-12);
        }

        #[test]
        fn drift_is_invariant_to_rigid_motion(yaw in -3.0..3.0f64, tx in -10.0..10.0f64) {
            let truth: Vec<Pose> = (0..5).map(|k| Pose::new(Vector3::new(k as f64, 0.5 * k as f64, 0.0), 0.0, 0.0, 0.0)).collect();
            let mut est = truth.clone();
            est[4].position += Vector3::new(0.3, -0.2, 0.1);
            let rot = nalgebra::Rotation3::from_euler_angles(0.0, 0.0, yaw);
            let move_all = |ps: &[Pose]| -> Vec<Pose> {
                ps.iter().map(|p| Pose { position: rot * p.position + Vector3::new(tx, 1.0, 2.0), ..*p }).collect()
            };
            let a = drift_rate(&est, &truth).unwrap();
            let b = drift_rate(&move_all(&est), &move_all(&truth)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
