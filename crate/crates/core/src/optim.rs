//! Direct minimization of the registration loss over the relative pose and
//! over depth, with central finite-difference gradients.
//!
//! Parameters are optimized in scaled coordinates so that a unit step moves
//! image content by a similar amount for every parameter: translations in
//! mm, rotations in units of [`ROTATION_UNIT`] radians.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{Intrinsics, Pose6DoF};
use crate::imaging::{DepthMap, Frame, Label, SegMap};
use crate::losses::{
    depth_terms, total_loss, total_loss_with, DepthTerms, LossError, LossReport, LossWeights, SourceView, TargetView,
};
use crate::spherefit::{fit_sphere_points, FitError};

/// Radians per unit of the scaled rotation coordinates (about 1.15 degrees).
pub const ROTATION_UNIT: f64 = 0.02;

const POSE_SCALE: [f64; 6] = [1.0, 1.0, 1.0, ROTATION_UNIT, ROTATION_UNIT, ROTATION_UNIT];
const POSE_NAMES: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
/// Longest accepted step, in scaled coordinates.
const MAX_STEP: f64 = 2.0;
/// Steps that shrink the valid overlap below this fraction of the starting
/// overlap are rejected, since a masked mean over few pixels is small for
/// the wrong reason.
const MIN_OVERLAP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("non-finite loss while probing parameter {0}")]
    NonFiniteLoss(String),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Plain gradient step `z - rate * grad` in scaled coordinates.
    Fixed(f64),
    /// Quasi-Newton direction with Armijo backtracking.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub max_iters: usize,
    pub step_rule: StepRule,
    pub init_pose: Pose6DoF,
    /// Stop once an accepted step lowers the total by less than this.
    pub convergence_tol: f64,
    /// Finite-difference step in scaled coordinates.
    pub fd_epsilon: f64,
    /// Number of starts; the first is `init_pose`, the others perturb its
    /// rotation uniformly within `perturb_deg` on each axis.
    pub multi_start: usize,
    pub perturb_deg: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iters: 100,
            step_rule: StepRule::Backtracking,
            init_pose: Pose6DoF::IDENTITY,
            convergence_tol: 1e-9,
            fd_epsilon: 0.05,
            multi_start: 5,
            perturb_deg: 2.0,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |s: String| Err(OptimError::InvalidConfig(s));
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.fd_epsilon > 0.0 && self.fd_epsilon.is_finite()) {
            return bad(format!("fd_epsilon must be positive, got {}", self.fd_epsilon));
        }
        if !(self.convergence_tol > 0.0) {
            return bad(format!("convergence_tol must be positive, got {}", self.convergence_tol));
        }
        if self.multi_start == 0 {
            return bad("multi_start must be at least 1".into());
        }
        if let StepRule::Fixed(s) = self.step_rule {
            if !(s > 0.0) {
                return bad(format!("fixed step must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub pose: Pose6DoF,
    /// Report at the start point and after every accepted step.
    pub loss_trace: Vec<LossReport>,
    pub converged: bool,
    /// A non-finite loss was met; the result is the last finite iterate.
    pub diverged: bool,
    pub iterations_used: usize,
    /// Which multi-start produced the result.
    pub start_index: usize,
}

impl OptimResult {
    pub fn final_loss(&self) -> Option<&LossReport> {
        self.loss_trace.last()
    }
}

/// Outcome of a generic minimization in scaled coordinates.
#[derive(Debug, Clone)]
struct Minimum {
    z: Vec<f64>,
    trace: Vec<LossReport>,
    converged: bool,
    diverged: bool,
    iterations: usize,
}

fn finite_report(r: &Result<LossReport, LossError>) -> Option<LossReport> {
    match r {
        Ok(r) if r.total.is_finite() => Some(*r),
        _ => None,
    }
}

/// Central differences of `f` at `z`, step `eps` on every coordinate.
fn fd_gradient(
    f: &dyn Fn(&[f64]) -> Result<LossReport, LossError>,
    z: &[f64],
    eps: f64,
    names: &dyn Fn(usize) -> String,
) -> Result<Vec<f64>, OptimError> {
    let mut g = vec![0.0; z.len()];
    let mut probe = z.to_vec();
    for i in 0..z.len() {
        probe[i] = z[i] + eps;
        let fp = finite_report(&f(&probe)).ok_or_else(|| OptimError::NonFiniteLoss(names(i)))?;
        probe[i] = z[i] - eps;
        let fm = finite_report(&f(&probe)).ok_or_else(|| OptimError::NonFiniteLoss(names(i)))?;
        probe[i] = z[i];
        g[i] = (fp.total - fm.total) / (2.0 * eps);
    }
    Ok(g)
}

/// Finite-difference steps are refined down to this fraction of the
/// configured step before a stalled line search ends the run.
const MIN_EPS_FRACTION: f64 = 1.0 / 256.0;

/// BFGS with Armijo backtracking (or fixed-step gradient descent) on scaled
/// coordinates, with steps capped at `MAX_STEP` and required to keep
/// `MIN_OVERLAP` of the starting valid pixels. When no step along the current direction decreases the
/// loss, the gradient is re-estimated with a 4x smaller finite-difference
/// step and the curvature estimate is reset; the run ends as converged once
/// the step would fall below `MIN_EPS_FRACTION` of the configured value.
fn minimize(
    f: &dyn Fn(&[f64]) -> Result<LossReport, LossError>,
    z0: &[f64],
    cfg: &OptimConfig,
    names: &dyn Fn(usize) -> String,
) -> Minimum {
    let n = z0.len();
    let mut z = DVector::from_column_slice(z0);
    let mut out = Minimum {
        z: z0.to_vec(),
        trace: Vec::new(),
        converged: false,
        diverged: false,
        iterations: 0,
    };
    let Some(mut fz) = finite_report(&f(z.as_slice())) else {
        out.diverged = true;
        return out;
    };
    out.trace.push(fz);
    let min_valid = (fz.valid_pixel_count as f64 * MIN_OVERLAP).ceil() as usize;
    let mut eps = cfg.fd_epsilon;
    let grad = |z: &DVector<f64>, eps: f64| fd_gradient(f, z.as_slice(), eps, names).map(DVector::from_vec);
    let mut g = match grad(&z, eps) {
        Ok(g) => g,
        Err(e) => {
            debug!("{e}");
            out.diverged = true;
            return out;
        }
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut it = 0;
    while it < cfg.max_iters {
        it += 1;
        out.iterations = it;
        if g.norm() == 0.0 {
            out.converged = true;
            break;
        }
        let step = match cfg.step_rule {
            StepRule::Fixed(rate) => {
                let zn = &z - &g * rate;
                match finite_report(&f(zn.as_slice())) {
                    Some(r) if r.valid_pixel_count >= min_valid => Some((zn, r)),
                    _ => {
                        out.diverged = true;
                        break;
                    }
                }
            }
            StepRule::Backtracking => {
                let mut d = -(&h * &g);
                if d.dot(&g) >= 0.0 {
                    h = DMatrix::identity(n, n);
                    fresh = true;
                    d = -g.clone();
                }
                let mut alpha = if fresh { (1.0 / d.norm()).min(1.0) } else { 1.0 };
                alpha = alpha.min(MAX_STEP / d.norm());
                let slope = d.dot(&g);
                let mut accepted = None;
                for _ in 0..MAX_BACKTRACKS {
                    let zn = &z + &d * alpha;
                    if let Some(r) = finite_report(&f(zn.as_slice())) {
                        if r.total <= fz.total + ARMIJO_C1 * alpha * slope
                            && r.total < fz.total
                            && r.valid_pixel_count >= min_valid
                        {
                            accepted = Some((zn, r));
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                accepted
            }
        };
        let Some((z_new, f_new)) = step else {
            if eps * 0.25 < cfg.fd_epsilon * MIN_EPS_FRACTION {
                out.converged = true;
                break;
            }
            eps *= 0.25;
            match grad(&z, eps) {
                Ok(gn) => g = gn,
                Err(e) => {
                    debug!("{e}");
                    out.diverged = true;
                    break;
                }
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let decrease = fz.total - f_new.total;
        let g_new = match grad(&z_new, eps) {
            Ok(g) => g,
            Err(e) => {
                debug!("{e}");
                out.diverged = true;
                break;
            }
        };
        let s = &z_new - &z;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            h = &a * &h * &b + &s * s.transpose() * rho;
            fresh = false;
        }
        z = z_new;
        g = g_new;
        fz = f_new;
        out.trace.push(fz);
        if decrease.abs() < cfg.convergence_tol {
            out.converged = true;
            break;
        }
    }
    out.z = z.as_slice().to_vec();
    out
}

fn pose_from_scaled(z: &[f64]) -> Pose6DoF {
    let mut a = [0.0; 6];
    for i in 0..6 {
        a[i] = z[i] * POSE_SCALE[i];
    }
    Pose6DoF::from_array(a)
}

fn pose_to_scaled(p: &Pose6DoF) -> Vec<f64> {
    p.to_array().iter().zip(POSE_SCALE).map(|(v, s)| v / s).collect()
}

/// Optimization coordinates of a pose: a rotation about `pivot` followed by
/// a translation. With the pivot at scene depth, rotations only produce
/// parallax and no longer trade off against lateral translation.
#[derive(Debug, Clone, Copy)]
struct PivotChart {
    pivot: Vector3<f64>,
}

impl PivotChart {
    fn to_pose(&self, z: &[f64]) -> Pose6DoF {
        let q = pose_from_scaled(z);
        let t = q.translation() + self.pivot - q.rotation() * self.pivot;
        Pose6DoF::new(t.x, t.y, t.z, q.rx, q.ry, q.rz)
    }

    fn from_pose(&self, p: &Pose6DoF) -> Vec<f64> {
        let t = p.translation() - self.pivot + p.rotation() * self.pivot;
        pose_to_scaled(&Pose6DoF::new(t.x, t.y, t.z, p.rx, p.ry, p.rz))
    }
}

/// A target view and one source frame whose relative pose is sought.
/// Depth-only terms are evaluated once since they do not depend on the pose.
pub struct PoseProblem<'a> {
    pub target: &'a TargetView<'a>,
    pub source: &'a SourceView<'a>,
    pub k: Intrinsics,
    pub weights: LossWeights,
    fixed: DepthTerms,
    chart: PivotChart,
}

impl<'a> PoseProblem<'a> {
    pub fn new(
        target: &'a TargetView<'a>,
        source: &'a SourceView<'a>,
        k: Intrinsics,
        weights: LossWeights,
    ) -> Result<Self, OptimError> {
        weights.validate()?;
        let fixed = depth_terms(target, &k, &weights)?;
        let mut d: Vec<f64> = target
            .depth
            .values()
            .iter()
            .zip(target.exclude().bits())
            .filter(|(_, &keep)| keep)
            .map(|(d, _)| *d)
            .collect();
        if d.is_empty() {
            d = target.depth.values().to_vec();
        }
        let chart = PivotChart {
            pivot: Vector3::new(0.0, 0.0, crate::evalreg::median(&mut d)),
        };
        Ok(Self {
            target,
            source,
            k,
            weights,
            fixed,
            chart,
        })
    }

    pub fn loss(&self, pose: &Pose6DoF) -> Result<LossReport, LossError> {
        total_loss_with(
            self.target,
            &[(self.source.clone(), *pose)],
            &self.k,
            &self.weights,
            &self.fixed,
        )
    }

    fn scaled_loss(&self, z: &[f64]) -> Result<LossReport, LossError> {
        self.loss(&pose_from_scaled(z))
    }

    fn chart_loss(&self, z: &[f64]) -> Result<LossReport, LossError> {
        self.loss(&self.chart.to_pose(z))
    }
}

/// Central finite-difference gradient of the total loss with respect to
/// `(tx, ty, tz, rx, ry, rz)` in mm and radians. The probe step is
/// `epsilon` mm for translations and `epsilon * ROTATION_UNIT` rad for
/// rotations.
pub fn pose_gradient(problem: &PoseProblem, pose: &Pose6DoF, epsilon: f64) -> Result<[f64; 6], OptimError> {
    if !(epsilon > 0.0) {
        return Err(OptimError::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let g = fd_gradient(&|z| problem.scaled_loss(z), &pose_to_scaled(pose), epsilon, &|i| {
        POSE_NAMES[i].to_string()
    })?;
    let mut out = [0.0; 6];
    for i in 0..6 {
        out[i] = g[i] / POSE_SCALE[i];
    }
    Ok(out)
}

fn start_poses(cfg: &OptimConfig) -> Vec<Pose6DoF> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = cfg.perturb_deg.to_radians();
    (0..cfg.multi_start)
        .map(|i| {
            if i == 0 || r == 0.0 {
                return cfg.init_pose;
            }
            let mut a = cfg.init_pose.to_array();
            for v in &mut a[3..] {
                *v += rng.gen_range(-r..=r);
            }
            Pose6DoF::from_array(a)
        })
        .collect()
}

fn better(a: &OptimResult, b: &OptimResult) -> bool {
    let fa = a.final_loss().map_or(f64::INFINITY, |r| r.total);
    let fb = b.final_loss().map_or(f64::INFINITY, |r| r.total);
    match fa.total_cmp(&fb) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let (pa, pb) = (a.pose.to_array(), b.pose.to_array());
            pa.iter()
                .zip(&pb)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .is_some_and(|o| o.is_lt())
        }
    }
}

/// Minimizes the total loss over the target-to-source pose. Starts run in
/// parallel; the lowest final total wins, ties going to the
/// lexicographically smaller pose.
pub fn estimate_pose(problem: &PoseProblem, cfg: &OptimConfig) -> Result<OptimResult, OptimError> {
    cfg.validate()?;
    let starts = start_poses(cfg);
    let results: Vec<OptimResult> = starts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let m = minimize(&|z| problem.chart_loss(z), &problem.chart.from_pose(p), cfg, &|j| {
                POSE_NAMES[j].to_string()
            });
            if m.diverged {
                warn!("pose start {i} diverged after {} iterations", m.iterations);
            }
            OptimResult {
                pose: problem.chart.to_pose(&m.z),
                loss_trace: m.trace,
                converged: m.converged,
                diverged: m.diverged,
                iterations_used: m.iterations,
                start_index: i,
            }
        })
        .collect();
    let mut best = results[0].clone();
    for r in &results[1..] {
        if better(r, &best) {
            best = r.clone();
        }
    }
    Ok(best)
}

/// Sclera and cornea spheres of the target view, in its camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSphere {
    pub sclera_center: Vector3<f64>,
    pub sclera_radius: f64,
    pub cornea_center: Vector3<f64>,
    pub cornea_radius: f64,
}

impl TwoSphere {
    pub fn to_params(&self) -> [f64; 8] {
        let (s, c) = (self.sclera_center, self.cornea_center);
        [s.x, s.y, s.z, self.sclera_radius, c.x, c.y, c.z, self.cornea_radius]
    }

    pub fn from_params(p: &[f64]) -> Self {
        TwoSphere {
            sclera_center: Vector3::new(p[0], p[1], p[2]),
            sclera_radius: p[3],
            cornea_center: Vector3::new(p[4], p[5], p[6]),
            cornea_radius: p[7],
        }
    }

    /// Least-squares spheres of the sclera and cornea pixels of `depth`.
    pub fn fit(depth: &DepthMap, seg: &crate::imaging::SegMap, k: &Intrinsics) -> Result<Self, OptimError> {
        let cloud = |label| -> Result<Vec<Vector3<f64>>, OptimError> {
            let mut pts = Vec::new();
            for y in 0..seg.height() {
                for x in 0..seg.width() {
                    if seg.get(x, y) == label {
                        pts.push(
                            k.backproject(x as f64, y as f64, depth.get(x, y))
                                .map_err(LossError::from)?,
                        );
                    }
                }
            }
            Ok(pts)
        };
        let s = fit_sphere_points(&cloud(Label::Sclera)?)?;
        let c = fit_sphere_points(&cloud(Label::Cornea)?)?;
        Ok(TwoSphere {
            sclera_center: s.center,
            sclera_radius: s.radius,
            cornea_center: c.center,
            cornea_radius: c.radius,
        })
    }

    /// Depth implied by casting each sclera or cornea pixel against its
    /// sphere; eyelid pixels keep the `base` depth. A ray that misses its
    /// sphere takes the depth of its closest approach.
    pub fn depth(&self, base: &DepthMap, seg: &crate::imaging::SegMap, k: &Intrinsics) -> DepthMap {
        let mut out = base.clone();
        for y in 0..seg.height() {
            for x in 0..seg.width() {
                let (c, r) = match seg.get(x, y) {
                    Label::Sclera => (self.sclera_center, self.sclera_radius),
                    Label::Cornea => (self.cornea_center, self.cornea_radius),
                    Label::Eyelid => continue,
                };
                let d = k.ray(x as f64, y as f64);
                let b = d.dot(&c);
                let disc = b * b - c.norm_squared() + r * r;
                let t = if disc >= 0.0 { b - disc.sqrt() } else { b };
                out.set(x, y, t * d.z);
            }
        }
        out
    }
}

/// Depth parametrizations for [`refine_depth`].
#[derive(Debug, Clone, PartialEq)]
pub enum DepthMode {
    /// Eight sphere parameters; starts from `init` or from spheres fitted to
    /// the target depth.
    TwoSphere { init: Option<TwoSphere> },
    /// Offsets from `base` (the two-sphere depth of spheres fitted to the
    /// target depth when `None`), each bounded by `bound` mm through a tanh,
    /// on a control grid with `stride` pixel spacing and bilinear
    /// interpolation in between.
    PerPixel {
        base: Option<DepthMap>,
        stride: usize,
        bound: f64,
    },
}

#[derive(Debug, Clone)]
pub struct DepthFit {
    pub depth: DepthMap,
    pub spheres: Option<TwoSphere>,
    pub loss_trace: Vec<LossReport>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations_used: usize,
}

/// Control grid of per-pixel offsets.
struct OffsetGrid {
    gw: usize,
    gh: usize,
    stride: usize,
    bound: f64,
}

impl OffsetGrid {
    fn new(w: usize, h: usize, stride: usize, bound: f64) -> Self {
        let stride = stride.max(1);
        OffsetGrid {
            gw: (w - 1).div_ceil(stride) + 1,
            gh: (h - 1).div_ceil(stride) + 1,
            stride,
            bound,
        }
    }

    fn len(&self) -> usize {
        self.gw * self.gh
    }

    fn apply(&self, base: &DepthMap, z: &[f64], skip: &crate::imaging::SegMap) -> DepthMap {
        let mut out = base.clone();
        let s = self.stride as f64;
        let at = |gx: usize, gy: usize| self.bound * z[gy * self.gw + gx].tanh();
        for y in 0..base.height() {
            for x in 0..base.width() {
                if skip.get(x, y) == Label::Eyelid {
                    continue;
                }
                let (fx, fy) = (x as f64 / s, y as f64 / s);
                let (x0, y0) = ((fx as usize).min(self.gw - 2), (fy as usize).min(self.gh - 2));
                let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
                let off = at(x0, y0) * (1.0 - ax) * (1.0 - ay)
                    + at(x0 + 1, y0) * ax * (1.0 - ay)
                    + at(x0, y0 + 1) * (1.0 - ax) * ay
                    + at(x0 + 1, y0 + 1) * ax * ay;
                out.set(x, y, base.get(x, y) + off);
            }
        }
        out
    }
}

/// Minimizes the total loss over the target depth with the source poses
/// held fixed.
pub fn refine_depth(
    target: &TargetView,
    sources: &[(SourceView, Pose6DoF)],
    k: &Intrinsics,
    weights: &LossWeights,
    mode: &DepthMode,
    cfg: &OptimConfig,
) -> Result<DepthFit, OptimError> {
    cfg.validate()?;
    weights.validate()?;
    let eval = |depth: &DepthMap| total_loss(&target.with_depth(depth), sources, k, weights);
    let cfg1 = OptimConfig {
        multi_start: 1,
        ..cfg.clone()
    };
    match mode {
        DepthMode::TwoSphere { init } => {
            let init = match init {
                Some(s) => *s,
                None => TwoSphere::fit(target.depth, target.seg, k)?,
            };
            let f = |z: &[f64]| eval(&TwoSphere::from_params(z).depth(target.depth, target.seg, k));
            let names = ["sclera_x", "sclera_y", "sclera_z", "sclera_r", "cornea_x", "cornea_y", "cornea_z", "cornea_r"];
            let m = minimize(&f, &init.to_params(), &cfg1, &|i| names[i].to_string());
            let spheres = TwoSphere::from_params(&m.z);
            Ok(DepthFit {
                depth: spheres.depth(target.depth, target.seg, k),
                spheres: Some(spheres),
                loss_trace: m.trace,
                converged: m.converged,
                diverged: m.diverged,
                iterations_used: m.iterations,
            })
        }
        DepthMode::PerPixel { base, stride, bound } => {
            let base = match base {
                Some(b) => b.clone(),
                None => TwoSphere::fit(target.depth, target.seg, k)?.depth(target.depth, target.seg, k),
            };
            if !(*bound > 0.0) {
                return Err(OptimError::InvalidConfig(format!("offset bound must be positive, got {bound}")));
            }
            let grid = OffsetGrid::new(base.width(), base.height(), *stride, *bound);
            let f = |z: &[f64]| eval(&grid.apply(&base, z, target.seg));
            let m = minimize(&f, &vec![0.0; grid.len()], &cfg1, &|i| {
                format!("offset({}, {})", i % grid.gw, i / grid.gw)
            });
            Ok(DepthFit {
                depth: grid.apply(&base, &m.z, target.seg),
                spheres: None,
                loss_trace: m.trace,
                converged: m.converged,
                diverged: m.diverged,
                iterations_used: m.iterations,
            })
        }
    }
}

/// Settings of [`register_joint`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointConfig {
    /// First pose stage; the second stage reuses it with a single start.
    pub pose: OptimConfig,
    pub depth: OptimConfig,
    /// Control grid spacing of the depth offsets, pixels.
    pub stride: usize,
    /// Offset bound, mm.
    pub bound: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            pose: OptimConfig::default(),
            depth: OptimConfig {
                max_iters: 20,
                multi_start: 1,
                ..OptimConfig::default()
            },
            stride: 8,
            bound: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointResult {
    /// Pose from the prior depth.
    pub initial: OptimResult,
    pub depth: DepthFit,
    /// Pose re-estimated on the refined depth.
    pub pose: OptimResult,
}

/// Pose and target depth from a depth prior: estimates the pose on the
/// prior, refines per-pixel offsets from the prior with that pose held,
/// then re-estimates the pose on the refined depth from the first estimate.
pub fn register_joint(
    frame: &Frame,
    seg: &SegMap,
    prior: &DepthMap,
    source: &SourceView,
    k: &Intrinsics,
    weights: &LossWeights,
    cfg: &JointConfig,
) -> Result<JointResult, OptimError> {
    let tv = TargetView::new(frame, seg, prior)?;
    let initial = estimate_pose(&PoseProblem::new(&tv, source, *k, *weights)?, &cfg.pose)?;
    let mode = DepthMode::PerPixel {
        base: Some(prior.clone()),
        stride: cfg.stride,
        bound: cfg.bound,
    };
    let depth = refine_depth(&tv, &[(source.clone(), initial.pose)], k, weights, &mode, &cfg.depth)?;
    let tv2 = TargetView::new(frame, seg, &depth.depth)?;
    let second = OptimConfig {
        init_pose: initial.pose,
        multi_start: 1,
        ..cfg.pose.clone()
    };
    let pose = estimate_pose(&PoseProblem::new(&tv2, source, *k, *weights)?, &second)?;
    Ok(JointResult { initial, depth, pose })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{Frame, SegMap};
    use crate::synth::{default_intrinsics, relative_pose, render, EyeModel, Light, SceneSample};

    fn pair(pose_s: Pose6DoF, light: Light) -> (SceneSample, SceneSample) {
        let m = EyeModel::default_eye(11);
        let k = default_intrinsics();
        (
            render(&m, &Pose6DoF::IDENTITY, &k, &light).unwrap(),
            render(&m, &pose_s, &k, &light).unwrap(),
        )
    }

    fn views<'a>(t: &'a SceneSample, s: &'a SceneSample) -> (TargetView<'a>, SourceView<'a>) {
        (
            TargetView::new(&t.frame, &t.seg, &t.depth).unwrap(),
            SourceView::new(&s.frame, &s.seg).unwrap(),
        )
    }

    fn quick() -> OptimConfig {
        OptimConfig {
            multi_start: 1,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        for bad in [
            OptimConfig { max_iters: 0, ..quick() },
            OptimConfig { fd_epsilon: 0.0, ..quick() },
            OptimConfig { convergence_tol: -1.0, ..quick() },
            OptimConfig { multi_start: 0, ..quick() },
            OptimConfig { step_rule: StepRule::Fixed(0.0), ..quick() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn identical_frames_converge_to_identity() {
        let (t, _) = pair(Pose6DoF::IDENTITY, Light::default());
        let (tv, sv) = views(&t, &t);
        let p = PoseProblem::new(&tv, &sv, default_intrinsics(), LossWeights::SYNTHETIC).unwrap();
        let cfg = OptimConfig {
            init_pose: Pose6DoF::new(0.3, -0.2, 0.4, 0.004, -0.003, 0.005),
            ..quick()
        };
        let r = estimate_pose(&p, &cfg).unwrap();
        let (dt, da) = r.pose.distance(&Pose6DoF::IDENTITY);
        assert!(dt < 0.01 && da.to_degrees() < 0.01, "{dt} {}", da.to_degrees());
        for w in r.loss_trace.windows(2) {
            assert!(w[1].total < w[0].total);
        }
    }

    #[test]
    fn truth_is_a_grid_minimum_and_gradient_signs_follow_tz() {
        let ps = Pose6DoF::new(0.5, -0.3, 0.2, 0.01, -0.015, 0.02);
        let (t, s) = pair(ps, Light::default());
        let (tv, sv) = views(&t, &s);
        let p = PoseProblem::new(&tv, &sv, default_intrinsics(), LossWeights::SYNTHETIC).unwrap();
        let truth = relative_pose(&t.pose, &s.pose);
        let at = truth.to_array();
        let l0 = p.loss(&truth).unwrap().total;
        let delta = [0.05, 0.05, 0.05, 0.001, 0.001, 0.001];
        let mut lower = 0;
        for code in 0..729usize {
            if code == 364 {
                continue;
            }
            let mut q = at;
            let mut c = code;
            for i in 0..6 {
                q[i] += (c % 3) as f64 * delta[i] - delta[i];
                c /= 3;
            }
            if p.loss(&Pose6DoF::from_array(q)).unwrap().total < l0 {
                lower += 1;
            }
        }
        assert_eq!(lower, 0);

        let g0 = pose_gradient(&p, &truth, 0.01).unwrap();
        let mut off = at;
        off[2] += 0.5;
        let g1 = pose_gradient(&p, &Pose6DoF::from_array(off), 0.01).unwrap();
        let norm = |g: &[f64; 6]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(g1[2] > 0.0, "{g1:?}");
        assert!(norm(&g0) < norm(&g1), "{g0:?} vs {g1:?}");
        assert!(g0[..3].iter().all(|v| v.abs() < 0.05), "{g0:?}");
        assert!(pose_gradient(&p, &truth, 0.0).is_err());
    }

    #[test]
    fn recovers_pose_with_true_depth() {
        let ps = Pose6DoF::new(0.8, -0.6, 0.5, 1.5f64.to_radians(), -1.0f64.to_radians(), 1.2f64.to_radians());
        let (t, s) = pair(ps, Light::default());
        let (tv, sv) = views(&t, &s);
        let p = PoseProblem::new(&tv, &sv, default_intrinsics(), LossWeights::SYNTHETIC).unwrap();
        let r = estimate_pose(&p, &quick()).unwrap();
        let (dt, da) = r.pose.distance(&relative_pose(&t.pose, &s.pose));
        assert!(dt < 0.2 && da.to_degrees() < 0.2, "{dt} mm {} deg", da.to_degrees());
        assert!(!r.diverged);
    }

    #[test]
    fn multi_start_is_deterministic() {
        let ps = Pose6DoF::new(0.2, 0.1, 0.0, 0.01, 0.0, 0.0);
        let (t, s) = pair(ps, Light::default());
        let (tv, sv) = views(&t, &s);
        let p = PoseProblem::new(&tv, &sv, default_intrinsics(), LossWeights::SYNTHETIC).unwrap();
        let cfg = OptimConfig {
            multi_start: 3,
            max_iters: 15,
            ..OptimConfig::default()
        };
        let a = estimate_pose(&p, &cfg).unwrap();
        let b = estimate_pose(&p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_step_runs_and_flat_loss_converges() {
        let f = Frame::filled(64, 64, [0.5; 3]);
        let seg = SegMap::filled(64, 64, Label::Sclera);
        let d = DepthMap::filled(64, 64, 40.0);
        let tv = TargetView::new(&f, &seg, &d).unwrap();
        let sv = SourceView::new(&f, &seg).unwrap();
        let w = LossWeights {
            alpha_sfl: 0.0,
            ..LossWeights::SYNTHETIC
        };
        let p = PoseProblem::new(&tv, &sv, default_intrinsics(), w).unwrap();
        let cfg = OptimConfig {
            step_rule: StepRule::Fixed(0.1),
            max_iters: 5,
            ..quick()
        };
        let r = estimate_pose(&p, &cfg).unwrap();
        assert!(r.converged);
        let (dt, da) = r.pose.distance(&Pose6DoF::IDENTITY);
        assert!(dt < 1e-9 && da < 1e-9);
    }

    const PHOTO: LossWeights = LossWeights {
        alpha_srl: 0.0,
        alpha_ds: 0.0,
        ..LossWeights::SYNTHETIC
    };

    fn four_sources(m: &EyeModel, light: &Light) -> (SceneSample, Vec<(SceneSample, Pose6DoF)>) {
        let k = default_intrinsics();
        let d = f64::to_radians;
        let t = render(m, &Pose6DoF::IDENTITY, &k, light).unwrap();
        let sources = [
            Pose6DoF::new(1.5, 0.5, 0.0, d(-0.5), d(2.0), 0.0),
            Pose6DoF::new(-1.2, -1.0, 0.3, d(1.5), d(-2.0), 0.0),
            Pose6DoF::new(0.3, 1.5, -0.3, d(-2.0), d(0.3), 0.01),
            Pose6DoF::new(-0.4, -1.6, 0.2, d(2.0), d(-0.4), -0.01),
        ]
        .iter()
        .map(|ps| {
            let s = render(m, ps, &k, light).unwrap();
            let rel = relative_pose(&t.pose, &s.pose);
            (s, rel)
        })
        .collect();
        (t, sources)
    }

    fn true_spheres(m: &EyeModel) -> TwoSphere {
        TwoSphere {
            sclera_center: m.sclera_center,
            sclera_radius: m.sclera_radius,
            cornea_center: m.cornea_center,
            cornea_radius: m.cornea_radius,
        }
    }

    fn fit_spheres(init: TwoSphere) -> (f64, TwoSphere, TwoSphere) {
        let m = EyeModel::default_eye(11);
        let k = default_intrinsics();
        let (t, src) = four_sources(&m, &Light::default());
        let tv = TargetView::new(&t.frame, &t.seg, &t.depth).unwrap();
        let views: Vec<_> = src.iter().map(|(s, rel)| (SourceView::new(&s.frame, &s.seg).unwrap(), *rel)).collect();
        let cfg = OptimConfig {
            max_iters: 200,
            convergence_tol: 1e-13,
            ..quick()
        };
        let fit = refine_depth(&tv, &views, &k, &PHOTO, &DepthMode::TwoSphere { init: Some(init) }, &cfg).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for y in 0..t.depth.height() {
            for x in 0..t.depth.width() {
                if t.seg.get(x, y) != Label::Eyelid {
                    sum += (fit.depth.get(x, y) - t.depth.get(x, y)).abs();
                    n += 1;
                }
            }
        }
        (sum / n as f64, fit.spheres.unwrap(), true_spheres(&m))
    }

    #[test]
    fn two_sphere_init_at_truth_stays_near_true_depth() {
        let m = EyeModel::default_eye(11);
        let (err, fit, truth) = fit_spheres(true_spheres(&m));
        assert!(err < 0.1, "{err}");
        assert!((fit.sclera_radius / truth.sclera_radius - 1.0).abs() < 0.01, "{fit:?}");
    }

    #[test]
    fn two_sphere_recovers_perturbed_sclera_radius() {
        let m = EyeModel::default_eye(11);
        let init = TwoSphere {
            sclera_radius: m.sclera_radius * 1.1,
            ..true_spheres(&m)
        };
        let (_, fit, truth) = fit_spheres(init);
        assert!((fit.sclera_radius / truth.sclera_radius - 1.0).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn per_pixel_offsets_recover_a_scleral_bump() {
        let k = default_intrinsics();
        let smooth = EyeModel::default_eye(11);
        let mut m = smooth.clone();
        m.bumps.push(crate::synth::ScleraBump {
            direction: Vector3::new(8.0, 0.0, -8.94).normalize(),
            height: 2.0,
            sigma: 0.12,
        });
        let (t, src) = four_sources(&m, &Light::default());
        let base = true_spheres(&smooth).depth(&t.depth, &t.seg, &k);
        let tv = TargetView::new(&t.frame, &t.seg, &base).unwrap();
        let views: Vec<_> = src.iter().map(|(s, rel)| (SourceView::new(&s.frame, &s.seg).unwrap(), *rel)).collect();
        let mode = DepthMode::PerPixel {
            base: Some(base.clone()),
            stride: 8,
            bound: 3.0,
        };
        let cfg = OptimConfig { max_iters: 60, ..quick() };
        let w = LossWeights { alpha_sfl: 0.0, ..PHOTO };
        let fit = refine_depth(&tv, &views, &k, &w, &mode, &cfg).unwrap();
        let (mut before, mut after, mut n) = (0.0, 0.0, 0);
        for y in 0..t.depth.height() {
            for x in 0..t.depth.width() {
                let truth = t.depth.get(x, y);
                if t.seg.get(x, y) != Label::Eyelid && (base.get(x, y) - truth).abs() > 0.2 {
                    before += (base.get(x, y) - truth).abs();
                    after += (fit.depth.get(x, y) - truth).abs();
                    n += 1;
                }
            }
        }
        assert!(n > 100, "{n}");
        let (before, after) = (before / n as f64, after / n as f64);
        assert!(after < 0.5 && after < before, "{after} vs {before}");
    }

    #[test]
    fn joint_registration_refines_a_rippled_prior() {
        let m = EyeModel::default_eye(11);
        let k = default_intrinsics();
        let light = Light::default();
        let t = render(&m, &Pose6DoF::IDENTITY, &k, &light).unwrap();
        let s = render(&m, &Pose6DoF::new(0.6, -0.4, 0.2, 0.015, -0.01, 0.005), &k, &light).unwrap();
        let tau = std::f64::consts::TAU;
        let prior = DepthMap::from_fn(64, 64, |x, y| {
            t.depth.get(x, y) + 1.0 * (tau * x as f64 / 48.0).sin() * (tau * y as f64 / 48.0 + 1.0).sin()
        });
        let cfg = JointConfig {
            pose: quick(),
            ..JointConfig::default()
        };
        let sv = SourceView::new(&s.frame, &s.seg).unwrap();
        let r = register_joint(&t.frame, &t.seg, &prior, &sv, &k, &LossWeights::SYNTHETIC, &cfg).unwrap();
        let truth = relative_pose(&t.pose, &s.pose);
        let (dt, _) = r.pose.pose.distance(&truth);
        let (dt0, _) = r.initial.pose.distance(&truth);
        assert!(dt < 0.5, "{dt}");
        assert!(r.depth.loss_trace.last().unwrap().total <= r.depth.loss_trace[0].total);
        assert!(dt <= dt0 + 0.05, "{dt} after {dt0}");
    }

    #[test]
    fn offset_grid_interpolates_between_nodes() {
        let g = OffsetGrid::new(9, 5, 4, 2.0);
        assert_eq!((g.gw, g.gh), (3, 2));
        let base = DepthMap::filled(9, 5, 10.0);
        let seg = SegMap::filled(9, 5, Label::Sclera);
        let mut z = vec![0.0; 6];
        z[1] = 0.5f64.atanh();
        let d = g.apply(&base, &z, &seg);
        assert!((d.get(4, 0) - 11.0).abs() < 1e-12);
        assert!((d.get(2, 0) - 10.5).abs() < 1e-12);
        assert!((d.get(4, 2) - 10.5).abs() < 1e-12);
    }
}
