//! Synthetic slit-lamp scenes: a two-sphere eye seen by a pinhole camera
//! with a point light mounted at the camera center.
//!
//! The eye is static in the world frame and the camera moves; a
//! [`SceneSample`] pose is camera-from-world. Rays are cast against the
//! union of the sclera and cornea spheres, so the nearest surface wins.
//! Eyelids are painted onto the eyeball as bands with a sinusoidal edge and
//! rays that miss the eye see a background plane, also labeled eyelid.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{CameraError, Intrinsics, Pose6DoF};
use crate::evalreg::AnnotatedPoint;
use crate::imaging::{DepthMap, Frame, Label, Raster, SegMap};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid eye model: {0}")]
    InvalidModel(String),
    #[error("camera center {0:?} lies inside the eye")]
    CameraInside([f64; 3]),
    #[error("eye is not in front of the camera")]
    EyeBehindCamera,
    #[error("a sequence needs at least two poses, got {0}")]
    ShortTrajectory(usize),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// A stained spot on the eye surface, used as a trackable landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PunctateDot {
    pub point: Vector3<f64>,
    pub radius: f64,
}

/// Gaussian radial bump on the sclera, in directions from its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScleraBump {
    pub direction: Vector3<f64>,
    /// Outward displacement at the peak, mm.
    pub height: f64,
    /// Angular width, radians.
    pub sigma: f64,
}

/// Eyelid bands in eye coordinates (relative to the sclera center, y down).
/// A point is covered by the upper lid when
/// `y < upper + amplitude * sin(2 pi x / wavelength)`, and by the lower lid
/// when `y > lower + amplitude * sin(2 pi x / wavelength + pi / 3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EyelidBand {
    pub upper: f64,
    pub lower: f64,
    pub amplitude: f64,
    pub wavelength: f64,
}

impl EyelidBand {
    pub fn covers(&self, q: &Vector3<f64>) -> bool {
        let ph = 2.0 * std::f64::consts::PI * q.x / self.wavelength;
        q.y < self.upper + self.amplitude * ph.sin()
            || q.y > self.lower + self.amplitude * (ph + std::f64::consts::FRAC_PI_3).sin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EyeModel {
    pub sclera_center: Vector3<f64>,
    pub sclera_radius: f64,
    pub cornea_center: Vector3<f64>,
    pub cornea_radius: f64,
    pub texture_seed: u64,
    pub punctate_dots: Vec<PunctateDot>,
    pub eyelid: EyelidBand,
    pub bumps: Vec<ScleraBump>,
}

/// Surface hit by a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Sclera,
    Cornea,
}

impl Surface {
    pub fn label(self) -> Label {
        match self {
            Surface::Sclera => Label::Sclera,
            Surface::Cornea => Label::Cornea,
        }
    }
}

/// Camera-mounted point light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub ambient: f64,
    pub diffuse: f64,
    /// Specular strength on the cornea.
    pub specular: f64,
    /// Specular strength of the tear film on the sclera.
    pub sclera_specular: f64,
    pub shininess: f64,
    /// Distance at which the inverse-square falloff equals 1; `None`
    /// disables the falloff.
    pub falloff_ref: Option<f64>,
    /// Gaussian width of a vertical slit beam, as a horizontal ray slope
    /// `x / z` in camera coordinates; `None` lights the whole field.
    pub slit_width: Option<f64>,
}

impl Default for Light {
    fn default() -> Self {
        Light {
            ambient: 0.3,
            diffuse: 0.7,
            specular: 0.25,
            sclera_specular: 0.0,
            shininess: 30.0,
            falloff_ref: Some(50.0),
            slit_width: None,
        }
    }
}

impl Light {
    /// Uniform illumination independent of the camera position.
    pub fn flat() -> Self {
        Light {
            ambient: 1.0,
            diffuse: 0.0,
            specular: 0.0,
            sclera_specular: 0.0,
            shininess: 1.0,
            falloff_ref: None,
            slit_width: None,
        }
    }

    /// Narrow vertical beam with a strong corneal reflex, the lighting of
    /// a slit-lamp examination.
    pub fn slit_lamp() -> Self {
        Light {
            ambient: 0.1,
            diffuse: 0.9,
            specular: 1.2,
            sclera_specular: 0.6,
            shininess: 8.0,
            falloff_ref: Some(50.0),
            slit_width: Some(0.05),
        }
    }

    fn beam(&self, ray_cam: &Vector3<f64>) -> f64 {
        self.slit_width
            .map_or(1.0, |w| (-0.5 * (ray_cam.x / (ray_cam.z * w)).powi(2)).exp())
    }
}

/// 64x64 camera whose view of the default eye is mostly sclera and cornea.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics::new(160.0, 160.0, 31.5, 31.5, 64, 64).expect("valid intrinsics")
}

/// Rays per axis of the tent filter that antialiases colors.
const SUPERSAMPLE: usize = 6;
/// Tent filter radius, pixels.
const FILTER_RADIUS: f64 = 1.5;
const DOT_COLOR: [f64; 3] = [0.55, 0.95, 0.35];
const BACKGROUND: [f64; 3] = [0.08, 0.06, 0.06];

impl EyeModel {
    /// Sclera r = 12 mm at 50 mm on the optical axis, cornea r = 7.8 mm with
    /// its center 5 mm closer to the camera, and 24 landmark dots.
    pub fn default_eye(texture_seed: u64) -> Self {
        let mut m = EyeModel {
            sclera_center: Vector3::new(0.0, 0.0, 50.0),
            sclera_radius: 12.0,
            cornea_center: Vector3::new(0.0, 0.0, 45.0),
            cornea_radius: 7.8,
            texture_seed,
            punctate_dots: Vec::new(),
            eyelid: EyelidBand {
                upper: -7.0,
                lower: 7.5,
                amplitude: 0.8,
                wavelength: 14.0,
            },
            bumps: Vec::new(),
        };
        m.scatter_dots(24, 0.45, texture_seed ^ 0x5eed_d075);
        m
    }

    /// Replaces the dots with `n` dots placed uniformly over the front of
    /// the eye inside a 9 mm disk around the axis, skipping eyelid cover.
    pub fn scatter_dots(&mut self, n: usize, radius: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.punctate_dots.clear();
        let mut guard = 0;
        while self.punctate_dots.len() < n && guard < 100 * n {
            guard += 1;
            let x = rng.gen_range(-9.0..9.0);
            let y = rng.gen_range(-9.0..9.0);
            if x * x + y * y > 81.0 {
                continue;
            }
            let origin = self.sclera_center + Vector3::new(x, y, -3.0 * self.sclera_radius);
            let Some((t, _)) = self.intersect(&origin, &Vector3::z()) else {
                continue;
            };
            let p = origin + t * Vector3::z();
            if self.eyelid.covers(&(p - self.sclera_center)) {
                continue;
            }
            if self
                .punctate_dots
                .iter()
                .any(|d| (d.point - p).norm() < 4.0 * radius)
            {
                continue;
            }
            self.punctate_dots.push(PunctateDot { point: p, radius });
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: &str| Err(SynthError::InvalidModel(s.into()));
        if !(self.sclera_radius > 0.0 && self.cornea_radius > 0.0) {
            return bad("radii must be positive");
        }
        if self.cornea_radius >= self.sclera_radius {
            return bad("cornea radius must be smaller than sclera radius");
        }
        let d = (self.cornea_center - self.sclera_center).norm();
        if !(d < self.sclera_radius + self.cornea_radius && d > self.sclera_radius - self.cornea_radius) {
            return bad("spheres do not intersect");
        }
        if self.bumps.iter().any(|b| !(b.sigma > 0.0 && b.height.is_finite())) {
            return bad("bump sigma must be positive");
        }
        Ok(())
    }

    fn inside(&self, p: &Vector3<f64>) -> bool {
        (p - self.cornea_center).norm() < self.cornea_radius || self.sclera_implicit(p) < 0.0
    }

    fn sclera_radius_towards(&self, dir: &Vector3<f64>) -> f64 {
        self.sclera_radius
            + self
                .bumps
                .iter()
                .map(|b| {
                    let a = dir.dot(&b.direction.normalize()).clamp(-1.0, 1.0).acos();
                    b.height * (-0.5 * (a / b.sigma).powi(2)).exp()
                })
                .sum::<f64>()
    }

    fn sclera_implicit(&self, p: &Vector3<f64>) -> f64 {
        let q = p - self.sclera_center;
        let n = q.norm();
        if self.bumps.is_empty() || n == 0.0 {
            return n - self.sclera_radius;
        }
        n - self.sclera_radius_towards(&(q / n))
    }

    fn max_sclera_radius(&self) -> f64 {
        self.sclera_radius + self.bumps.iter().map(|b| b.height.max(0.0)).sum::<f64>()
    }

    /// Nearest intersection of the ray `origin + t dir` (unit `dir`, t > 0)
    /// with the eye surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Surface)> {
        let cornea = sphere_hit(origin, dir, &self.cornea_center, self.cornea_radius);
        let sclera = if self.bumps.is_empty() {
            sphere_hit(origin, dir, &self.sclera_center, self.sclera_radius)
        } else {
            self.march_sclera(origin, dir)
        };
        match (cornea, sclera) {
            (Some(c), Some(s)) if c <= s => Some((c, Surface::Cornea)),
            (_, Some(s)) => Some((s, Surface::Sclera)),
            (Some(c), None) => Some((c, Surface::Cornea)),
            (None, None) => None,
        }
    }

    fn march_sclera(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let oc = origin - self.sclera_center;
        let b = oc.dot(dir);
        let rmax = self.max_sclera_radius();
        let disc = b * b - oc.norm_squared() + rmax * rmax;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let (t0, t1) = ((-b - sq).max(0.0), -b + sq);
        let f = |t: f64| self.sclera_implicit(&(origin + t * dir));
        let step = 0.02;
        let mut a = t0;
        let mut fa = f(a);
        while a < t1 {
            let c = (a + step).min(t1);
            let fc = f(c);
            if fa > 0.0 && fc <= 0.0 {
                let (mut lo, mut hi) = (a, c);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            a = c;
            fa = fc;
        }
        None
    }

    fn normal(&self, p: &Vector3<f64>, surface: Surface) -> Vector3<f64> {
        match surface {
            Surface::Cornea => (p - self.cornea_center).normalize(),
            Surface::Sclera if self.bumps.is_empty() => (p - self.sclera_center).normalize(),
            Surface::Sclera => {
                let h = 1e-5;
                let g = Vector3::new(
                    self.sclera_implicit(&(p + Vector3::x() * h)) - self.sclera_implicit(&(p - Vector3::x() * h)),
                    self.sclera_implicit(&(p + Vector3::y() * h)) - self.sclera_implicit(&(p - Vector3::y() * h)),
                    self.sclera_implicit(&(p + Vector3::z() * h)) - self.sclera_implicit(&(p - Vector3::z() * h)),
                );
                g.normalize()
            }
        }
    }

    /// Label of a surface point: eyelid where a lid band covers it.
    pub fn label_at(&self, p: &Vector3<f64>, surface: Surface) -> Label {
        if self.eyelid.covers(&(p - self.sclera_center)) {
            Label::Eyelid
        } else {
            surface.label()
        }
    }

    /// Unshaded color of a surface point.
    pub fn albedo(&self, p: &Vector3<f64>, surface: Surface) -> [f64; 3] {
        let q = p - self.sclera_center;
        let seed = self.texture_seed;
        if self.eyelid.covers(&q) {
            let n = fbm(&(q * 1.1), seed ^ 0xe1e1, 2);
            return scale([0.80, 0.60, 0.50], 0.8 + 0.3 * n);
        }
        for d in &self.punctate_dots {
            if (p - d.point).norm() < d.radius {
                return DOT_COLOR;
            }
        }
        match surface {
            Surface::Sclera => {
                let blotch = fbm(&(q * 0.25), seed ^ 0xb10c, 2);
                let base = scale([0.93, 0.86, 0.82], 0.9 + 0.15 * blotch);
                let ridge = |f: f64, s: u64| 1.0 - (2.0 * fbm(&(q * f), seed ^ s, 2) - 1.0).abs();
                let v1 = smoothstep(0.72, 0.95, ridge(0.3, 0x7e1));
                let v2 = smoothstep(0.80, 0.97, ridge(0.6, 0x7e2)) * 0.5;
                mix(base, [0.72, 0.22, 0.2], (v1 + v2).min(1.0) * 0.75)
            }
            Surface::Cornea => {
                let c = p - self.cornea_center;
                let axis = (self.cornea_center - self.sclera_center).normalize();
                let (e1, e2) = orthonormal_basis(&axis);
                let radial = c - c.dot(&axis) * axis;
                let rho = radial.norm();
                if rho < 1.8 {
                    return [0.05, 0.05, 0.07];
                }
                let theta = radial.dot(&e2).atan2(radial.dot(&e1));
                let n = fbm(&(c * 0.5), seed ^ 0xc0e, 2);
                let spokes = 0.5 + 0.5 * (12.0 * theta + 4.0 * n).sin();
                let ring = 0.5 + 0.5 * (1.5 * rho + 3.0 * n).sin();
                let limbus = smoothstep(4.2, 5.4, rho);
                let iris = scale([0.48, 0.32, 0.18], 0.55 + 0.3 * spokes + 0.25 * ring);
                mix(iris, [0.22, 0.16, 0.12], limbus * 0.7)
            }
        }
    }

    /// Camera center (world frame) of a camera-from-world pose.
    pub fn camera_center(pose: &Pose6DoF) -> Vector3<f64> {
        -(pose.rotation().transpose() * pose.translation())
    }

    /// Pixel where world point `p` appears in a camera with `pose`, if it is
    /// in front of the camera, inside the image, and not occluded.
    pub fn visible_pixel(&self, p: &Vector3<f64>, pose: &Pose6DoF, k: &Intrinsics) -> Option<(f64, f64)> {
        let pc = pose.transform_point(p);
        if pc.z <= 0.0 {
            return None;
        }
        let (u, v) = k.project(&pc).ok()?;
        if !(u >= 0.0 && v >= 0.0 && u <= (k.width - 1) as f64 && v <= (k.height - 1) as f64) {
            return None;
        }
        let o = Self::camera_center(pose);
        let dist = (p - o).norm();
        let (t, _) = self.intersect(&o, &((p - o) / dist))?;
        ((t - dist).abs() < 1e-6).then_some((u, v))
    }
}

fn sphere_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = origin - c;
    let b = oc.dot(dir);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t = -b - sq;
    if t > 0.0 {
        return Some(t);
    }
    let t = -b + sq;
    (t > 0.0).then_some(t)
}

fn orthonormal_basis(a: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = a.cross(&helper).normalize();
    (e1, a.cross(&e1))
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    a.map(|v| v * s)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (iz as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in [0, 1] with smooth fade.
fn value_noise(p: &Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let (ix, iy, iz) = (f.x as i64, f.y as i64, f.z as i64);
    let fade = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty, tz) = (fade(p.x - f.x), fade(p.y - f.y), fade(p.z - f.z));
    let l = |dx, dy, dz| lattice(ix + dx, iy + dy, iz + dz, seed);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let x00 = lerp(l(0, 0, 0), l(1, 0, 0), tx);
    let x10 = lerp(l(0, 1, 0), l(1, 1, 0), tx);
    let x01 = lerp(l(0, 0, 1), l(1, 0, 1), tx);
    let x11 = lerp(l(0, 1, 1), l(1, 1, 1), tx);
    lerp(lerp(x00, x10, ty), lerp(x01, x11, ty), tz)
}

fn fbm(p: &Vector3<f64>, seed: u64, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut amp = 0.5;
    let mut norm = 0.0;
    let mut q = *p;
    for o in 0..octaves {
        sum += amp * value_noise(&q, seed.wrapping_add(o as u64 * 0x51));
        norm += amp;
        amp *= 0.5;
        q *= 2.03;
    }
    sum / norm
}

/// One rendered view with exact geometry.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub frame: Frame,
    pub depth: DepthMap,
    pub seg: SegMap,
    /// Camera-from-world.
    pub pose: Pose6DoF,
    /// World-frame eye surface point seen at each pixel center; `None` where
    /// the ray misses the eye.
    pub surface: Vec<Option<Vector3<f64>>>,
}

impl SceneSample {
    pub fn surface_point(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        self.surface[y * self.frame.width() + x]
    }

    /// Target-to-source pose taking this view's camera coordinates into
    /// `source`'s.
    pub fn pose_to(&self, source: &SceneSample) -> Pose6DoF {
        relative_pose(&self.pose, &source.pose)
    }
}

/// Pose mapping camera coordinates of the target view into those of the
/// source view, both poses being camera-from-world.
pub fn relative_pose(target: &Pose6DoF, source: &Pose6DoF) -> Pose6DoF {
    source.compose(&target.inverse())
}

/// Color seen along one world-frame ray from the camera center.
fn shade_ray(model: &EyeModel, origin: &Vector3<f64>, dc: &Vector3<f64>, rt: &Matrix3<f64>, light: &Light) -> [f64; 3] {
    let dw = rt * dc;
    let beam = light.beam(dc);
    let Some((t, s)) = model.intersect(origin, &dw) else {
        return scale(BACKGROUND, light.ambient + light.diffuse * beam);
    };
    let p = origin + t * dw;
    let ndl = model.normal(&p, s).dot(&(-dw)).max(0.0);
    let fall = beam * light.falloff_ref.map_or(1.0, |r| (r / t).powi(2));
    let ks = match s {
        _ if model.label_at(&p, s) == Label::Eyelid => 0.0,
        Surface::Cornea => light.specular,
        Surface::Sclera => light.sclera_specular,
    };
    let spec = ks * ndl.powf(light.shininess) * fall;
    let shade = light.ambient + light.diffuse * ndl * fall;
    model.albedo(&p, s).map(|a| a * shade + spec)
}

/// Renders one view of the eye. Depth, labels and surface points are exact
/// at pixel centers; colors are tent-filtered over a regular grid of rays.
pub fn render(model: &EyeModel, pose: &Pose6DoF, k: &Intrinsics, light: &Light) -> Result<SceneSample, SynthError> {
    model.validate()?;
    let origin = EyeModel::camera_center(pose);
    if model.inside(&origin) {
        return Err(SynthError::CameraInside([origin.x, origin.y, origin.z]));
    }
    if pose.transform_point(&model.sclera_center).z <= 0.0 {
        return Err(SynthError::EyeBehindCamera);
    }
    let rt = pose.rotation().transpose();
    let (w, h) = (k.width, k.height);
    let mut rgb = Raster::zeros(w, h, 3);
    let mut depth = vec![0.0; w * h];
    let mut labels = vec![Label::Eyelid; w * h];
    let mut surface = vec![None; w * h];
    let plane_z = model.sclera_center.z;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dc = k.ray(x as f64, y as f64);
            let dw = rt * dc;
            match model.intersect(&origin, &dw) {
                Some((t, s)) => {
                    let p = origin + t * dw;
                    depth[i] = t * dc.z;
                    labels[i] = model.label_at(&p, s);
                    surface[i] = Some(p);
                }
                None => {
                    let t = if dw.z.abs() > 1e-12 { (plane_z - origin.z) / dw.z } else { f64::NAN };
                    let d = t * dc.z;
                    depth[i] = if d.is_finite() && d > 0.0 { d } else { plane_z };
                }
            }
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let off = |j: usize| ((j as f64 + 0.5) * 2.0 / SUPERSAMPLE as f64 - 1.0) * FILTER_RADIUS;
                    let (ox, oy) = (off(sx), off(sy));
                    let wt = (1.0 - ox.abs() / FILTER_RADIUS) * (1.0 - oy.abs() / FILTER_RADIUS);
                    let d = k.ray(x as f64 + ox, y as f64 + oy);
                    let c = shade_ray(model, &origin, &d, &rt, light);
                    for ch in 0..3 {
                        acc[ch] += wt * c[ch];
                    }
                    wsum += wt;
                }
            }
            for ch in 0..3 {
                rgb.put(x, y, ch, acc[ch] / wsum);
            }
        }
    }
    Ok(SceneSample {
        frame: Frame::from_raster_clamped(rgb),
        depth: DepthMap::new(w, h, depth).expect("finite depth"),
        seg: SegMap::new(w, h, labels).expect("sized labels"),
        pose: *pose,
        surface,
    })
}

/// Renders every pose of a trajectory, in order.
pub fn make_sequence(
    model: &EyeModel,
    trajectory: &[Pose6DoF],
    k: &Intrinsics,
    light: &Light,
) -> Result<Vec<SceneSample>, SynthError> {
    if trajectory.len() < 2 {
        return Err(SynthError::ShortTrajectory(trajectory.len()));
    }
    trajectory.par_iter().map(|p| render(model, p, k, light)).collect()
}

/// Smooth random camera trajectory starting at the identity: per-frame
/// velocity changes are drawn uniformly and the velocity is capped so each
/// step stays below `max_step_deg` of rotation and `max_step_mm` of
/// translation on every axis.
pub fn random_trajectory(n: usize, max_step_deg: f64, max_step_mm: f64, seed: u64) -> Vec<Pose6DoF> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rmax = max_step_deg.to_radians();
    let mut vel = [0.0; 6];
    let mut state = [0.0; 6];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(Pose6DoF::from_array(state));
        for (i, v) in vel.iter_mut().enumerate() {
            let cap = if i < 3 { max_step_mm } else { rmax };
            *v = (*v + rng.gen_range(-0.5..0.5) * cap).clamp(-cap, cap);
        }
        for i in 0..6 {
            state[i] += vel[i];
        }
    }
    out
}

/// Landmark annotations of one view: every dot center that is visible and
/// not under an eyelid, with id `dot<index>`.
pub fn annotate(model: &EyeModel, sample: &SceneSample, k: &Intrinsics) -> Vec<AnnotatedPoint> {
    model
        .punctate_dots
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            let (u, v) = model.visible_pixel(&d.point, &sample.pose, k)?;
            let s = nearest_surface(model, &d.point);
            (model.label_at(&d.point, s) != Label::Eyelid).then(|| AnnotatedPoint {
                id: format!("dot{i}"),
                u,
                v,
                region: s.label(),
            })
        })
        .collect()
}

fn nearest_surface(model: &EyeModel, p: &Vector3<f64>) -> Surface {
    let dc = ((p - model.cornea_center).norm() - model.cornea_radius).abs();
    let ds = model.sclera_implicit(p).abs();
    if dc <= ds {
        Surface::Cornea
    } else {
        Surface::Sclera
    }
}
