//! Pinhole camera geometry and the 6-DOF pose algebra.
//!
//! Conventions used throughout the crate:
//!
//! - Camera frame: +x right, +y down, +z along the optical axis.
//! - Scene units are millimeters.
//! - A [`Pose6DoF`] acts on column vectors, `p' = R * p + t`, with
//!   `R = Rz(rz) * Ry(ry) * Rx(rx)` (rotate about x first, then y, then z).
//! - A relative pose used for warping maps points from the target camera
//!   frame into the source camera frame.

use log::warn;
use nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

use crate::imaging::{DepthMap, PixelMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("raster is {got_w}x{got_h} but intrinsics describe {want_w}x{want_h}")]
    SizeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// Calibrated pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Validates focal lengths and image size. A principal point outside the
    /// image only logs a warning: cropped regions of interest are legitimate.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CameraError> {
        if !(fx.is_finite() && fx > 0.0 && fy.is_finite() && fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive and finite (fx={fx}, fy={fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(
                "principal point must be finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "image size must be non-zero ({width}x{height})"
            )));
        }
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        if !k.principal_point_inside() {
            warn!(
                "principal point ({cx}, {cy}) lies outside the {width}x{height} image; \
                 treating intrinsics as given"
            );
        }
        Ok(k)
    }

    /// Calibration of the slit-lamp camera module (1600x1200 sensor).
    pub fn slit_lamp() -> Self {
        Self {
            fx: 3758.9,
            fy: 3758.9,
            cx: 138.8,
            cy: 85.4,
            width: 1600,
            height: 1200,
        }
    }

    pub fn principal_point_inside(&self) -> bool {
        self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
    }

    /// The 3x3 calibration matrix K.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Lifts pixel `(u, v)` at the given depth to a camera-frame point.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, CameraError> {
        // `!(d > 0)` also rejects NaN.
        if !(depth > 0.0) {
            return Err(CameraError::NonPositiveDepth(depth));
        }
        Ok(self.backproject_unchecked(u, v, depth))
    }

    #[inline]
    pub(crate) fn backproject_unchecked(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64), CameraError> {
        if !(p.z > 0.0) {
            return Err(CameraError::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Unit-norm viewing ray through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.backproject_unchecked(u, v, 1.0).normalize()
    }

    pub fn check_size(&self, width: usize, height: usize) -> Result<(), CameraError> {
        if width != self.width || height != self.height {
            return Err(CameraError::SizeMismatch {
                got_w: width,
                got_h: height,
                want_w: self.width,
                want_h: self.height,
            });
        }
        Ok(())
    }
}

/// Egomotion as three translations (mm) and three Euler angles (radians).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose6DoF {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

impl Pose6DoF {
    pub const IDENTITY: Pose6DoF = Pose6DoF {
        tx: 0.0,
        ty: 0.0,
        tz: 0.0,
        rx: 0.0,
        ry: 0.0,
        rz: 0.0,
    };

    pub fn new(tx: f64, ty: f64, tz: f64, rx: f64, ry: f64, rz: f64) -> Self {
        Self {
            tx,
            ty,
            tz,
            rx,
            ry,
            rz,
        }
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5])
    }

    /// `[tx, ty, tz, rx, ry, rz]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.rx, self.ry, self.rz]
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.rz) * rot_y(self.ry) * rot_x(self.rx)
    }

    /// Homogeneous 4x4 rigid transform.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation());
        m
    }

    /// Builds a pose from a rotation and translation. Euler angles are
    /// extracted for the `Rz * Ry * Rx` order; at gimbal lock (`|ry| = pi/2`)
    /// `rz` is set to zero.
    pub fn from_rotation_translation(r: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let ry = sy.asin();
        let cy = (r[(2, 1)].powi(2) + r[(2, 2)].powi(2)).sqrt();
        let (rx, rz) = if cy > 1e-12 {
            (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
        } else {
            ((-r[(1, 2)]).atan2(r[(1, 1)]), 0.0)
        };
        Self::new(t.x, t.y, t.z, rx, ry, rz)
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_rotation_translation(&r, &t)
    }

    /// `self` after `other`: the matrix of the result is `M(self) * M(other)`.
    pub fn compose(&self, other: &Pose6DoF) -> Pose6DoF {
        let ra = self.rotation();
        let r = ra * other.rotation();
        let t = ra * other.translation() + self.translation();
        Self::from_rotation_translation(&r, &t)
    }

    pub fn inverse(&self) -> Pose6DoF {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation());
        Self::from_rotation_translation(&rt, &t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Angle of the rotation part, radians.
    pub fn rotation_angle(&self) -> f64 {
        let r = self.rotation();
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// Translation and rotation-angle distance between two poses,
    /// `(|t_a - t_b|, angle(R_a^T R_b))`.
    pub fn distance(&self, other: &Pose6DoF) -> (f64, f64) {
        let dt = (self.translation() - other.translation()).norm();
        let dr = self.rotation().transpose() * other.rotation();
        let ang = ((dr.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        (dt, ang)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Precomputed rotation and translation for hot loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl From<&Pose6DoF> for RigidTransform {
    fn from(p: &Pose6DoF) -> Self {
        Self {
            r: p.rotation(),
            t: p.translation(),
        }
    }
}

impl RigidTransform {
    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }
}

/// Camera-frame points lifted from a depth map, with their source pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub source_pixels: Vec<[f64; 2]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, point: Vector3<f64>, pixel: [f64; 2]) {
        self.points.push(point);
        self.source_pixels.push(pixel);
    }
}

/// One point per masked-in pixel (all pixels when `mask` is `None`).
pub fn depth_to_cloud(
    depth: &DepthMap,
    k: &Intrinsics,
    mask: Option<&PixelMask>,
) -> Result<PointCloud, CameraError> {
    k.check_size(depth.width(), depth.height())?;
    if let Some(m) = mask {
        k.check_size(m.width(), m.height())?;
    }
    let mut cloud = PointCloud::default();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if mask.is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            let (u, v) = (x as f64, y as f64);
            let p = k.backproject(u, v, depth.get(x, y))?;
            cloud.push(p, [u, v]);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn k_test() -> Intrinsics {
        Intrinsics::new(100.0, 120.0, 31.5, 23.5, 64, 48).unwrap()
    }

    fn max_abs(m: &Matrix4<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    #[test]
    fn backproject_principal_point_and_unit_offset() {
        let k = k_test();
        let p = k.backproject(k.cx, k.cy, 2.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let p = k.backproject(k.cx + k.fx, k.cy, 1.0).unwrap();
        assert!((p - Vector3::new(1.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn backproject_with_slit_lamp_calibration() {
        let k = Intrinsics::slit_lamp();
        let p = k.backproject(200.0, 100.0, 3.0).unwrap();
        let want = Vector3::new(
            (200.0 - 138.8) * 3.0 / 3758.9,
            (100.0 - 85.4) * 3.0 / 3758.9,
            3.0,
        );
        assert!((p - want).norm() < 1e-15);
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        let k = k_test();
        assert_eq!(
            k.backproject(1.0, 1.0, 0.0),
            Err(CameraError::NonPositiveDepth(0.0))
        );
        assert!(k.backproject(1.0, 1.0, -1.0).is_err());
        assert!(k.backproject(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn project_examples() {
        let k = k_test();
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 5.0)).unwrap(), (k.cx, k.cy));
        let (u, v) = Intrinsics::slit_lamp()
            .project(&Vector3::new(1.0, 0.0, 1.0))
            .unwrap();
        assert!((u - 3897.7).abs() < 1e-9 && (v - 85.4).abs() < 1e-12);
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::BehindCamera(_))
        ));
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn project_backproject_round_trip_1000() {
        use rand::{Rng, SeedableRng};
        let k = Intrinsics::slit_lamp();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let u = rng.gen_range(0.0..1600.0);
            let v = rng.gen_range(0.0..1200.0);
            let d = rng.gen_range(0.01..500.0);
            let (pu, pv) = k.project(&k.backproject(u, v, d).unwrap()).unwrap();
            worst = worst.max((pu - u).abs()).max((pv - v).abs());
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 4).is_err());
        // outside principal point is accepted
        let k = Intrinsics::new(3758.9, 3758.9, 138.8, 85.4, 100, 50).unwrap();
        assert!(!k.principal_point_inside());
        assert!(Intrinsics::slit_lamp().principal_point_inside());
    }

    #[test]
    fn k_times_k_inverse_is_identity() {
        let k = Intrinsics::slit_lamp();
        let d = k.matrix() * k.inverse_matrix() - Matrix3::identity();
        assert!(d.amax() < 1e-15);
    }

    #[test]
    fn zero_pose_is_identity_matrix() {
        assert_eq!(Pose6DoF::IDENTITY.to_matrix(), Matrix4::identity());
    }

    #[test]
    fn rz_quarter_turn_maps_x_to_y() {
        let p = Pose6DoF::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2);
        let q = p.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert!((q - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn euler_order_matches_nalgebra_roll_pitch_yaw() {
        // Independent construction: nalgebra applies roll, then pitch, then yaw.
        let p = Pose6DoF::new(0.0, 0.0, 0.0, 0.3, -0.7, 1.9);
        let r = Rotation3::from_euler_angles(0.3, -0.7, 1.9);
        assert!((p.rotation() - r.matrix()).amax() < 1e-14);
    }

    #[test]
    fn compose_and_invert_identities() {
        let p = Pose6DoF::new(1.0, -2.0, 0.5, 0.1, 0.2, -0.3);
        let c = Pose6DoF::IDENTITY.compose(&p);
        for (a, b) in c.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(Pose6DoF::IDENTITY.inverse().to_matrix(), Matrix4::identity());
    }

    #[test]
    fn gimbal_lock_extraction_reproduces_matrix() {
        let p = Pose6DoF::new(0.0, 0.0, 0.0, 0.4, FRAC_PI_2, 0.9);
        let q = Pose6DoF::from_matrix(&p.to_matrix());
        assert!(max_abs(&(q.to_matrix() - p.to_matrix())) < 1e-9);
    }

    #[test]
    fn depth_to_cloud_constant_and_single_pixel() {
        let k = Intrinsics::new(50.0, 50.0, 2.0, 1.0, 5, 3).unwrap();
        let d = DepthMap::filled(5, 3, 1.0);
        let cloud = depth_to_cloud(&d, &k, None).unwrap();
        assert_eq!(cloud.len(), 15);
        assert!(cloud.points.iter().all(|p| p.z == 1.0));

        let mut mask = PixelMask::new(5, 3, false);
        mask.set(2, 1, true);
        let d = DepthMap::filled(5, 3, 7.5);
        let cloud = depth_to_cloud(&d, &k, Some(&mask)).unwrap();
        assert_eq!(cloud.points, vec![Vector3::new(0.0, 0.0, 7.5)]);
        assert_eq!(cloud.source_pixels, vec![[2.0, 1.0]]);

        let empty = PixelMask::new(5, 3, false);
        assert!(depth_to_cloud(&d, &k, Some(&empty)).unwrap().is_empty());
    }

    #[test]
    fn depth_to_cloud_rejects_non_positive_masked_depth() {
        let k = Intrinsics::new(50.0, 50.0, 2.0, 1.0, 5, 3).unwrap();
        let mut d = DepthMap::filled(5, 3, 1.0);
        d.set(4, 2, 0.0);
        assert!(depth_to_cloud(&d, &k, None).is_err());
        let mut mask = PixelMask::new(5, 3, true);
        mask.set(4, 2, false);
        assert!(depth_to_cloud(&d, &k, Some(&mask)).is_ok());
    }

    fn angle() -> impl Strategy<Value = f64> {
        -PI + 1e-6..PI - 1e-6
    }

    fn pose() -> impl Strategy<Value = Pose6DoF> {
        (
            -100.0..100.0f64,
            -100.0..100.0f64,
            -100.0..100.0f64,
            angle(),
            angle(),
            angle(),
        )
            .prop_map(|(a, b, c, d, e, f)| Pose6DoF::new(a, b, c, d, e, f))
    }

    proptest! {
        #[test]
        fn rotation_is_proper_orthonormal(p in pose()) {
            let r = p.rotation();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let m = p.to_matrix();
            prop_assert_eq!(m[(0, 3)], p.tx);
            prop_assert_eq!(m[(1, 3)], p.ty);
            prop_assert_eq!(m[(2, 3)], p.tz);
        }

        #[test]
        fn inverse_matches_generic_matrix_inverse(p in pose()) {
            let generic = p.to_matrix().try_inverse().unwrap();
            prop_assert!(max_abs(&(p.inverse().to_matrix() - generic)) < 1e-9);
            let prod = p.inverse().to_matrix() * p.to_matrix();
            prop_assert!(max_abs(&(prod - Matrix4::identity())) < 1e-9);
            let c = p.compose(&p.inverse()).to_matrix();
            prop_assert!(max_abs(&(c - Matrix4::identity())) < 1e-9);
        }

        #[test]
        fn compose_matches_matrix_product(a in pose(), b in pose()) {
            let want = a.to_matrix() * b.to_matrix();
            prop_assert!(max_abs(&(a.compose(&b).to_matrix() - want)) < 1e-9);
        }

        #[test]
        fn euler_round_trip_away_from_gimbal_lock(
            rx in angle(), ry in -FRAC_PI_2 + 0.01..FRAC_PI_2 - 0.01, rz in angle()
        ) {
            let p = Pose6DoF::new(1.0, 2.0, 3.0, rx, ry, rz);
            let q = Pose6DoF::from_matrix(&p.to_matrix());
            prop_assert!(max_abs(&(q.to_matrix() - p.to_matrix())) < 1e-9);
        }

        #[test]
        fn project_inverts_backproject(
            u in -50.0..1700.0f64, v in -50.0..1300.0f64, d in 1e-3..1e4f64
        ) {
            let k = Intrinsics::slit_lamp();
            let (pu, pv) = k.project(&k.backproject(u, v, d).unwrap()).unwrap();
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }
}
