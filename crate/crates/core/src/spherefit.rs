//! Linear least-squares sphere fitting.
//!
//! Expanding `|x - x0|^2 = r^2` gives a system that is linear in
//! `c = (x0, y0, z0, r^2 - |x0|^2)`: each point contributes the row
//! `(2x, 2y, 2z, 1)` with right-hand side `x^2 + y^2 + z^2`.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen, Vector3, Vector4};
use thiserror::Error;

use crate::camera::{depth_to_cloud, CameraError, Intrinsics, PointCloud};
use crate::imaging::{DepthMap, Label, SegMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("sphere fit needs at least 4 points, got {0}")]
    InsufficientData(usize),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
}

/// Fitted sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereParams {
    pub center: Vector3<f64>,
    pub radius: f64,
    /// RMS of `|x_k - center| - radius` over the fitted points.
    pub rms_residual: f64,
}

impl SphereParams {
    pub fn x0(&self) -> f64 {
        self.center.x
    }
    pub fn y0(&self) -> f64 {
        self.center.y
    }
    pub fn z0(&self) -> f64 {
        self.center.z
    }

    /// Signed distance of `p` from the sphere surface.
    pub fn residual(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }

    /// Mean squared surface residual over `points`.
    pub fn mean_squared_residual(&self, points: &[Vector3<f64>]) -> f64 {
        if points.is_empty() {
            return 0.0;
        }
        points.iter().map(|p| self.residual(p).powi(2)).sum::<f64>() / points.len() as f64
    }

    /// Plain-text `key = value` form.
    pub fn to_kv_string(&self) -> String {
        format!(
            "x0 = {:.12}\ny0 = {:.12}\nz0 = {:.12}\nr = {:.12}\nrms_residual = {:.6e}\n",
            self.center.x, self.center.y, self.center.z, self.radius, self.rms_residual
        )
    }
}

/// Condition number (of the normal matrix) up to which the normal equations
/// are trusted; beyond it the fit falls back to an SVD of the design matrix.
const NORMAL_EQ_MAX_COND: f64 = 1e8;
/// Relative singular value below which the design matrix is rank deficient.
const RANK_TOL: f64 = 1e-9;

pub fn fit_sphere(cloud: &PointCloud) -> Result<SphereParams, FitError> {
    fit_sphere_points(&cloud.points)
}

pub fn fit_sphere_points(points: &[Vector3<f64>]) -> Result<SphereParams, FitError> {
    let n = points.len();
    if n < 4 {
        return Err(FitError::InsufficientData(n));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(FitError::DegenerateGeometry("non-finite point".into()));
    }
    // Center and scale the cloud so the system is well conditioned even
    // far from the origin.
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    let scale = (points.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if !(scale > 0.0) {
        return Err(FitError::DegenerateGeometry("all points coincide".into()));
    }
    let q: Vec<Vector3<f64>> = points.iter().map(|p| (p - mean) / scale).collect();

    let mut ata = Matrix4::<f64>::zeros();
    let mut atf = Vector4::<f64>::zeros();
    for p in &q {
        let row = Vector4::new(2.0 * p.x, 2.0 * p.y, 2.0 * p.z, 1.0);
        let f = p.norm_squared();
        ata += row * row.transpose();
        atf += row * f;
    }
    let eig = SymmetricEigen::new(ata);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();

    let c = if lmin > 0.0 && lmax / lmin < NORMAL_EQ_MAX_COND {
        ata.cholesky()
            .map(|ch| ch.solve(&atf))
            .ok_or_else(|| FitError::DegenerateGeometry("normal matrix not positive definite".into()))?
    } else {
        solve_svd(&q)?
    };

    let center_n = Vector3::new(c[0], c[1], c[2]);
    let r2 = c[3] + center_n.norm_squared();
    if !(r2 > 0.0) {
        return Err(FitError::DegenerateGeometry(format!(
            "implied squared radius {r2} is not positive"
        )));
    }
    let center = mean + center_n * scale;
    let radius = r2.sqrt() * scale;
    if !(center.iter().all(|v| v.is_finite()) && radius.is_finite()) {
        return Err(FitError::DegenerateGeometry("non-finite solution".into()));
    }
    let mut sphere = SphereParams {
        center,
        radius,
        rms_residual: 0.0,
    };
    sphere.rms_residual = sphere.mean_squared_residual(points).sqrt();
    Ok(sphere)
}

fn solve_svd(q: &[Vector3<f64>]) -> Result<Vector4<f64>, FitError> {
    let n = q.len();
    let mut a = DMatrix::<f64>::zeros(n, 4);
    let mut f = DVector::<f64>::zeros(n);
    for (i, p) in q.iter().enumerate() {
        a[(i, 0)] = 2.0 * p.x;
        a[(i, 1)] = 2.0 * p.y;
        a[(i, 2)] = 2.0 * p.z;
        a[(i, 3)] = 1.0;
        f[i] = p.norm_squared();
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin / smax < RANK_TOL {
        return Err(FitError::DegenerateGeometry(format!(
            "design matrix is rank deficient (singular value ratio {:.3e}); points are coplanar or collinear",
            if smax > 0.0 { smin / smax } else { 0.0 }
        )));
    }
    let x = svd
        .solve(&f, 0.0)
        .map_err(|e| FitError::DegenerateGeometry(e.to_string()))?;
    Ok(Vector4::new(x[0], x[1], x[2], x[3]))
}

/// Camera-frame points of every pixel carrying `label`.
pub fn region_cloud(
    depth: &DepthMap,
    seg: &SegMap,
    k: &Intrinsics,
    label: Label,
) -> Result<PointCloud, CameraError> {
    depth_to_cloud(depth, k, Some(&seg.mask_of(label)))
}

/// Fraction of the whole frame labeled `label`.
pub fn region_presence(seg: &SegMap, label: Label) -> f64 {
    let total = seg.width() * seg.height();
    if total == 0 {
        return 0.0;
    }
    seg.count(label) as f64 / total as f64
}
