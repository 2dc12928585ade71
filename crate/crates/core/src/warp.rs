//! Inverse (target-centric) warping.
//!
//! For every target pixel `p_t` the source location is
//! `p_s ~ K * T(t->s) * D_t(p_t) * K^-1 * p_t`, and the source raster is
//! bilinearly sampled there.

use crate::camera::{Intrinsics, Pose6DoF, RigidTransform};
use crate::imaging::{DepthMap, PixelMask, Raster};

/// A warped raster and the target pixels where it may be used.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    /// Source raster resampled into target geometry; zero where invalid.
    pub warped: Raster,
    /// In-bounds, positive transformed depth, and allowed by the exclusion mask.
    pub valid: PixelMask,
}

/// Per-target-pixel source coordinates, computed once and reusable for any
/// number of source rasters (frame, one-hot labels, ...).
#[derive(Debug, Clone)]
pub struct WarpField {
    width: usize,
    height: usize,
    coords: Vec<[f64; 2]>,
    valid: PixelMask,
}

impl WarpField {
    /// Geometric part of the warp. A pixel is valid when it is allowed by
    /// `exclude`, its depth is positive, and the transformed point lies in
    /// front of the source camera. Bounds are checked when sampling.
    pub fn new(target_depth: &DepthMap, pose: &Pose6DoF, k: &Intrinsics, exclude: &PixelMask) -> Self {
        let (w, h) = (target_depth.width(), target_depth.height());
        assert_eq!((exclude.width(), exclude.height()), (w, h), "mask size");
        let tf = RigidTransform::from(pose);
        let mut coords = vec![[f64::NAN; 2]; w * h];
        let mut valid = PixelMask::new(w, h, false);
        for y in 0..h {
            for x in 0..w {
                if !exclude.get(x, y) {
                    continue;
                }
                if let Some((u, v)) = warp_pixel(x as f64, y as f64, target_depth.get(x, y), &tf, k) {
                    coords[y * w + x] = [u, v];
                    valid.set(x, y, true);
                }
            }
        }
        Self {
            width: w,
            height: h,
            coords,
            valid,
        }
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Source location for target pixel `(x, y)`, if geometrically valid.
    pub fn source_of(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        self.valid
            .get(x, y)
            .then(|| {
                let c = self.coords[y * self.width + x];
                (c[0], c[1])
            })
    }

    /// Samples `source` at every valid coordinate.
    pub fn apply(&self, source: &Raster) -> WarpResult {
        let ch = source.channels();
        let mut warped = Raster::zeros(self.width, self.height, ch);
        let mut valid = self.valid.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                if !valid.get(x, y) {
                    continue;
                }
                let [u, v] = self.coords[y * self.width + x];
                if !source.sample_into(u, v, warped.pixel_mut(x, y)) {
                    valid.set(x, y, false);
                }
            }
        }
        WarpResult { warped, valid }
    }
}

#[inline]
pub(crate) fn warp_pixel(
    u: f64,
    v: f64,
    depth: f64,
    tf: &RigidTransform,
    k: &Intrinsics,
) -> Option<(f64, f64)> {
    if !(depth > 0.0) {
        return None;
    }
    let q = tf.apply(&k.backproject_unchecked(u, v, depth));
    if !(q.z > 0.0) {
        return None;
    }
    Some(k.project_unchecked(&q))
}

/// Resamples `source` into the target view given the target depth and the
/// target-to-source pose. Pixels outside `exclude` are left invalid.
pub fn inverse_warp(
    source: &Raster,
    target_depth: &DepthMap,
    pose: &Pose6DoF,
    k: &Intrinsics,
    exclude: &PixelMask,
) -> WarpResult {
    WarpField::new(target_depth, pose, k, exclude).apply(source)
}

/// Maps target-frame pixel locations into the source frame. Depth at a
/// sub-pixel location is bilinearly interpolated. `None` marks points off
/// the depth map, with non-positive depth, or landing behind the source
/// camera. Results may fall outside the source image.
pub fn track_points(
    points: &[(f64, f64)],
    target_depth: &DepthMap,
    pose: &Pose6DoF,
    k: &Intrinsics,
) -> Vec<Option<(f64, f64)>> {
    let tf = RigidTransform::from(pose);
    points
        .iter()
        .map(|&(u, v)| {
            let d = target_depth.sample(u, v)?;
            warp_pixel(u, v, d, &tf, k)
        })
        .collect()
}
