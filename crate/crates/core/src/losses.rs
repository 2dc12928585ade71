//! Registration losses and their weighted total.
//!
//! Every term is masked: eyelid pixels of the target and pixels whose warp
//! is invalid never contribute. With several source frames, the semantic
//! and photometric reconstruction terms take the per-pixel minimum over the
//! sources that are valid at that pixel.

use log::debug;
use thiserror::Error;

use crate::camera::{CameraError, Intrinsics, Pose6DoF};
use crate::imaging::{eyelid_mask, DepthMap, Frame, ImagingError, Label, PixelMask, Raster, SegMap};
use crate::spherefit::{fit_sphere_points, region_presence, SphereParams};
use crate::warp::{WarpField, WarpResult};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// SSIM stabilizing constants for a dynamic range of 1.
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_C1: f64 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
const SSIM_C2: f64 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

/// Largest value of the squared L2 distance between two one-hot vectors.
pub const SRL_MAX: f64 = 2.0;

/// Weights of the five loss terms, plus the region-presence threshold that
/// gates the sphere-fitting term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_srl: f64,
    pub alpha_recon: f64,
    pub alpha_ssim: f64,
    pub alpha_ds: f64,
    pub alpha_sfl: f64,
    /// A region enters the sphere-fitting loss only when its share of all
    /// frame pixels exceeds this value.
    pub sfl_threshold: f64,
}

impl LossWeights {
    /// Training weights of the slit-lamp registration setup.
    pub const STANDARD: LossWeights = LossWeights {
        alpha_srl: 0.85,
        alpha_recon: 0.15,
        alpha_ssim: 0.15,
        alpha_ds: 0.04,
        alpha_sfl: 10_000.0,
        sfl_threshold: 0.5,
    };

    /// Profile tuned for the synthetic renderer. The label term is scaled
    /// down so photometric terms dominate near the optimum, and the presence
    /// threshold is low enough for the cornea to enter the sphere term at
    /// the rendered field of view.
    pub const SYNTHETIC: LossWeights = LossWeights {
        alpha_srl: 0.05,
        sfl_threshold: 0.05,
        ..Self::STANDARD
    };

    pub fn zero() -> Self {
        LossWeights {
            alpha_srl: 0.0,
            alpha_recon: 0.0,
            alpha_ssim: 0.0,
            alpha_ds: 0.0,
            alpha_sfl: 0.0,
            sfl_threshold: 0.5,
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::STANDARD),
            "synthetic" => Some(Self::SYNTHETIC),
            _ => None,
        }
    }

    pub fn alphas(&self) -> [f64; 5] {
        [
            self.alpha_srl,
            self.alpha_recon,
            self.alpha_ssim,
            self.alpha_ds,
            self.alpha_sfl,
        ]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let a = self.alphas();
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LossError::InvalidWeights(format!(
                "weights must be finite and non-negative: {a:?}"
            )));
        }
        if a.iter().all(|&v| v == 0.0) {
            return Err(LossError::InvalidWeights("all weights are zero".into()));
        }
        if !(0.0..=1.0).contains(&self.sfl_threshold) {
            return Err(LossError::InvalidWeights(format!(
                "sfl_threshold {} is outside [0, 1]",
                self.sfl_threshold
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossWeights {
            alpha_srl: self.alpha_srl * s,
            alpha_recon: self.alpha_recon * s,
            alpha_ssim: self.alpha_ssim * s,
            alpha_ds: self.alpha_ds * s,
            alpha_sfl: self.alpha_sfl * s,
            sfl_threshold: self.sfl_threshold,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Mean over a (possibly empty) set of pixels or windows. An empty set
/// yields 0 with `count == 0`, which callers report as a warning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedMean {
    pub value: f64,
    pub count: usize,
}

impl MaskedMean {
    fn from_sum(sum: f64, count: usize) -> Self {
        MaskedMean {
            value: if count == 0 { 0.0 } else { sum / count as f64 },
            count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), LossError> {
    if a != b {
        return Err(ImagingError::DimensionMismatch(a.0, a.1, b.0, b.1).into());
    }
    Ok(())
}

/// Squared L2 distance between warped soft labels and the target one-hot,
/// averaged over valid pixels.
pub fn loss_srl(warped_onehot: &Raster, target: &SegMap, valid: &PixelMask) -> Result<MaskedMean, LossError> {
    loss_srl_min(&[(warped_onehot, valid)], target)
}

/// [`loss_srl`] with a per-pixel minimum over several warped sources.
pub fn loss_srl_min(warps: &[(&Raster, &PixelMask)], target: &SegMap) -> Result<MaskedMean, LossError> {
    let dims = (target.width(), target.height());
    for (r, m) in warps {
        check_dims((r.width(), r.height()), dims)?;
        check_dims((m.width(), m.height()), dims)?;
    }
    let (sum, count) = min_reduce(warps, dims, |i, px| {
        let t = target.labels()[i].index();
        px.iter()
            .enumerate()
            .map(|(c, &w)| {
                let d = w - if c == t { 1.0 } else { 0.0 };
                d * d
            })
            .sum()
    });
    Ok(MaskedMean::from_sum(sum, count))
}

/// Mean absolute per-channel difference over valid pixels.
pub fn loss_recon(warped: &Raster, target: &Frame, valid: &PixelMask) -> Result<MaskedMean, LossError> {
    loss_recon_min(&[(warped, valid)], target)
}

/// [`loss_recon`] with a per-pixel minimum over several warped sources.
pub fn loss_recon_min(warps: &[(&Raster, &PixelMask)], target: &Frame) -> Result<MaskedMean, LossError> {
    let dims = (target.width(), target.height());
    for (r, m) in warps {
        check_dims((r.width(), r.height()), dims)?;
        check_dims((m.width(), m.height()), dims)?;
        if r.channels() != 3 {
            return Err(ImagingError::BadLength {
                got: r.data().len(),
                width: r.width(),
                height: r.height(),
                channels: 3,
            }
            .into());
        }
    }
    let t = target.data();
    let (sum, count) = min_reduce(warps, dims, |i, px| {
        px.iter()
            .zip(&t[i * 3..i * 3 + 3])
            .map(|(w, t)| (w - t).abs())
            .sum::<f64>()
            / 3.0
    });
    Ok(MaskedMean::from_sum(sum, count))
}

/// Sums, in row-major pixel order, the minimum of `term` over the sources
/// valid at each pixel.
fn min_reduce(
    warps: &[(&Raster, &PixelMask)],
    (w, h): (usize, usize),
    term: impl Fn(usize, &[f64]) -> f64,
) -> (f64, usize) {
    let ch = warps.first().map_or(0, |(r, _)| r.channels());
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..w * h {
        let best = warps
            .iter()
            .filter(|(_, m)| m.bits()[i])
            .map(|(r, _)| term(i, &r.data()[i * ch..(i + 1) * ch]))
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            sum += best;
            count += 1;
        }
    }
    (sum, count)
}

/// One minus the mean local SSIM over 3x3 windows (stride 1) whose nine
/// pixels are all valid. Statistics are per channel with population
/// variances; the mean runs over windows and channels.
pub fn loss_ssim(warped: &Raster, target: &Frame, valid: &PixelMask) -> Result<MaskedMean, LossError> {
    let (w, h) = (target.width(), target.height());
    check_dims((warped.width(), warped.height()), (w, h))?;
    check_dims((valid.width(), valid.height()), (w, h))?;
    if w < 3 || h < 3 {
        return Err(ImagingError::TooSmall(w, h).into());
    }
    let ch = target.channels();
    let m = 5 * ch;
    let bits = valid.bits();
    // Per pixel and channel: a, b, a^2, b^2, ab.
    let mut px = vec![0.0; w * h * m];
    for (i, cell) in px.chunks_exact_mut(m).enumerate() {
        let a = &warped.data()[i * ch..(i + 1) * ch];
        let b = &target.data()[i * ch..(i + 1) * ch];
        for c in 0..ch {
            let (x, y) = (a[c], b[c]);
            cell[5 * c..5 * c + 5].copy_from_slice(&[x, y, x * x, y * y, x * y]);
        }
    }
    // Horizontal 3-sums and the validity of each horizontal triple.
    let mut rows = vec![0.0; w * h * m];
    let mut row_ok = vec![false; w * h];
    for y in 0..h {
        for x in 1..w - 1 {
            let i = y * w + x;
            row_ok[i] = bits[i - 1] && bits[i] && bits[i + 1];
            let (l, c, r) = (&px[(i - 1) * m..i * m], &px[i * m..(i + 1) * m], &px[(i + 1) * m..(i + 2) * m]);
            for (o, ((l, c), r)) in rows[i * m..(i + 1) * m].iter_mut().zip(l.iter().zip(c).zip(r)) {
                *o = l + c + r;
            }
        }
    }
    let n = 9.0;
    let mut sum = 0.0;
    let mut windows = 0usize;
    let mut win = vec![0.0; m];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            if !(row_ok[i - w] && row_ok[i] && row_ok[i + w]) {
                continue;
            }
            windows += 1;
            let (u, c, d) = (&rows[(i - w) * m..(i - w + 1) * m], &rows[i * m..(i + 1) * m], &rows[(i + w) * m..(i + w + 1) * m]);
            for (o, ((u, c), d)) in win.iter_mut().zip(u.iter().zip(c).zip(d)) {
                *o = (u + c + d) / n;
            }
            for s in win.chunks_exact(5) {
                let (mu_a, mu_b) = (s[0], s[1]);
                sum += ssim_from_stats(mu_a, mu_b, s[2] - mu_a * mu_a, s[3] - mu_b * mu_b, s[4] - mu_a * mu_b);
            }
        }
    }
    if windows == 0 {
        return Ok(MaskedMean { value: 0.0, count: 0 });
    }
    let mean_ssim = sum / (windows * ch) as f64;
    Ok(MaskedMean {
        value: 1.0 - mean_ssim,
        count: windows,
    })
}

#[inline]
pub(crate) fn ssim_from_stats(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Edge-aware depth smoothness: forward-difference depth gradients damped
/// by `exp(-|image gradient|)`, the image gradient magnitude being averaged
/// over channels. Mean over valid pixels.
pub fn loss_ds(depth: &DepthMap, image: &Frame, valid: &PixelMask) -> Result<MaskedMean, LossError> {
    let weights = EdgeWeights::new(image)?;
    loss_ds_weighted(depth, &weights, valid)
}

/// Precomputed `exp(-|grad I|)` factors of a frame.
#[derive(Debug, Clone)]
pub struct EdgeWeights {
    width: usize,
    height: usize,
    wx: Vec<f64>,
    wy: Vec<f64>,
}

impl EdgeWeights {
    pub fn new(image: &Frame) -> Result<Self, LossError> {
        let (gx, gy) = image.gradients()?;
        let mag = |g: &Raster| -> Vec<f64> {
            g.data()
                .chunks_exact(g.channels())
                .map(|p| (-(p.iter().map(|v| v.abs()).sum::<f64>() / p.len() as f64)).exp())
                .collect()
        };
        Ok(Self {
            width: image.width(),
            height: image.height(),
            wx: mag(&gx),
            wy: mag(&gy),
        })
    }
}

pub fn loss_ds_weighted(depth: &DepthMap, weights: &EdgeWeights, valid: &PixelMask) -> Result<MaskedMean, LossError> {
    let (w, h) = (weights.width, weights.height);
    check_dims((depth.width(), depth.height()), (w, h))?;
    check_dims((valid.width(), valid.height()), (w, h))?;
    let d = depth.values();
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid.bits()[i] {
                continue;
            }
            let dx = if x + 1 < w { d[i + 1] - d[i] } else { 0.0 };
            let dy = if y + 1 < h { d[i + w] - d[i] } else { 0.0 };
            sum += dx.abs() * weights.wx[i] + dy.abs() * weights.wy[i];
            count += 1;
        }
    }
    Ok(MaskedMean::from_sum(sum, count))
}

/// Outcome of the sphere-fitting loss for one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionFit {
    /// Mean squared surface residual, 0 when skipped.
    pub loss: f64,
    pub presence: f64,
    /// `None` when the region was skipped (below threshold, too few points,
    /// or degenerate geometry).
    pub sphere: Option<SphereParams>,
}

impl RegionFit {
    pub fn skipped(&self) -> bool {
        self.sphere.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SflResult {
    pub cornea: RegionFit,
    pub sclera: RegionFit,
}

impl SflResult {
    pub fn total(&self) -> f64 {
        self.cornea.loss + self.sclera.loss
    }
}

/// Sphere-fitting loss of the cornea and sclera regions of a depth map.
pub fn loss_sfl(depth: &DepthMap, seg: &SegMap, k: &Intrinsics, threshold: f64) -> Result<SflResult, LossError> {
    check_dims((depth.width(), depth.height()), (seg.width(), seg.height()))?;
    k.check_size(depth.width(), depth.height())?;
    let region = |label: Label| -> Result<RegionFit, LossError> {
        let presence = region_presence(seg, label);
        let skipped = RegionFit {
            loss: 0.0,
            presence,
            sphere: None,
        };
        if presence <= threshold {
            return Ok(skipped);
        }
        let mut points = Vec::with_capacity(seg.count(label));
        for y in 0..seg.height() {
            for x in 0..seg.width() {
                if seg.get(x, y) == label {
                    points.push(k.backproject(x as f64, y as f64, depth.get(x, y))?);
                }
            }
        }
        match fit_sphere_points(&points) {
            Ok(s) => Ok(RegionFit {
                loss: s.rms_residual * s.rms_residual,
                presence,
                sphere: Some(s),
            }),
            Err(e) => {
                debug!("{} sphere fit skipped: {e}", label.name());
                Ok(skipped)
            }
        }
    };
    Ok(SflResult {
        cornea: region(Label::Cornea)?,
        sclera: region(Label::Sclera)?,
    })
}

/// Everything on the target side of a registration pair.
#[derive(Debug, Clone)]
pub struct TargetView<'a> {
    pub frame: &'a Frame,
    pub seg: &'a SegMap,
    pub depth: &'a DepthMap,
    exclude: PixelMask,
    edges: EdgeWeights,
}

impl<'a> TargetView<'a> {
    pub fn new(frame: &'a Frame, seg: &'a SegMap, depth: &'a DepthMap) -> Result<Self, LossError> {
        let dims = (frame.width(), frame.height());
        check_dims((seg.width(), seg.height()), dims)?;
        check_dims((depth.width(), depth.height()), dims)?;
        Ok(Self {
            frame,
            seg,
            depth,
            exclude: eyelid_mask(seg),
            edges: EdgeWeights::new(frame)?,
        })
    }

    /// Same frame and labels with a different depth map.
    pub fn with_depth<'b>(&self, depth: &'b DepthMap) -> TargetView<'b>
    where
        'a: 'b,
    {
        TargetView {
            frame: self.frame,
            seg: self.seg,
            depth,
            exclude: self.exclude.clone(),
            edges: self.edges.clone(),
        }
    }

    /// Non-eyelid pixels.
    pub fn exclude(&self) -> &PixelMask {
        &self.exclude
    }

    pub fn edges(&self) -> &EdgeWeights {
        &self.edges
    }
}

/// A source frame with its labels, one-hot encoded once.
#[derive(Debug, Clone)]
pub struct SourceView<'a> {
    pub frame: &'a Frame,
    pub seg: &'a SegMap,
    onehot: Raster,
}

impl<'a> SourceView<'a> {
    pub fn new(frame: &'a Frame, seg: &'a SegMap) -> Result<Self, LossError> {
        check_dims((seg.width(), seg.height()), (frame.width(), frame.height()))?;
        Ok(Self {
            frame,
            seg,
            onehot: seg.onehot(),
        })
    }

    pub fn onehot(&self) -> &Raster {
        &self.onehot
    }
}

/// Warnings raised while evaluating a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossFlags {
    pub empty_valid_mask: bool,
    pub no_ssim_window: bool,
    pub cornea_skipped: bool,
    pub sclera_skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub srl: f64,
    pub recon: f64,
    pub ssim: f64,
    pub ds: f64,
    pub sfl_cornea: f64,
    pub sfl_sclera: f64,
    pub total: f64,
    pub valid_pixel_count: usize,
    pub flags: LossFlags,
}

impl LossReport {
    pub fn sfl(&self) -> f64 {
        self.sfl_cornea + self.sfl_sclera
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.alpha_srl * self.srl
            + w.alpha_recon * self.recon
            + w.alpha_ssim * self.ssim
            + w.alpha_ds * self.ds
            + w.alpha_sfl * self.sfl()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.srl,
            self.recon,
            self.ssim,
            self.ds,
            self.sfl_cornea,
            self.sfl_sclera,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Terms that do not depend on the pose: depth smoothness and sphere fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthTerms {
    pub ds: f64,
    pub sfl: SflResult,
}

pub fn depth_terms(target: &TargetView, k: &Intrinsics, weights: &LossWeights) -> Result<DepthTerms, LossError> {
    Ok(DepthTerms {
        ds: loss_ds_weighted(target.depth, &target.edges, &target.exclude)?.value,
        sfl: loss_sfl(target.depth, target.seg, k, weights.sfl_threshold)?,
    })
}

/// Warps of every source into the target.
pub fn warp_sources(
    target: &TargetView,
    sources: &[(SourceView, Pose6DoF)],
    k: &Intrinsics,
) -> Vec<(WarpResult, WarpResult)> {
    sources
        .iter()
        .map(|(src, pose)| {
            let field = WarpField::new(target.depth, pose, k, &target.exclude);
            (field.apply(src.frame.raster()), field.apply(&src.onehot))
        })
        .collect()
}

/// Weighted total of all loss terms for a target and its posed sources.
pub fn total_loss(
    target: &TargetView,
    sources: &[(SourceView, Pose6DoF)],
    k: &Intrinsics,
    weights: &LossWeights,
) -> Result<LossReport, LossError> {
    let fixed = depth_terms(target, k, weights)?;
    total_loss_with(target, sources, k, weights, &fixed)
}

/// [`total_loss`] reusing precomputed depth terms (valid as long as the
/// target depth is unchanged).
pub fn total_loss_with(
    target: &TargetView,
    sources: &[(SourceView, Pose6DoF)],
    k: &Intrinsics,
    weights: &LossWeights,
    fixed: &DepthTerms,
) -> Result<LossReport, LossError> {
    k.check_size(target.frame.width(), target.frame.height())?;
    let warps = warp_sources(target, sources, k);
    let frames: Vec<(&Raster, &PixelMask)> = warps.iter().map(|(f, _)| (&f.warped, &f.valid)).collect();
    let labels: Vec<(&Raster, &PixelMask)> = warps.iter().map(|(_, s)| (&s.warped, &s.valid)).collect();
    let srl = loss_srl_min(&labels, target.seg)?;
    let recon = loss_recon_min(&frames, target.frame)?;

    let mut ssim_sum = 0.0;
    let mut ssim_n = 0;
    for (f, _) in &warps {
        let s = loss_ssim(&f.warped, target.frame, &f.valid)?;
        if !s.is_empty() {
            ssim_sum += s.value;
            ssim_n += 1;
        }
    }
    let ssim = if ssim_n == 0 { 0.0 } else { ssim_sum / ssim_n as f64 };

    let mut report = LossReport {
        srl: srl.value,
        recon: recon.value,
        ssim,
        ds: fixed.ds,
        sfl_cornea: fixed.sfl.cornea.loss,
        sfl_sclera: fixed.sfl.sclera.loss,
        total: 0.0,
        valid_pixel_count: srl.count,
        flags: LossFlags {
            empty_valid_mask: srl.is_empty(),
            no_ssim_window: ssim_n == 0,
            cornea_skipped: fixed.sfl.cornea.skipped(),
            sclera_skipped: fixed.sfl.sclera.skipped(),
        },
    };
    report.total = report.weighted_total(weights);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_frame(w: usize, h: usize, g: &mut impl Rng) -> Frame {
        Frame::new(w, h, (0..w * h * 3).map(|_| g.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn srl_examples() {
        let seg = SegMap::filled(5, 4, Label::Sclera);
        let all = PixelMask::new(5, 4, true);
        assert_eq!(loss_srl(&seg.onehot(), &seg, &all).unwrap().value, 0.0);
        let cornea = SegMap::filled(5, 4, Label::Cornea);
        assert_eq!(loss_srl(&cornea.onehot(), &seg, &all).unwrap().value, 2.0);
        let none = PixelMask::new(5, 4, false);
        let m = loss_srl(&cornea.onehot(), &seg, &none).unwrap();
        assert!(m.is_empty() && m.value == 0.0);
    }

    #[test]
    fn srl_min_over_sources() {
        let target = SegMap::filled(2, 1, Label::Sclera);
        let good = target.onehot();
        let bad = SegMap::filled(2, 1, Label::Cornea).onehot();
        let all = PixelMask::new(2, 1, true);
        let mut first_only = PixelMask::new(2, 1, false);
        first_only.set(0, 0, true);
        // pixel 0: min(2, 0) = 0; pixel 1: only the bad source is valid -> 2
        let m = loss_srl_min(&[(&bad, &all), (&good, &first_only)], &target).unwrap();
        assert_eq!(m.count, 2);
        assert_eq!(m.value, 1.0);
    }

    #[test]
    fn recon_examples() {
        let mut g = rng(1);
        let f = random_frame(6, 5, &mut g);
        let all = PixelMask::new(6, 5, true);
        assert_eq!(loss_recon(f.raster(), &f, &all).unwrap().value, 0.0);
        let zeros = Frame::filled(6, 5, [0.0; 3]);
        let ones = Frame::filled(6, 5, [1.0; 3]);
        assert_eq!(loss_recon(ones.raster(), &zeros, &all).unwrap().value, 1.0);
        assert!(loss_recon(ones.raster(), &zeros, &PixelMask::new(6, 5, false))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn ssim_examples() {
        let mut g = rng(2);
        let f = random_frame(8, 7, &mut g);
        let all = PixelMask::new(8, 7, true);
        assert!(loss_ssim(f.raster(), &f, &all).unwrap().value.abs() < 1e-12);

        let flat = Frame::filled(3, 3, [0.2; 3]);
        let s = loss_ssim(flat.raster(), &flat, &PixelMask::new(3, 3, true)).unwrap();
        assert_eq!(s.count, 1);
        assert!(s.value.abs() < 1e-15);

        let none = loss_ssim(f.raster(), &f, &PixelMask::new(8, 7, false)).unwrap();
        assert!(none.is_empty());
        assert!(loss_ssim(flat.raster(), &Frame::filled(2, 2, [0.0; 3]), &all).is_err());
    }

    #[test]
    fn ssim_of_inverted_texture_is_large() {
        let mut g = rng(3);
        let f = random_frame(16, 16, &mut g);
        let inv = Raster::new(16, 16, 3, f.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let all = PixelMask::new(16, 16, true);
        let s = loss_ssim(&inv, &f, &all).unwrap().value;
        assert!(s > 0.5, "{s}");

        // direct evaluation on the single top-left window, red channel
        let a: Vec<f64> = (0..9).map(|i| inv.at(i % 3, i / 3, 0)).collect();
        let b: Vec<f64> = (0..9).map(|i| f.at(i % 3, i / 3, 0)).collect();
        let ma = a.iter().sum::<f64>() / 9.0;
        let mb = b.iter().sum::<f64>() / 9.0;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 9.0;
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 9.0;
        let cab = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 9.0;
        let direct = ((2.0 * ma * mb + 1e-4) * (2.0 * cab + 9e-4))
            / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
        assert!(1.0 - direct > 0.5);
        let mut one = PixelMask::new(16, 16, false);
        for y in 0..3 {
            for x in 0..3 {
                one.set(x, y, true);
            }
        }
        let r = Raster::new(16, 16, 3, inv.data().to_vec()).unwrap();
        let s1 = loss_ssim(&r, &f, &one).unwrap();
        assert_eq!(s1.count, 1);
    }

    #[test]
    fn ds_examples() {
        let mut g = rng(4);
        let img = random_frame(6, 4, &mut g);
        let all = PixelMask::new(6, 4, true);
        assert_eq!(loss_ds(&DepthMap::filled(6, 4, 3.0), &img, &all).unwrap().value, 0.0);

        let flat = Frame::filled(6, 4, [0.5; 3]);
        let step = DepthMap::from_fn(6, 4, |x, _| if x >= 3 { 2.0 } else { 1.0 });
        let mut col = PixelMask::new(6, 4, false);
        for y in 0..4 {
            col.set(2, y, true);
        }
        let m = loss_ds(&step, &flat, &col).unwrap();
        assert_eq!(m.value, 1.0);
        // over the whole frame one column in six carries the step
        let m = loss_ds(&step, &flat, &all).unwrap();
        assert!((m.value - 4.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn sfl_threshold_skips_small_regions() {
        let k = Intrinsics::new(40.0, 40.0, 9.5, 9.5, 20, 20).unwrap();
        let depth = DepthMap::filled(20, 20, 30.0);
        // 30% cornea
        let seg = SegMap::from_fn(20, 20, |x, _| if x < 6 { Label::Cornea } else { Label::Eyelid });
        let r = loss_sfl(&depth, &seg, &k, 0.5).unwrap();
        assert!(r.cornea.skipped() && r.sclera.skipped());
        assert_eq!(r.total(), 0.0);
        assert!((r.cornea.presence - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sfl_of_rendered_sphere_is_zero() {
        let k = Intrinsics::new(60.0, 60.0, 15.5, 15.5, 32, 32).unwrap();
        let c = nalgebra::Vector3::new(0.5, -0.3, 40.0);
        let r = 20.0;
        let depth = DepthMap::from_fn(32, 32, |x, y| {
            let d = k.ray(x as f64, y as f64);
            let b = d.dot(&c);
            let t = b - (b * b - c.norm_squared() + r * r).sqrt();
            t * d.z
        });
        let seg = SegMap::from_fn(32, 32, |x, _| if x < 20 { Label::Sclera } else { Label::Eyelid });
        let res = loss_sfl(&depth, &seg, &k, 0.5).map_err(|e| e.to_string()).unwrap();
        assert!(!res.sclera.skipped());
        assert!(res.sclera.loss < 1e-10, "{}", res.sclera.loss);
        let s = res.sclera.sphere.unwrap();
        assert!((s.center - c).norm() < 1e-6 && (s.radius - r).abs() < 1e-6);
    }

    #[test]
    fn weights_validation_and_profiles() {
        assert!(LossWeights::STANDARD.validate().is_ok());
        assert_eq!(LossWeights::profile("paper").unwrap().alpha_sfl, 10_000.0);
        assert!(LossWeights::profile("nope").is_none());
        assert!(LossWeights::zero().validate().is_err());
        let mut w = LossWeights::STANDARD;
        w.alpha_ds = -1.0;
        assert!(w.validate().is_err());
        w = LossWeights::STANDARD;
        w.sfl_threshold = 1.5;
        assert!(w.validate().is_err());
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let mut g = rng(5);
        for _ in 0..100 {
            let r = LossReport {
                srl: g.gen_range(0.0..2.0),
                recon: g.gen_range(0.0..1.0),
                ssim: g.gen_range(0.0..2.0),
                ds: g.gen_range(0.0..5.0),
                sfl_cornea: g.gen_range(0.0..1e-3),
                sfl_sclera: g.gen_range(0.0..1e-3),
                total: 0.0,
                valid_pixel_count: 1,
                flags: LossFlags::default(),
            };
            let w = LossWeights::STANDARD;
            let hand = 0.85 * r.srl + 0.15 * r.recon + 0.15 * r.ssim + 0.04 * r.ds + 10_000.0 * (r.sfl_cornea + r.sfl_sclera);
            assert!((r.weighted_total(&w) - hand).abs() < 1e-12);
        }
    }
}
