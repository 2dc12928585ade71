//! Point-tracking evaluation, semantic-error frame filtering and pairwise
//! mosaics.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Intrinsics, Pose6DoF};
use crate::imaging::{DepthMap, Frame, Label, PixelMask, Raster};
use crate::losses::SRL_MAX;
use crate::warp::{inverse_warp, track_points};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate point id {id:?} in frame {frame:?}")]
    DuplicateId { frame: String, id: String },
    #[error("point {id:?} in frame {frame:?} at ({u}, {v}) is outside the {width}x{height} image")]
    OutOfBounds {
        frame: String,
        id: String,
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("unknown frame {0:?}")]
    UnknownFrame(String),
    #[error("frames {0:?} and {1:?} share no point ids")]
    NoSharedPoints(String, String),
    #[error("region must be sclera or cornea, got {0:?}")]
    BadRegion(String),
    #[error("annotation file {path}: {source}")]
    Csv { path: String, source: csv::Error },
}

/// Published point-tracking errors on clinical slit-lamp video, as
/// (method, mean error in px, mean error in % of image width). These
/// depend on the clinical dataset and trained networks and serve only as
/// reference anchors.
pub const REFERENCE_TRACKING_ERRORS: [(&str, f64, f64); 5] = [
    ("photometric baseline", 29.08, 1.82),
    ("photometric baseline, frame step 10", 27.19, 1.70),
    ("semantic reconstruction", 22.48, 1.40),
    ("semantic reconstruction + sphere fitting", 7.7, 0.48),
    ("inter-grader", 4.81, 0.30),
];

/// Share of clinical frames removed by the 5% semantic-error filter.
pub const REFERENCE_FILTER_REMOVAL: f64 = 0.35;

/// Default semantic-error filter threshold, percent.
pub const DEFAULT_SRL_FILTER_PERCENT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedPoint {
    pub id: String,
    pub u: f64,
    pub v: f64,
    pub region: Label,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    frame_id: String,
    point_id: String,
    u: f64,
    v: f64,
    region: String,
}

/// Named points per frame plus (source, target) frame pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    frames: BTreeMap<String, Vec<AnnotatedPoint>>,
    pairs: Vec<(String, String)>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_frame(&mut self, frame: &str, points: Vec<AnnotatedPoint>) -> Result<(), EvalError> {
        let mut seen = HashSet::new();
        for p in &points {
            if !seen.insert(p.id.as_str()) {
                return Err(EvalError::DuplicateId {
                    frame: frame.into(),
                    id: p.id.clone(),
                });
            }
            if p.region == Label::Eyelid {
                return Err(EvalError::BadRegion("eyelid".into()));
            }
        }
        self.frames.insert(frame.to_string(), points);
        Ok(())
    }

    pub fn add_pair(&mut self, source: &str, target: &str) -> Result<(), EvalError> {
        let (s, t) = (self.points(source)?, self.points(target)?);
        if !s.iter().any(|p| t.iter().any(|q| q.id == p.id)) {
            return Err(EvalError::NoSharedPoints(source.into(), target.into()));
        }
        self.pairs.push((source.to_string(), target.to_string()));
        Ok(())
    }

    pub fn points(&self, frame: &str) -> Result<&[AnnotatedPoint], EvalError> {
        self.frames
            .get(frame)
            .map(Vec::as_slice)
            .ok_or_else(|| EvalError::UnknownFrame(frame.into()))
    }

    pub fn frame_ids(&self) -> impl Iterator<Item = &str> {
        self.frames.keys().map(String::as_str)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<(), EvalError> {
        for (f, pts) in &self.frames {
            for p in pts {
                if !(p.u >= 0.0 && p.v >= 0.0 && p.u <= (width - 1) as f64 && p.v <= (height - 1) as f64) {
                    return Err(EvalError::OutOfBounds {
                        frame: f.clone(),
                        id: p.id.clone(),
                        u: p.u,
                        v: p.v,
                        width,
                        height,
                    });
                }
            }
        }
        Ok(())
    }

    /// Reads `frame_id, point_id, u, v, region` rows with a header line.
    pub fn read_csv(path: &Path) -> Result<Self, EvalError> {
        let err = |source| EvalError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(err)?;
        let mut frames: BTreeMap<String, Vec<AnnotatedPoint>> = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: AnnotationRow = row.map_err(err)?;
            let region = match row.region.parse::<Label>() {
                Ok(l @ (Label::Sclera | Label::Cornea)) => l,
                _ => return Err(EvalError::BadRegion(row.region)),
            };
            frames.entry(row.frame_id).or_default().push(AnnotatedPoint {
                id: row.point_id,
                u: row.u,
                v: row.v,
                region,
            });
        }
        let mut set = Self::new();
        for (f, pts) in frames {
            set.insert_frame(&f, pts)?;
        }
        Ok(set)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let err = |source| EvalError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for (f, pts) in &self.frames {
            for p in pts {
                w.serialize(AnnotationRow {
                    frame_id: f.clone(),
                    point_id: p.id.clone(),
                    u: p.u,
                    v: p.v,
                    region: p.region.name().to_string(),
                })
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| err(e.into()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointError {
    pub id: String,
    pub region: Label,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub errors: Vec<PointError>,
    /// 0 when no point matched.
    pub mean_px: f64,
    pub mean_percent: f64,
    pub width: usize,
    pub sclera_count: usize,
    pub cornea_count: usize,
    /// Matched ids whose tracked location was invalid.
    pub excluded: usize,
}

impl EvalReport {
    fn from_errors(errors: Vec<PointError>, excluded: usize, width: usize) -> Self {
        let mean_px = if errors.is_empty() {
            0.0
        } else {
            errors.iter().map(|e| e.error).sum::<f64>() / errors.len() as f64
        };
        EvalReport {
            sclera_count: errors.iter().filter(|e| e.region == Label::Sclera).count(),
            cornea_count: errors.iter().filter(|e| e.region == Label::Cornea).count(),
            mean_percent: 100.0 * mean_px / width as f64,
            mean_px,
            width,
            excluded,
            errors,
        }
    }

    /// Pools several reports over the same image width.
    pub fn merge(reports: &[EvalReport]) -> Self {
        let width = reports.first().map_or(1, |r| r.width);
        let errors = reports.iter().flat_map(|r| r.errors.iter().cloned()).collect();
        Self::from_errors(errors, reports.iter().map(|r| r.excluded).sum(), width)
    }

    pub fn matched(&self) -> usize {
        self.errors.len()
    }

    pub fn median_px(&self) -> f64 {
        let mut v: Vec<f64> = self.errors.iter().map(|e| e.error).collect();
        median(&mut v)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let err = |source| EvalError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["point_id", "region", "error_px"]).map_err(err)?;
        for e in &self.errors {
            w.write_record([e.id.as_str(), e.region.name(), &e.error.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "matched {} points ({} sclera, {} cornea), excluded {}\nmean error {:.4} px ({:.4}% of width {})",
            self.matched(),
            self.sclera_count,
            self.cornea_count,
            self.excluded,
            self.mean_px,
            self.mean_percent,
            self.width
        )
    }
}

/// Median of a slice (sorted in place); 0 for an empty slice.
pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Errors of predicted source locations against source annotations,
/// matched by id. Predictions of `None` are excluded and counted.
pub fn score_predictions(
    predicted: &[(String, Option<(f64, f64)>)],
    source: &[AnnotatedPoint],
    width: usize,
) -> EvalReport {
    let mut errors = Vec::new();
    let mut excluded = 0;
    for (id, pred) in predicted {
        let Some(truth) = source.iter().find(|p| &p.id == id) else {
            continue;
        };
        match pred {
            Some((u, v)) => errors.push(PointError {
                id: id.clone(),
                region: truth.region,
                error: (u - truth.u).hypot(v - truth.v),
            }),
            None => excluded += 1,
        }
    }
    EvalReport::from_errors(errors, excluded, width)
}

/// Tracks the target annotations into the source frame with the target
/// depth and target-to-source pose, and scores them against the source
/// annotations.
pub fn evaluate_tracking(
    source: &[AnnotatedPoint],
    target: &[AnnotatedPoint],
    target_depth: &DepthMap,
    pose: &Pose6DoF,
    k: &Intrinsics,
) -> EvalReport {
    let shared: Vec<&AnnotatedPoint> = target
        .iter()
        .filter(|t| source.iter().any(|s| s.id == t.id))
        .collect();
    let locs: Vec<(f64, f64)> = shared.iter().map(|p| (p.u, p.v)).collect();
    let tracked = track_points(&locs, target_depth, pose, k);
    let predicted: Vec<_> = shared.iter().zip(tracked).map(|(p, t)| (p.id.clone(), t)).collect();
    score_predictions(&predicted, source, k.width)
}

/// A registered pair with its semantic reconstruction error.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub source: String,
    pub target: String,
    pub srl: f64,
}

impl PairScore {
    pub fn srl_percent(&self) -> f64 {
        srl_percent(self.srl)
    }
}

/// Semantic reconstruction error as a percentage of its maximum.
pub fn srl_percent(srl: f64) -> f64 {
    100.0 * srl / SRL_MAX
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<PairScore>,
    pub removed: Vec<PairScore>,
}

impl FilterOutcome {
    pub fn removed_fraction(&self) -> f64 {
        let n = self.kept.len() + self.removed.len();
        if n == 0 {
            0.0
        } else {
            self.removed.len() as f64 / n as f64
        }
    }
}

/// Keeps pairs whose normalized semantic error is strictly below
/// `threshold_percent`.
pub fn filter_pairs(pairs: &[PairScore], threshold_percent: f64) -> FilterOutcome {
    let (kept, removed) = pairs
        .iter()
        .cloned()
        .partition(|p| p.srl_percent() < threshold_percent);
    FilterOutcome { kept, removed }
}

/// Pixel provenance in a mosaic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Coverage {
    None = 0,
    Target = 1,
    Source = 2,
}

#[derive(Debug, Clone)]
pub struct Mosaic {
    pub frame: Frame,
    pub coverage: Vec<Coverage>,
    /// The source warped into the target view, with its validity.
    pub warped: Raster,
    pub warped_valid: PixelMask,
}

impl Mosaic {
    pub fn coverage_at(&self, x: usize, y: usize) -> Coverage {
        self.coverage[y * self.frame.width() + x]
    }

    pub fn covered(&self) -> usize {
        self.coverage.iter().filter(|c| **c != Coverage::None).count()
    }

    /// Mean absolute intensity difference between the target and the warped
    /// source over target pixels within `band` pixels (chessboard distance)
    /// of a source-provenance pixel. `None` if the band is empty.
    pub fn seam_difference(&self, target: &Frame, band: usize) -> Option<f64> {
        let (w, h) = (self.frame.width(), self.frame.height());
        let mut sum = 0.0;
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                if self.coverage_at(x, y) != Coverage::Target || !self.warped_valid.get(x, y) {
                    continue;
                }
                let near = (y.saturating_sub(band)..=(y + band).min(h - 1)).any(|yy| {
                    (x.saturating_sub(band)..=(x + band).min(w - 1)).any(|xx| self.coverage_at(xx, yy) == Coverage::Source)
                });
                if near {
                    let d: f64 = (0..3).map(|c| (target.at(x, y, c) - self.warped.at(x, y, c)).abs()).sum();
                    sum += d / 3.0;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Composites a source frame onto the target view: target pixels where
/// `target_valid` holds, otherwise the warped source where it is valid.
pub fn build_mosaic(
    source: &Frame,
    target: &Frame,
    target_valid: &PixelMask,
    depth: &DepthMap,
    pose: &Pose6DoF,
    k: &Intrinsics,
) -> Mosaic {
    let (w, h) = (target.width(), target.height());
    let all = PixelMask::new(w, h, true);
    let warp = inverse_warp(source, depth, pose, k, &all);
    let mut out = Raster::zeros(w, h, 3);
    let mut coverage = vec![Coverage::None; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, cov) = if target_valid.get(x, y) {
                (target.pixel(x, y), Coverage::Target)
            } else if warp.valid.get(x, y) {
                (warp.warped.pixel(x, y), Coverage::Source)
            } else {
                continue;
            };
            out.pixel_mut(x, y).copy_from_slice(px);
            coverage[y * w + x] = cov;
        }
    }
    Mosaic {
        frame: Frame::from_raster_clamped(out),
        coverage,
        warped: warp.warped,
        warped_valid: warp.valid,
    }
}
