//! Command implementations behind the `ocusurf` binary, with the shared
//! run configuration.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input or bad usage,
//! 3 degenerate geometry, 4 unwritable output.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::camera::{CameraError, Intrinsics, Pose6DoF};
use crate::evalreg::{
    build_mosaic, evaluate_tracking, srl_percent, AnnotationSet, EvalError, EvalReport,
    DEFAULT_SRL_FILTER_PERCENT,
};
use crate::imaging::{
    read_depth, read_frame, read_segmap, write_depth, write_frame, write_segmap, DepthMap, Frame,
    ImagingError, Label, SegMap,
};
use crate::losses::{LossError, LossReport, LossWeights, SourceView, TargetView};
use crate::optim::{estimate_pose, OptimConfig, OptimError, OptimResult, PoseProblem, StepRule};
use crate::spherefit::{fit_sphere, region_cloud, FitError, SphereParams};
use crate::synth::{annotate, make_sequence, random_trajectory, EyeModel, Light, SynthError};
use crate::warp::inverse_warp;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing input {}", .0.display())]
    MissingFile(PathBuf),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("cannot write {}: {}", .0.display(), .1)]
    Unwritable(PathBuf, String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingFile(_) => 2,
            CliError::Degenerate(_) => 3,
            CliError::Unwritable(..) => 4,
            CliError::Optim(OptimError::Fit(FitError::DegenerateGeometry(_)))
            | CliError::Optim(OptimError::Fit(FitError::InsufficientData(_))) => 3,
            _ => 1,
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        CliError::Degenerate(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Contents of the TOML configuration file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub weights_profile: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub frame_step: Option<usize>,
    pub sfl_threshold: Option<f64>,
    pub srl_filter_percent: Option<f64>,
    pub camera: Option<CameraSection>,
    pub weights: Option<WeightsSection>,
    pub optim: Option<OptimSection>,
    pub synth: Option<SynthSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub alpha_srl: Option<f64>,
    pub alpha_recon: Option<f64>,
    pub alpha_ssim: Option<f64>,
    pub alpha_ds: Option<f64>,
    pub alpha_sfl: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub max_iters: Option<usize>,
    /// Fixed step rate; backtracking line search when absent.
    pub learning_rate: Option<f64>,
    pub convergence_tol: Option<f64>,
    pub fd_epsilon: Option<f64>,
    pub multi_start: Option<usize>,
    pub perturb_deg: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub frames: Option<usize>,
    pub max_step_deg: Option<f64>,
    pub max_step_mm: Option<f64>,
    /// "camera", "slit" or "flat".
    pub light: Option<String>,
    pub sclera_radius: Option<f64>,
    pub cornea_radius: Option<f64>,
    pub dots: Option<usize>,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub weights_profile: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub frame_step: Option<usize>,
    pub sfl_threshold: Option<f64>,
    pub srl_filter_percent: Option<f64>,
}

/// Resolved settings of one command invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub weights_profile: String,
    pub weights: LossWeights,
    pub intrinsics: Intrinsics,
    pub optim: OptimConfig,
    pub output_dir: PathBuf,
    pub frame_step: usize,
    pub srl_filter_percent: f64,
    pub frames: usize,
    pub max_step_deg: f64,
    pub max_step_mm: f64,
    pub light: Light,
    pub model: EyeModel,
}

pub const DEFAULT_FRAME_STEP: usize = 10;

impl RunConfig {
    /// Reads the optional config file and applies the overrides on top.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = read_text(p)?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        Self::resolve(file, ov)
    }

    pub fn resolve(file: FileConfig, ov: &Overrides) -> Result<Self> {
        let seed = ov.seed.or(file.seed).unwrap_or(0);
        let profile = ov
            .weights_profile
            .clone()
            .or(file.weights_profile)
            .unwrap_or_else(|| "paper".to_string());
        let mut weights = LossWeights::profile(&profile)
            .ok_or_else(|| CliError::Usage(format!("unknown weights profile {profile:?} (paper, synthetic)")))?;
        if let Some(w) = file.weights {
            weights.alpha_srl = w.alpha_srl.unwrap_or(weights.alpha_srl);
            weights.alpha_recon = w.alpha_recon.unwrap_or(weights.alpha_recon);
            weights.alpha_ssim = w.alpha_ssim.unwrap_or(weights.alpha_ssim);
            weights.alpha_ds = w.alpha_ds.unwrap_or(weights.alpha_ds);
            weights.alpha_sfl = w.alpha_sfl.unwrap_or(weights.alpha_sfl);
        }
        if let Some(t) = ov.sfl_threshold.or(file.sfl_threshold) {
            weights.sfl_threshold = t;
        }
        weights.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let c = file.camera.unwrap_or_default();
        let width = c.width.unwrap_or(64);
        let height = c.height.unwrap_or(64);
        let intrinsics = Intrinsics::new(
            c.fx.unwrap_or(160.0),
            c.fy.unwrap_or(160.0),
            c.cx.unwrap_or((width as f64 - 1.0) / 2.0),
            c.cy.unwrap_or((height as f64 - 1.0) / 2.0),
            width,
            height,
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;

        let o = file.optim.unwrap_or_default();
        let d = OptimConfig::default();
        let optim = OptimConfig {
            max_iters: o.max_iters.unwrap_or(d.max_iters),
            step_rule: o.learning_rate.map_or(StepRule::Backtracking, StepRule::Fixed),
            convergence_tol: o.convergence_tol.unwrap_or(d.convergence_tol),
            fd_epsilon: o.fd_epsilon.unwrap_or(d.fd_epsilon),
            multi_start: o.multi_start.unwrap_or(d.multi_start),
            perturb_deg: o.perturb_deg.unwrap_or(d.perturb_deg),
            seed,
            ..d
        };
        optim.validate().map_err(|e| CliError::Usage(e.to_string()))?;

        let s = file.synth.unwrap_or_default();
        let light = match s.light.as_deref().unwrap_or("camera") {
            "camera" => Light::default(),
            "slit" => Light::slit_lamp(),
            "flat" => Light::flat(),
            other => return Err(CliError::Usage(format!("unknown light {other:?} (camera, slit, flat)"))),
        };
        let mut model = EyeModel::default_eye(seed);
        model.sclera_radius = s.sclera_radius.unwrap_or(model.sclera_radius);
        model.cornea_radius = s.cornea_radius.unwrap_or(model.cornea_radius);
        if let Some(n) = s.dots {
            model.scatter_dots(n, 0.45, seed ^ 0x5eed_d075);
        }
        model.validate()?;

        let frame_step = ov.frame_step.or(file.frame_step).unwrap_or(DEFAULT_FRAME_STEP);
        if frame_step == 0 {
            return Err(CliError::Usage("frame step must be at least 1".into()));
        }
        let srl_filter_percent = ov
            .srl_filter_percent
            .or(file.srl_filter_percent)
            .unwrap_or(DEFAULT_SRL_FILTER_PERCENT);
        if !(srl_filter_percent >= 0.0) {
            return Err(CliError::Usage(format!("SRL filter percent must be >= 0, got {srl_filter_percent}")));
        }
        Ok(RunConfig {
            seed,
            weights_profile: profile,
            weights,
            intrinsics,
            optim,
            output_dir: ov.output_dir.clone().or(file.output_dir).unwrap_or_else(|| PathBuf::from("out")),
            frame_step,
            srl_filter_percent,
            frames: s.frames.unwrap_or(3),
            max_step_deg: s.max_step_deg.unwrap_or(1.0),
            max_step_mm: s.max_step_mm.unwrap_or(0.5),
            light,
            model,
        })
    }
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| io_in(p, e))
}

fn io_in(p: &Path, e: io::Error) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::MissingFile(p.to_path_buf())
    } else {
        CliError::Usage(format!("{}: {e}", p.display()))
    }
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(p.to_path_buf()))
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Unwritable(dir.to_path_buf(), e.to_string()))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| CliError::Unwritable(p.to_path_buf(), e.to_string()))
}

fn unwritable(p: &Path) -> impl Fn(ImagingError) -> CliError + '_ {
    move |e| CliError::Unwritable(p.to_path_buf(), e.to_string())
}

fn eval_unwritable(p: &Path) -> impl Fn(EvalError) -> CliError + '_ {
    move |e| CliError::Unwritable(p.to_path_buf(), e.to_string())
}

/// One pose per line as `tx ty tz rx ry rz` (mm, radians).
pub fn format_poses(poses: &[Pose6DoF]) -> String {
    let mut s = String::new();
    for p in poses {
        let a = p.to_array();
        let _ = writeln!(s, "{} {} {} {} {} {}", a[0], a[1], a[2], a[3], a[4], a[5]);
    }
    s
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose6DoF>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let a: [f64; 6] = v.try_into().map_err(|v: Vec<f64>| {
            CliError::Usage(format!("{}:{}: expected 6 numbers, got {}", path.display(), i + 1, v.len()))
        })?;
        out.push(Pose6DoF::from_array(a));
    }
    Ok(out)
}

pub fn frame_id(i: usize) -> String {
    format!("{i:04}")
}

/// Paths of the files of frame `id` inside a scene directory.
pub fn frame_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("frame_{id}.png")),
        dir.join(format!("depth_{id}.dpth")),
        dir.join(format!("seg_{id}.png")),
    )
}

/// Summary of a synthesized scene.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub frames: usize,
    pub poses_path: PathBuf,
    pub annotations_path: PathBuf,
}

/// Renders a random trajectory and writes frames, depths, segmentations,
/// `poses.txt` (camera-from-world per frame) and `annotations.csv`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    if cfg.frames < 2 {
        return Err(CliError::Usage(format!("need at least 2 frames, got {}", cfg.frames)));
    }
    let dir = &cfg.output_dir;
    out_dir(dir)?;
    let traj = random_trajectory(cfg.frames, cfg.max_step_deg, cfg.max_step_mm, cfg.seed);
    let samples = make_sequence(&cfg.model, &traj, &cfg.intrinsics, &cfg.light)?;
    let mut ann = AnnotationSet::new();
    for (i, s) in samples.iter().enumerate() {
        let id = frame_id(i);
        let (fp, dp, sp) = frame_paths(dir, &id);
        write_frame(&fp, &s.frame).map_err(unwritable(&fp))?;
        write_depth(&dp, &s.depth).map_err(unwritable(&dp))?;
        write_segmap(&sp, &s.seg).map_err(unwritable(&sp))?;
        ann.insert_frame(&id, annotate(&cfg.model, s, &cfg.intrinsics))?;
    }
    let poses_path = dir.join("poses.txt");
    write_text(&poses_path, &format_poses(&traj))?;
    let annotations_path = dir.join("annotations.csv");
    ann.write_csv(&annotations_path).map_err(eval_unwritable(&annotations_path))?;
    log::info!("wrote {} frames to {}", samples.len(), dir.display());
    Ok(SynthOutput {
        frames: samples.len(),
        poses_path,
        annotations_path,
    })
}

pub fn parse_region(s: &str) -> Result<Label> {
    match s {
        "cornea" => Ok(Label::Cornea),
        "sclera" => Ok(Label::Sclera),
        other => Err(CliError::Usage(format!("region must be cornea or sclera, got {other:?}"))),
    }
}

/// Fits a sphere to the camera-frame points of `region`.
pub fn cmd_fit_sphere(cfg: &RunConfig, depth: &Path, seg: &Path, region: Label) -> Result<SphereParams> {
    require(depth)?;
    require(seg)?;
    let d = read_depth(depth)?;
    let s = read_segmap(seg)?;
    check_size(cfg, d.width(), d.height())?;
    let cloud = region_cloud(&d, &s, &cfg.intrinsics, region)?;
    Ok(fit_sphere(&cloud)?)
}

fn check_size(cfg: &RunConfig, w: usize, h: usize) -> Result<()> {
    let k = &cfg.intrinsics;
    if (w, h) != (k.width, k.height) {
        return Err(CliError::Usage(format!(
            "input is {w}x{h} but the camera is {}x{}",
            k.width, k.height
        )));
    }
    Ok(())
}

/// Target and source files of a registration.
#[derive(Debug, Clone)]
pub struct PairPaths {
    pub target_frame: PathBuf,
    pub target_seg: PathBuf,
    pub target_depth: PathBuf,
    pub source_frame: PathBuf,
    pub source_seg: PathBuf,
}

impl PairPaths {
    /// Files of `target` and `source` inside a scene directory.
    pub fn in_scene(dir: &Path, target: &str, source: &str) -> Self {
        let (tf, td, ts) = frame_paths(dir, target);
        let (sf, _, ss) = frame_paths(dir, source);
        PairPaths {
            target_frame: tf,
            target_seg: ts,
            target_depth: td,
            source_frame: sf,
            source_seg: ss,
        }
    }
}

struct Pair {
    tf: Frame,
    ts: SegMap,
    td: DepthMap,
    sf: Frame,
    ss: SegMap,
}

fn load_pair(cfg: &RunConfig, p: &PairPaths) -> Result<Pair> {
    for f in [&p.target_frame, &p.target_seg, &p.target_depth, &p.source_frame, &p.source_seg] {
        require(f)?;
    }
    let pair = Pair {
        tf: read_frame(&p.target_frame)?,
        ts: read_segmap(&p.target_seg)?,
        td: read_depth(&p.target_depth)?,
        sf: read_frame(&p.source_frame)?,
        ss: read_segmap(&p.source_seg)?,
    };
    check_size(cfg, pair.tf.width(), pair.tf.height())?;
    Ok(pair)
}

fn register_pair(cfg: &RunConfig, pair: &Pair) -> Result<OptimResult> {
    let tv = TargetView::new(&pair.tf, &pair.ts, &pair.td)?;
    let sv = SourceView::new(&pair.sf, &pair.ss)?;
    let problem = PoseProblem::new(&tv, &sv, cfg.intrinsics, cfg.weights)?;
    Ok(estimate_pose(&problem, &cfg.optim)?)
}

fn trace_csv(trace: &[LossReport]) -> String {
    let mut s = String::from("iteration,srl,recon,ssim,ds,sfl,total,valid_pixels\n");
    for (i, r) in trace.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{},{}",
            r.srl,
            r.recon,
            r.ssim,
            r.ds,
            r.sfl_cornea + r.sfl_sclera,
            r.total,
            r.valid_pixel_count
        );
    }
    s
}

/// Outcome of a registration.
#[derive(Debug, Clone)]
pub struct RegisterOutput {
    pub result: OptimResult,
    pub pose_path: PathBuf,
    pub trace_path: PathBuf,
    pub warped_path: PathBuf,
    pub status_path: PathBuf,
}

/// Estimates the target-to-source pose and writes `pose.txt`,
/// `loss_trace.csv`, `warped.png` and `status.txt`. A diverged run still
/// writes its outputs; `status.txt` carries the flag.
pub fn cmd_register(cfg: &RunConfig, paths: &PairPaths) -> Result<RegisterOutput> {
    let pair = load_pair(cfg, paths)?;
    let result = register_pair(cfg, &pair)?;
    let dir = &cfg.output_dir;
    out_dir(dir)?;
    let pose_path = dir.join("pose.txt");
    write_text(&pose_path, &format_poses(&[result.pose]))?;
    let trace_path = dir.join("loss_trace.csv");
    write_text(&trace_path, &trace_csv(&result.loss_trace))?;
    let tv = TargetView::new(&pair.tf, &pair.ts, &pair.td)?;
    let warped = inverse_warp(pair.sf.raster(), &pair.td, &result.pose, &cfg.intrinsics, tv.exclude());
    let warped_path = dir.join("warped.png");
    write_frame(&warped_path, &Frame::from_raster_clamped(warped.warped)).map_err(unwritable(&warped_path))?;
    let status_path = dir.join("status.txt");
    let final_loss = result.final_loss().map_or(f64::NAN, |r| r.total);
    write_text(
        &status_path,
        &format!(
            "weights_profile = {:?}\nconverged = {}\ndiverged = {}\niterations = {}\nstart_index = {}\nfinal_loss = {}\n",
            cfg.weights_profile, result.converged, result.diverged, result.iterations_used, result.start_index, final_loss
        ),
    )?;
    Ok(RegisterOutput {
        result,
        pose_path,
        trace_path,
        warped_path,
        status_path,
    })
}

/// Scores tracked annotations over the frame pairs `(i, i + frame_step)`
/// of a scene. `poses` holds camera-from-world poses in frame order and
/// depths are read from `depth_dir`. Writes `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, annotations: &Path, poses: &Path, depth_dir: &Path) -> Result<EvalReport> {
    require(annotations)?;
    require(poses)?;
    require(depth_dir)?;
    let ann = AnnotationSet::read_csv(annotations)?;
    ann.check_bounds(cfg.intrinsics.width, cfg.intrinsics.height)?;
    let poses = read_poses(poses)?;
    let ids: Vec<String> = ann.frame_ids().map(str::to_string).collect();
    if ids.len() != poses.len() {
        return Err(CliError::Usage(format!(
            "{} annotated frames but {} poses",
            ids.len(),
            poses.len()
        )));
    }
    let step = cfg.frame_step.min(ids.len().saturating_sub(1)).max(1);
    let mut reports = Vec::new();
    for i in 0..ids.len().saturating_sub(step) {
        let (t, s) = (&ids[i], &ids[i + step]);
        let (_, dp, _) = frame_paths(depth_dir, t);
        require(&dp)?;
        let depth = read_depth(&dp)?;
        check_size(cfg, depth.width(), depth.height())?;
        let rel = crate::synth::relative_pose(&poses[i], &poses[i + step]);
        reports.push(evaluate_tracking(ann.points(s)?, ann.points(t)?, &depth, &rel, &cfg.intrinsics));
    }
    let report = EvalReport::merge(&reports);
    out_dir(&cfg.output_dir)?;
    let p = cfg.output_dir.join("eval.csv");
    report.write_csv(&p).map_err(eval_unwritable(&p))?;
    Ok(report)
}

/// Outcome of a mosaic run.
#[derive(Debug, Clone)]
pub struct MosaicOutput {
    pub pose: Pose6DoF,
    pub srl_percent: f64,
    /// Whether the pair passed the SRL filter and a mosaic was written.
    pub kept: bool,
    pub mosaic_path: Option<PathBuf>,
}

/// Registers the pair, scores it by SRL and, when it passes the filter
/// (`srl % < threshold`), writes `mosaic.png`. `mosaic.txt` always records
/// the score and decision.
pub fn cmd_mosaic(cfg: &RunConfig, paths: &PairPaths, pose: Option<Pose6DoF>) -> Result<MosaicOutput> {
    let pair = load_pair(cfg, paths)?;
    let pose = match pose {
        Some(p) => p,
        None => register_pair(cfg, &pair)?.pose,
    };
    let tv = TargetView::new(&pair.tf, &pair.ts, &pair.td)?;
    let sv = SourceView::new(&pair.sf, &pair.ss)?;
    let report = crate::losses::total_loss(&tv, &[(sv, pose)], &cfg.intrinsics, &cfg.weights)?;
    let pct = srl_percent(report.srl);
    let kept = pct < cfg.srl_filter_percent;
    let dir = &cfg.output_dir;
    out_dir(dir)?;
    let mut mosaic_path = None;
    if kept {
        let m = build_mosaic(&pair.sf, &pair.tf, tv.exclude(), &pair.td, &pose, &cfg.intrinsics);
        let p = dir.join("mosaic.png");
        write_frame(&p, &m.frame).map_err(unwritable(&p))?;
        mosaic_path = Some(p);
    }
    write_text(
        &dir.join("mosaic.txt"),
        &format!(
            "srl_percent = {pct}\nthreshold_percent = {}\nkept = {kept}\npose = {}",
            cfg.srl_filter_percent,
            format_poses(&[pose])
        ),
    )?;
    Ok(MosaicOutput {
        pose,
        srl_percent: pct,
        kept,
        mosaic_path,
    })
}

/// Writes a depth map, for tools that derive depth outside the renderer.
pub fn save_depth(path: &Path, d: &DepthMap) -> Result<()> {
    write_depth(path, d).map_err(unwritable(path))
}
