use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ocusurf::camera::Pose6DoF;
use ocusurf::cli::read_poses;
use ocusurf::imaging::{write_depth, write_segmap, DepthMap, Label, SegMap};
use ocusurf::synth::EyeModel;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ocusurf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("scene");
    let o = run(&["--seed", seed, "--output-dir", s(&out), "synth"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn kv(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .trim()
        .parse()
        .unwrap()
}

fn pair_args(scene: &Path, t: &str, src: &str) -> Vec<String> {
    let p = |name: String| s(&scene.join(name)).to_string();
    vec![
        "--target-frame".into(),
        p(format!("frame_{t}.png")),
        "--target-seg".into(),
        p(format!("seg_{t}.png")),
        "--target-depth".into(),
        p(format!("depth_{t}.dpth")),
        "--source-frame".into(),
        p(format!("frame_{src}.png")),
        "--source-seg".into(),
        p(format!("seg_{src}.png")),
    ]
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_writes_a_scene_and_reruns_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let fa = files(&synth(a.path(), "5"));
    let names: Vec<_> = fa.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        [
            "annotations.csv",
            "depth_0000.dpth",
            "depth_0001.dpth",
            "depth_0002.dpth",
            "frame_0000.png",
            "frame_0001.png",
            "frame_0002.png",
            "poses.txt",
            "seg_0000.png",
            "seg_0001.png",
            "seg_0002.png",
        ]
    );
    assert_eq!(fa, files(&synth(b.path(), "5")));
    assert_eq!(read_poses(&a.path().join("scene/poses.txt")).unwrap().len(), 3);
}

#[test]
fn fit_sphere_recovers_the_rendered_cornea() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "1");
    let o = run(&[
        "fit-sphere",
        "--depth",
        s(&scene.join("depth_0000.dpth")),
        "--seg",
        s(&scene.join("seg_0000.png")),
        "--region",
        "cornea",
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let pose: Pose6DoF = read_poses(&scene.join("poses.txt")).unwrap()[0];
    let m = EyeModel::default_eye(0);
    let c = pose.transform_point(&m.cornea_center);
    for (key, want) in [("x0", c.x), ("y0", c.y), ("z0", c.z), ("r", m.cornea_radius)] {
        let got = kv(&text, key);
        assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{key}: {got} vs {want}");
    }
}

#[test]
fn missing_input_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "fit-sphere",
        "--depth",
        s(&dir.path().join("nope.dpth")),
        "--seg",
        s(&dir.path().join("nope.png")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn coplanar_region_exits_3() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("flat.dpth");
    let g = dir.path().join("flat.png");
    write_depth(&d, &DepthMap::filled(64, 64, 40.0)).unwrap();
    write_segmap(&g, &SegMap::filled(64, 64, Label::Cornea)).unwrap();
    let o = run(&["fit-sphere", "--depth", s(&d), "--seg", s(&g)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unwritable_output_exits_4() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&["--output-dir", s(&blocker.join("sub")), "synth"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn register_identical_frames_gives_identity() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "2");
    let out = dir.path().join("reg");
    let mut args = vec!["--output-dir".to_string(), s(&out).to_string(), "register".to_string()];
    args.extend(pair_args(&scene, "0001", "0001"));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success());
    let pose = read_poses(&out.join("pose.txt")).unwrap()[0];
    let (dt, da) = pose.distance(&Pose6DoF::IDENTITY);
    assert!(dt < 0.01 && da.to_degrees() < 0.01, "{dt} {da}");
    let trace = fs::read_to_string(out.join("loss_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,srl,recon,ssim,ds,sfl,total"));
    assert!(out.join("warped.png").exists());
}

#[test]
fn diverged_registration_exits_0_with_flag() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "3");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[optim]\nlearning_rate = 1e6\nmax_iters = 3\nmulti_start = 1\n").unwrap();
    let out = dir.path().join("reg");
    let mut args: Vec<String> = ["--config", s(&cfg), "--output-dir", s(&out), "register"]
        .iter()
        .map(|a| a.to_string())
        .collect();
    args.extend(pair_args(&scene, "0000", "0001"));
    let o = bin().args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let status = fs::read_to_string(out.join("status.txt")).unwrap();
    assert!(status.contains("diverged = true"), "{status}");
}

#[test]
fn eval_and_mosaic_write_their_reports() {
    let dir = TempDir::new().unwrap();
    let scene = synth(dir.path(), "4");
    let out = dir.path().join("eval");
    let o = run(&[
        "--output-dir",
        s(&out),
        "eval",
        "--annotations",
        s(&scene.join("annotations.csv")),
        "--poses",
        s(&scene.join("poses.txt")),
        "--depth-dir",
        s(&scene),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("eval.csv").exists());

    let poses = read_poses(&scene.join("poses.txt")).unwrap();
    let rel = ocusurf::synth::relative_pose(&poses[0], &poses[1]);
    let pose_file = dir.path().join("rel.txt");
    fs::write(&pose_file, ocusurf::cli::format_poses(&[rel])).unwrap();
    let mout = dir.path().join("mosaic");
    let mut args: Vec<String> = ["--output-dir", s(&mout), "mosaic", "--pose", s(&pose_file)]
        .iter()
        .map(|a| a.to_string())
        .collect();
    args.extend(pair_args(&scene, "0000", "0001"));
    let o = bin().args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("kept = true"), "{text}");
    assert!(mout.join("mosaic.png").exists());
}

#[test]
fn help_lists_flags_and_profile_defaults() {
    let o = run(&["--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for flag in [
        "--config",
        "--seed",
        "--weights-profile",
        "--output-dir",
        "--frame-step",
        "--sfl-threshold",
        "--srl-filter-percent",
    ] {
        assert!(text.contains(flag), "{flag}");
    }
    assert!(text.contains("0.85 SRL") && text.contains("10000 SFL"));
    assert!(text.contains("[default: 10]") && text.contains("[default: 5]"));
    for sub in ["synth", "fit-sphere", "register", "eval", "mosaic"] {
        let o = run(&[sub, "--help"]);
        assert!(o.status.success());
        assert!(String::from_utf8(o.stdout).unwrap().contains("--weights-profile"), "{sub}");
    }
}
