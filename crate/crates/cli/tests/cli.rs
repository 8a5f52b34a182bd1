use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_frustum-fields"));
    c.env("FRUSTUM_FIELDS_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn generate(fixture: &str, out: &Path) {
    let o = run(&["generate", "--scene", &format!("fixture:{fixture}"), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_writes_rasters_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate("wall_stereo", &data);
    for f in ["scene.json", "left_rgb.png", "right_depth.pfm", "left_sparse_depth.pfm", "left_sparse_mask.pfm"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert!(m["version"].as_str().unwrap().starts_with('v'));
    let outputs = m["outputs"].as_array().unwrap();
    assert!(outputs.iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn generated_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    generate("two_boxes_mono", &dir.path().join("a"));
    generate("two_boxes_mono", &dir.path().join("b"));
    for f in ["left_rgb.png", "left_depth.pfm", "left_sparse_depth.pfm"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn one_step_fit_writes_one_metrics_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("fit");
    generate("wall_mono", &data);
    let o = run(&["fit", "--scene", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--steps", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "step,L_total,L_rgb,L_depth,L_sdf,beta");
    assert!(lines[1].starts_with("1,"));
    assert!(out.join("checkpoint.bin").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn stereo_rgb_needs_no_depth_files() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    generate("wall_stereo", &full);
    let bare = dir.path().join("bare");
    fs::create_dir(&bare).unwrap();
    for f in ["scene.json", "left_rgb.pfm", "right_rgb.pfm"] {
        fs::copy(full.join(f), bare.join(f)).unwrap();
    }
    let scene = bare.to_str().unwrap();
    let out = dir.path().join("fit");
    let o = run(&["fit", "--scene", scene, "--out", out.to_str().unwrap(), "--steps", "1", "--mode", "stereo-rgb"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // the default mode wants sparse depth, which is absent
    let o = run(&["fit", "--scene", scene, "--out", dir.path().join("x").to_str().unwrap(), "--steps", "1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["fit", "--precision", "16", "--scene", "x", "--out", "y"])), 1);
    assert_eq!(code(&run(&["generate", "--scene", "fixture:nope", "--out", "y"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);

    let data = dir.path().join("data");
    generate("wall_mono", &data);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"lr": 0.001, "chanels": 4}"#).unwrap();
    let o = run(&["fit", "--scene", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", "y"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("chanels"));

    let o = bin()
        .env("FRUSTUM_FIELDS_THREADS", "zero")
        .args(["gradcheck", "--probes", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn numeric_blowup_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate("wall_mono", &data);
    let cfg = dir.path().join("huge.json");
    fs::write(&cfg, r#"{"lr": 1e300, "steps": 3, "channels": 4}"#).unwrap();
    let out = dir.path().join("fit");
    let o = run(&["fit", "--scene", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn render_and_eval_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fit = dir.path().join("fit");
    generate("sphere_on_plane_mono", &data);
    let o = run(&["fit", "--scene", data.to_str().unwrap(), "--out", fit.to_str().unwrap(), "--steps", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ck = fit.join("checkpoint.bin");

    let scene: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("scene.json")).unwrap()).unwrap();
    let cam = dir.path().join("cam.json");
    fs::write(&cam, scene["cameras"][0].to_string()).unwrap();
    let name = scene["cameras"][0]["name"].as_str().unwrap().to_string();
    let r = dir.path().join("render");
    let o = run(&["render", "--checkpoint", ck.to_str().unwrap(), "--camera", cam.to_str().unwrap(), "--out", r.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // rendering from the fitting camera reproduces the final training render
    let a = fs::read(r.join(format!("{name}_depth.pfm"))).unwrap();
    let b = fs::read(fit.join("renders/step_000002").join(format!("{name}_depth.pfm"))).unwrap();
    assert_eq!(a, b);

    let back = dir.path().join("back.json");
    let mut back_cam = scene["cameras"][0].clone();
    back_cam["name"] = "back".into();
    back_cam["pose"] = serde_json::json!([-1, 0, 0, 0, 0, 1, 0, 0, 0, 0, -1, 0]);
    fs::write(&back, back_cam.to_string()).unwrap();
    let o = run(&["render", "--checkpoint", ck.to_str().unwrap(), "--camera", back.to_str().unwrap(), "--out", r.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("overlap"));

    let e = dir.path().join("eval");
    let o = run(&["eval", "--scene", data.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", e.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(e.join("eval.csv")).unwrap();
    assert!(csv.starts_with("step,view,depth_mae,psnr"));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn gradcheck_detects_a_corrupted_derivative() {
    let o = run(&["gradcheck", "--probes", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["gradcheck", "--probes", "10", "--corrupt", "exp:1.01"]);
    assert_ne!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("FAIL exp ")), "{out}");
}
