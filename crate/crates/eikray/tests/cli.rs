//! CLI behavior: exit codes, artifact layout, and command plumbing.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eikray"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = eikray::cli::RunConfig::default();
    cfg.scene.orbit.count = 6;
    cfg.scene.orbit.resolution = [20, 20];
    cfg.fit.batch_rays = 64;
    cfg.fit.iters_background = 12;
    cfg.fit.iters_ior = 15;
    cfg.fit.doubling_every = 5;
    cfg.fit.bg_dims = 16;
    cfg.fit.ior_dims = 12;
    cfg.fit.bake_dims = 24;
    cfg.seed = 5;
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn make_scene_then_fit_ior_writes_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let ds = root.path().join("ds");
    let status = bin()
        .args([
            "make-scene",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ds.to_str().unwrap(),
            "--threads",
            "2",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(ds.join("dataset.json").exists());
    assert!(ds.join("box.json").exists());
    assert!(ds.join("config.resolved.json").exists());
    assert!(ds.join("view_000.pfm").exists());
    assert!(ds.join("mask_000.ppm").exists());
    assert!(ds.join("depth_000.pfm").exists());

    let model = root.path().join("model");
    let status = bin()
        .args([
            "fit",
            "ior",
            "--config",
            cfg.to_str().unwrap(),
            "--dataset",
            ds.to_str().unwrap(),
            "--out",
            model.to_str().unwrap(),
            "--background",
            "scene",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(model.join("ior_raw.grid").exists());
    assert!(model.join("model.json").exists());

    // Loss log rows equal the iteration count.
    let log = std::fs::read_to_string(model.join("loss_ior.csv")).unwrap();
    let rows = log.lines().count() - 1; // header
    assert_eq!(rows, 15);
}

#[test]
fn fit_ior_rejects_dataset_without_box() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path());
    let ds = root.path().join("ds");
    assert_eq!(
        bin()
            .args([
                "make-scene",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                ds.to_str().unwrap(),
            ])
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    std::fs::remove_file(ds.join("box.json")).unwrap();
    let status = bin()
        .args([
            "fit",
            "ior",
            "--config",
            cfg.to_str().unwrap(),
            "--dataset",
            ds.to_str().unwrap(),
            "--out",
            root.path().join("model").to_str().unwrap(),
            "--background",
            "scene",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2), "missing box file is a config error");
}

#[test]
fn make_scene_rejects_zero_camera_spec() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = eikray::cli::RunConfig::default();
    cfg.scene.orbit.count = 0;
    let path = root.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let status = bin()
        .args([
            "make-scene",
            "--config",
            path.to_str().unwrap(),
            "--out",
            root.path().join("out").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_flag_is_usage_error() {
    let status = bin().args(["fit", "--nonsense"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn metrics_on_identical_dirs_reports_sentinel() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("imgs");
    std::fs::create_dir_all(&dir).unwrap();
    let img = eikray::imageio::ImageF::from_data(3, 2, 3, (0..18).map(|i| i as f32 * 0.05).collect());
    eikray::imageio::write_pfm(&dir.join("a.pfm"), &img).unwrap();
    eikray::imageio::write_pfm(&dir.join("b.pfm"), &img).unwrap();
    let out = root.path().join("report");
    let status = bin()
        .args([
            "metrics",
            "--dir-a",
            dir.to_str().unwrap(),
            "--dir-b",
            dir.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["mean_psnr_db"].as_f64().unwrap(), 999.0);
    assert_eq!(report["mean_ssim"].as_f64().unwrap(), 1.0);
    assert_eq!(report["views"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_command_passes() {
    let output = bin()
        .args(["gradcheck", "--seed", "1", "--size", "8", "--threads", "2"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{:?}", output);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(stdout.matches("PASS").count(), 5, "{stdout}");
}
