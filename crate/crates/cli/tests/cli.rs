//! End-to-end tests of the command-line pipeline, driving the built binary
//! on small synthetic datasets.

use std::path::Path;
use std::process::{Command, Output};

use ndarray::Array2;
use num_complex::Complex64;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ptycholens")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn golden_config() -> serde_json::Value {
    serde_json::json!({
        "grid": {"height": 180, "width": 180},
        "geometry": {
            "wavelength_nm": 532.0,
            "sensor_pitch_um": 1.67,
            "d1_um": 300.0,
            "d2_um": 700.0,
            "upsample_m": 3
        },
        "object": {
            "kind": "phase_disks",
            "disk_phase_rad": 1.0,
            "disk_radius_um": 4.0,
            "n_disks": 5
        },
        "diffuser": {
            "bead_diameter_um": 1.0,
            "bead_density_per_um2": 0.35,
            "max_phase_rad": 1.5,
            "amplitude_floor": 0.85,
            "rng_seed": 0
        },
        "trajectory": {
            "pattern": "random_walk",
            "n_frames": 100,
            "step_um": 4.0,
            "seed": 17
        },
        "noise": {"model": "none", "rng_seed": 0}
    })
}

/// The golden workflow straight through the CLI: simulate, register,
/// reconstruct blindly, and report; the reported phase RMSE must stay
/// below 0.1 rad.
#[test]
fn golden_pipeline_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("sim.json");
    std::fs::write(&config_path, golden_config().to_string()).unwrap();
    let dataset = dir.path().join("dataset");
    let poses = dir.path().join("poses.json");
    let recon = dir.path().join("recon");
    let report = dir.path().join("report");

    run_ok(&[
        "simulate",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        dataset.to_str().unwrap(),
    ]);
    assert!(dataset.join("manifest.json").exists());
    assert!(dataset.join("frame_0000.png").exists());
    assert!(dataset.join("ground_truth/object.cfld").exists());

    run_ok(&[
        "register",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        poses.to_str().unwrap(),
    ]);
    let poses_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&poses).unwrap()).unwrap();
    assert_eq!(poses_json.as_array().unwrap().len(), 100);

    // blind mode: --poses omitted, registration runs implicitly
    run_ok(&[
        "reconstruct",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        recon.to_str().unwrap(),
    ]);
    for file in [
        "object.cfld",
        "diffuser.cfld",
        "error_history.json",
        "object_amplitude.png",
        "object_phase.png",
    ] {
        assert!(recon.join(file).exists(), "missing {file}");
    }

    run_ok(&[
        "report",
        "--dataset",
        dataset.to_str().unwrap(),
        "--recon",
        recon.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    let report_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap())
            .unwrap();
    let rmse = report_json["phase_rmse_rad"].as_f64().unwrap();
    assert!(rmse < 0.1, "reported phase RMSE {rmse}");
    let pose_max = report_json["pose_max_error_px"].as_f64().unwrap();
    assert!(pose_max < 1.0, "pose max error {pose_max}");
    assert!(report.join("error_history.png").exists());
}

/// Re-running a command on identical inputs produces identical outputs.
#[test]
fn simulate_is_rerunnable_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("sim.json");
    let mut config = golden_config();
    config["trajectory"]["n_frames"] = serde_json::json!(4);
    config["grid"] = serde_json::json!({"height": 36, "width": 36});
    std::fs::write(&config_path, config.to_string()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "simulate",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for name in ["manifest.json", "frame_0000.png", "frame_0003.png"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between reruns");
    }
}

fn write_blob_field(path: &Path) {
    let n = 160;
    let mut phase = Array2::<f64>::zeros((n, n));
    let centers = [(40.0, 40.0), (40.0, 120.0), (120.0, 40.0), (120.0, 120.0), (80.0, 80.0)];
    for &(cy, cx) in &centers {
        for y in 0..n {
            for x in 0..n {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                phase[[y, x]] += 1.0 * (-r2 / (2.0 * 16.0)).exp();
            }
        }
    }
    let data = phase.mapv(|p| Complex64::from_polar(1.0, p));
    let field = ptycholens::ComplexField::new(data, 0.5, 0.532).unwrap();
    field.write_cfld(path).unwrap();
}

#[test]
fn segment_counts_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("field.cfld");
    write_blob_field(&field);
    let out = dir.path().join("seg");
    run_ok(&[
        "segment",
        "--field",
        field.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("segmentation.json")).unwrap())
            .unwrap();
    assert_eq!(stats["n_cells"].as_u64().unwrap(), 5);
    assert!(out.join("labels.png").exists());
}

#[test]
fn refocus_writes_scan_and_planes() {
    let dir = tempfile::tempdir().unwrap();
    let field_path = dir.path().join("field.cfld");
    write_blob_field(&field_path);
    let out = dir.path().join("focus");
    run_ok(&[
        "refocus",
        "--field",
        field_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--z-min",
        "-30",
        "--z-max",
        "30",
        "--steps",
        "7",
    ]);
    let scan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("focus_scan.json")).unwrap())
            .unwrap();
    assert_eq!(scan["z_values_um"].as_array().unwrap().len(), 7);
    assert!(scan["best_z_um"].as_f64().unwrap().is_finite());
    assert!(out.join("best_plane.png").exists());
    assert!(out.join("refocused.cfld").exists());
}

/// Failures exit non-zero with machine-readable JSON on stderr.
#[test]
fn failure_emits_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "reconstruct",
        "--dataset",
        dir.path().join("missing").to_str().unwrap(),
        "--out",
        dir.path().join("recon").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert!(parsed["error"].as_str().unwrap().contains("manifest"));
    assert_eq!(parsed["kind"].as_str().unwrap(), "dataset");
}
