//! End-to-end tests of the spooflab binary: artifact round trips, exit
//! codes, config-file resolution, and the external-detector protocol via a
//! real subprocess.

use spooflab_core::detector::SurrogateParams;
use spooflab_core::kitti::read_point_cloud;
use spooflab_core::lidar::BeamTable;
use spooflab_core::synthetic::{render_scene, write_kitti_frame, SceneSpec};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spooflab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spooflab"));
    // Keep the test hermetic from a developer's own config.
    cmd.env_remove("SPOOFLAB_CONFIG");
    cmd
}

fn stub_path() -> &'static str {
    env!("CARGO_BIN_EXE_spooflab-stub-detector")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// One-frame KITTI-layout dataset with a car 18 m ahead.
fn make_dataset(dir: &Path) -> PathBuf {
    let beams = BeamTable::hdl64e();
    let spec = SceneSpec::car_at(18.0, 0.0, 0.0);
    let cloud = render_scene(&spec, &beams, 0.2_f64.to_radians());
    let root = dir.join("kitti");
    write_kitti_frame(&root, "000000", &cloud, &[spec.car]).expect("fixture dataset");
    root
}

#[test]
fn beams_prints_64_rows() {
    let out = spooflab()
        .args(["beams", "--model", "hdl64e"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "beam_index,elevation_deg");
    assert_eq!(lines.len(), 65, "header plus 64 beams");
    assert_eq!(lines[1], "0,2");
    assert_eq!(lines[64], "63,-24.8");

    let bad = spooflab()
        .args(["beams", "--model", "vlp16"])
        .output()
        .unwrap();
    assert_eq!(exit_code(&bad), 2);
}

#[test]
fn attack_validate_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = make_dataset(dir.path());
    let out1 = dir.path().join("out1");
    let out2 = dir.path().join("out2");

    let run = |out_dir: &Path| {
        spooflab()
            .args([
                "attack",
                "--dataset",
                root.to_str().unwrap(),
                "--frame",
                "0",
                "--target",
                "0",
                "--points",
                "200",
                "--iters",
                "30",
                "--restarts",
                "2",
                "--detector",
                "surrogate",
                "--seed",
                "7",
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap()
    };

    let first = run(&out1);
    assert_eq!(exit_code(&first), 0, "attack should hide: {first:?}");
    let cloud_path = out1.join("000000_adv.bin");
    let report_path = out1.join("000000_report.json");
    assert!(cloud_path.exists() && report_path.exists());

    // Artifacts are re-loadable.
    let attacked = read_point_cloud(&cloud_path).unwrap();
    assert!(!attacked.is_empty());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["success"], serde_json::Value::Bool(true));
    assert_eq!(report["config"]["points"], serde_json::json!(200));

    // Identical seed, byte-identical report modulo the timing field.
    let second = run(&out2);
    assert_eq!(exit_code(&second), 0);
    let mut a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let mut b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out2.join("000000_report.json")).unwrap())
            .unwrap();
    a["wall_time_ms"] = serde_json::json!(0);
    b["wall_time_ms"] = serde_json::json!(0);
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(
        std::fs::read(&cloud_path).unwrap(),
        std::fs::read(out2.join("000000_adv.bin")).unwrap(),
        "attacked clouds must be byte-identical"
    );

    // The emitted cloud satisfies the physical constraints.
    let validate = spooflab()
        .args([
            "validate",
            "--cloud",
            cloud_path.to_str().unwrap(),
            "--baseline",
            root.join("velodyne/000000.bin").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&validate), 0, "{validate:?}");
    let summary: serde_json::Value = serde_json::from_str(&stdout(&validate)).unwrap();
    assert_eq!(summary["passed"], serde_json::Value::Bool(true));
    assert!(summary["injected_points"].as_u64().unwrap() > 0);
}

#[test]
fn validate_rejects_off_grid_points() {
    let dir = tempfile::tempdir().unwrap();
    let root = make_dataset(dir.path());
    let baseline = root.join("velodyne/000000.bin");
    let tampered = dir.path().join("tampered.bin");
    let mut bytes = std::fs::read(&baseline).unwrap();
    // A point far above any beam elevation.
    for v in [12.123f32, 3.456, 2.789, 0.5] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&tampered, bytes).unwrap();

    let out = spooflab()
        .args([
            "validate",
            "--cloud",
            tampered.to_str().unwrap(),
            "--baseline",
            baseline.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1, "constraint violation exits 1");
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["passed"], serde_json::Value::Bool(false));
    assert_eq!(
        summary["grid_alignment"]["passed"],
        serde_json::Value::Bool(false)
    );
}

#[test]
fn eval_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let eval_path = dir.path().join("eval_report.json");
    let out = spooflab()
        .args([
            "eval",
            "--synthetic",
            "3",
            "--points",
            "200",
            "--iters",
            "10",
            "--restarts",
            "1",
            "--seed",
            "3",
            "--out",
            eval_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_path).unwrap()).unwrap();
    assert_eq!(report["kind"], "eval");
    assert_eq!(report["total_targets"], serde_json::json!(3));

    let sweep_path = dir.path().join("sweep.csv");
    let out = spooflab()
        .args([
            "sweep",
            "--synthetic",
            "2",
            "--counts",
            "200",
            "--iters",
            "10",
            "--restarts",
            "1",
            "--format",
            "csv",
            "--out",
            sweep_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{out:?}");
    let text = std::fs::read_to_string(&sweep_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "points,asr");
    assert_eq!(lines.len(), 2, "single count, single row");
    assert!(lines[1].starts_with("200,"));
}

#[test]
fn calibrate_emits_loadable_params() {
    let dir = tempfile::tempdir().unwrap();
    let params_path = dir.path().join("surrogate.conf");
    let out = spooflab()
        .args([
            "calibrate",
            "--synthetic",
            "3",
            "--out",
            params_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{out:?}");
    let text = std::fs::read_to_string(&params_path).unwrap();
    let mut params = SurrogateParams::default();
    params.apply_kv(&text).expect("calibrated params parse");
    assert!(params.above_weight > 0.0);

    // The calibrated file feeds back into an attack run.
    let root = make_dataset(dir.path());
    let attack = spooflab()
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--points",
            "200",
            "--iters",
            "20",
            "--restarts",
            "1",
            "--surrogate-config",
            params_path.to_str().unwrap(),
            "--out",
            dir.path().join("out").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&attack), 0, "{attack:?}");
}

#[test]
fn external_stub_detector_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = make_dataset(dir.path());

    // An empty detector never sees the car: hidden immediately, exit 0.
    let empty = spooflab()
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--points",
            "5",
            "--iters",
            "2",
            "--restarts",
            "1",
            "--grad",
            "fd",
            "--detector",
            &format!("external:cmd:{} --empty", stub_path()),
            "--out",
            dir.path().join("empty").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&empty), 0, "{empty:?}");

    // A detector pinned to the target with high confidence cannot be fooled:
    // the attack exhausts its budget and exits 1.
    let pinned = spooflab()
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--points",
            "5",
            "--iters",
            "2",
            "--restarts",
            "1",
            "--grad",
            "fd",
            "--detector",
            &format!(
                "external:cmd:{} --fixed 18.0,0.0,-0.95,3.9,1.6,1.56,0.0,0.95",
                stub_path()
            ),
            "--out",
            dir.path().join("pinned").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&pinned), 1, "{pinned:?}");

    // Analytic gradients against an external detector are a usage error.
    let misuse = spooflab()
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--detector",
            &format!("external:cmd:{} --empty", stub_path()),
            "--out",
            dir.path().join("misuse").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&misuse), 2, "{misuse:?}");
}

#[test]
fn config_file_and_env_var_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let root = make_dataset(dir.path());
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "points = 137\niters = 20\nrestarts = 1\nseed = 9\n").unwrap();

    let out_dir = dir.path().join("out");
    let out = spooflab()
        .env("SPOOFLAB_CONFIG", conf.to_str().unwrap())
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 0, "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("000000_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["points"], serde_json::json!(137));
    assert_eq!(report["config"]["seed"], serde_json::json!(9));

    // An explicit flag beats the file.
    let out2_dir = dir.path().join("out2");
    let out2 = spooflab()
        .env("SPOOFLAB_CONFIG", conf.to_str().unwrap())
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--points",
            "150",
            "--out",
            out2_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&out2), 0);
    let report2: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out2_dir.join("000000_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report2["config"]["points"], serde_json::json!(150));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = make_dataset(dir.path());

    let bad_target = spooflab()
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--target",
            "99",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&bad_target), 2);

    let bad_detector = spooflab()
        .args([
            "attack",
            "--dataset",
            root.to_str().unwrap(),
            "--frame",
            "000000",
            "--detector",
            "quantum",
            "--out",
            dir.path().join("y").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&bad_detector), 2);

    let missing_scenes = spooflab().args(["eval"]).output().unwrap();
    assert_eq!(exit_code(&missing_scenes), 2);

    // Missing dataset directory is an I/O failure, not usage.
    let gone = spooflab()
        .args([
            "attack",
            "--dataset",
            dir.path().join("nope").to_str().unwrap(),
            "--frame",
            "000000",
            "--out",
            dir.path().join("z").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(exit_code(&gone), 3);
}
