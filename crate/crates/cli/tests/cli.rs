use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;
use volreg::io;

fn volreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volreg")).args(args).output().expect("spawn volreg")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = volreg(args);
    assert!(o.status.success(), "volreg {args:?} failed: {}", stderr(&o));
    o
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// One phantom case shared by all tests, plus a short schedule.
struct Fixture {
    _dir: TempDir,
    case: PathBuf,
    config: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let case = dir.path().join("case");
        ok(&["synth", "--scenario", "vanishing_tumor", "--seed", "3", "--size", "48", "--out", case.to_str().unwrap()]);
        let config = dir.path().join("short.json");
        std::fs::write(&config, r#"{"pyramid_levels": 2, "iterations_per_level": [6, 3]}"#).unwrap();
        Fixture { _dir: dir, case, config }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_a_complete_case() {
    let f = fixture();
    let manifest = read_json(f.case.join("case.json"));
    assert_eq!(manifest["scenario"], "vanishing_tumor");
    assert_eq!(manifest["dims"], serde_json::json!([48, 48, 48]));
    for name in ["moving", "fixed", "organ_moving", "organ_fixed", "tumor_moving", "tumor_fixed", "gt_field"] {
        assert!(f.case.join(format!("{name}.vpv.json")).exists(), "{name} missing");
    }
    assert!(f.case.join("landmarks.csv").exists());
}

#[test]
fn synth_rejects_small_grids() {
    let out = TempDir::new().unwrap();
    let o = volreg(&["synth", "--scenario", "matched_tumor", "--size", "16", "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[validation]:"), "{}", stderr(&o));
}

#[test]
fn pipeline_writes_outputs_and_comparison() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    ok(&[
        "pipeline",
        "--case",
        s(&f.case),
        "--preset",
        "calibrated",
        "--config",
        s(&f.config),
        "--compare-regular",
        "--out",
        s(out.path()),
    ]);
    for name in ["stm", "field_stage1", "field_stage2", "warped", "field_regular"] {
        assert!(out.path().join(format!("{name}.vpv.json")).exists(), "{name} missing");
    }
    let report = read_json(out.path().join("report.json"));
    for key in ["dice_organ", "landmark_distance_mm", "folding_pct", "jacobian_std", "tsr_moving", "tsr_warped", "stsr"]
    {
        assert!(report[key].is_number(), "{key} = {}", report[key]);
    }
    assert_eq!(report["config"]["alpha_vp"], 30.0);
    assert_eq!(report["config"]["iterations_per_level"], serde_json::json!([6, 3]));
    assert!(report["version"].is_string());

    let cmp = read_json(out.path().join("comparison.json"));
    assert!(cmp["regular"]["stsr"].as_f64().unwrap() >= 1.0);
    assert!(cmp["pipeline"]["stsr"].as_f64().unwrap() >= 1.0);

    let stm = io::read_soft(out.path().join("stm.vpv.json")).unwrap();
    assert!(stm.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn pipeline_fans_out_over_cases() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let second = root.path().join("other");
    ok(&["synth", "--scenario", "shrinking_tumor", "--seed", "4", "--size", "48", "--out", s(&second)]);
    let out = root.path().join("runs");
    ok(&["--jobs", "2", "pipeline", "--cases", s(&f.case), s(&second), "--config", s(&f.config), "--out", s(&out)]);
    assert!(out.join("case/report.json").exists());
    assert!(out.join("other/report.json").exists());
}

#[test]
fn register_with_organ_mask_writes_report() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    ok(&[
        "register",
        "--case",
        s(&f.case),
        "--config",
        s(&f.config),
        "--mask-source",
        "organ",
        "--vp",
        "on",
        "--out",
        s(out.path()),
    ]);
    let report = read_json(out.path().join("report.json"));
    assert!(report["dice_organ"].as_f64().unwrap() > 0.8);
    assert!(report["final_loss"]["total"].is_number());
    let stm = io::read_soft(out.path().join("stm.vpv.json")).unwrap();
    assert!(stm.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn vp_without_mask_is_a_usage_error() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let o = volreg(&["register", "--case", s(&f.case), "--vp", "on", "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"));
}

#[test]
fn bad_flags_are_usage_errors() {
    let f = fixture();
    let o = volreg(&["register", "--case", s(&f.case), "--mask-source", "everything", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let o = volreg(&["estimate-mask", "--case", s(&f.case), "--transform", "hard:-1", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_inputs_are_validation_errors() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let o = volreg(&["register", "--case", s(&f.case), "--config", "/does/not/exist.json", "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(3));

    let bad = out.path().join("bad.json");
    std::fs::write(&bad, r#"{"alpha_vpp": 1.0}"#).unwrap();
    let o = volreg(&["register", "--case", s(&f.case), "--config", s(&bad), "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = volreg(&["register", "--case", s(&out.path().join("missing")), "--out", s(out.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn thread_variable_must_be_positive() {
    let o = Command::new(env!("CARGO_BIN_EXE_volreg"))
        .args(["synth", "--scenario", "matched_tumor", "--out", "unused"])
        .env("VOLREG_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn warp_and_metrics_with_zero_field() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    let organ = io::read_binary(f.case.join("organ_moving.vpv.json")).unwrap();
    let zero = out.path().join("zero.vpv.json");
    io::write_volume(&volreg::DisplacementField::zeros(*organ.grid()), &zero).unwrap();

    let warped = out.path().join("w/organ.vpv.json");
    ok(&["warp", "--input", s(&f.case.join("organ_moving.vpv.json")), "--field", s(&zero), "--out", s(&warped)]);
    assert_eq!(io::read_binary(&warped).unwrap(), organ);

    let warped = out.path().join("moving.vpv.json");
    ok(&["warp", "--input", s(&f.case.join("moving.vpv.json")), "--field", s(&zero), "--out", s(&warped)]);
    let moving = io::read_scalar(f.case.join("moving.vpv.json")).unwrap();
    assert_eq!(io::read_scalar(&warped).unwrap(), moving);

    let m = out.path().join("metrics.json");
    ok(&[
        "metrics",
        "--case",
        s(&f.case),
        "--organ-fixed",
        s(&f.case.join("organ_moving.vpv.json")),
        "--field",
        s(&zero),
        "--out",
        s(&m),
    ]);
    let r = read_json(&m);
    assert_eq!(r["dice_organ"], 1.0);
    assert_eq!(r["stsr"], 1.0);
    assert_eq!(r["folding_pct"], 0.0);
}

#[test]
fn estimate_mask_summary() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    ok(&[
        "estimate-mask",
        "--case",
        s(&f.case),
        "--preset",
        "calibrated",
        "--config",
        s(&f.config),
        "--transform",
        "sin",
        "--out",
        s(out.path()),
    ]);
    let summary = read_json(out.path().join("summary.json"));
    assert_eq!(summary["config"]["transform"], "sin");
    assert_eq!(summary["stm_mean_outside_organ"], 0.0);
    assert!(summary["stm_mean_in_organ"].as_f64().unwrap() > 0.0);
}

#[test]
fn seeded_runs_are_reproducible() {
    let f = fixture();
    let out = TempDir::new().unwrap();
    for run in ["a", "b"] {
        ok(&[
            "register",
            "--case",
            s(&f.case),
            "--config",
            s(&f.config),
            "--seed",
            "9",
            "--out",
            s(&out.path().join(run)),
        ]);
    }
    let a = io::read_field(out.path().join("a/field.vpv.json")).unwrap();
    let b = io::read_field(out.path().join("b/field.vpv.json")).unwrap();
    assert_eq!(a, b);
}
