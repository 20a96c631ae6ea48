use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn small_line(system: Value) -> Value {
    json!({
        "name": "small",
        "seed": 3,
        "set": {"kind": "segment-line", "resolution": 1024,
                "params": {"origin": -16.0, "length": 32.0, "unbounded": true}},
        "grid": {"k_min": 1, "k_max": 2},
        "whitney": {"window": {"lo": [-4.0, 0.0], "hi": [4.0, 2.0]}, "k_min": 1, "k_max": 4,
                    "analysis_window": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0]}},
        "kernel": {"name": "poisson-derivative"},
        "system": system,
        "constants": {"c0": 4.0, "p": 2.0, "p_sawtooth": 1.5, "p_goodlambda": 1.5,
                      "eps": [0.05, 0.2], "levels_n": [1e-6, 1.0]},
        "thresholds": {"eta_min": 0.01, "sawtooth_carleson": 1e-3, "goodlambda_beta": 0.5,
                       "t1_carleson": 1e-3, "t1_ratio": 0.3},
        "test_functions": [{"kind": "gaussian-wave", "scale": 2.0, "freq": 2.0}]
    })
}

fn write_scenario(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("scenario.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn adrsq(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adrsq"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn all_passes_on_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "constant-one"})));
    let out = dir.path().join("out");
    let o = adrsq(&["all"], &sc, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    for t in ["report.json", "grid.csv", "t1.csv", "tb_eq3.csv", "packing.csv"] {
        assert!(out.join(t).exists(), "{t} missing");
    }
    let csv = std::fs::read_to_string(out.join("t1.csv")).unwrap();
    assert!(csv.starts_with("cube_id,level,value\n"));
}

#[test]
fn zero_system_fails_the_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "zero"})));
    let out = dir.path().join("out");
    let o = adrsq(&["run-tb"], &sc, &out);
    assert_eq!(o.status.code(), Some(2));
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let status = |name: &str| {
        report["stages"].as_array().unwrap().iter().find(|s| s["name"] == name).unwrap()["status"].clone()
    };
    assert_eq!(status("tb-hypotheses"), "fail");
    assert_eq!(status("stopping"), "hypotheses-not-met");
}

#[test]
fn missing_alpha_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_line(json!({"generator": "constant-one"}));
    v["kernel"] = json!({"name": "envelope"});
    let sc = write_scenario(dir.path(), &v);
    let o = adrsq(&["run-t1"], &sc, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kernel.alpha"), "{err}");
}

#[test]
fn missing_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = adrsq(&["all"], &dir.path().join("nope.json"), &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "random-accretive", "seed": 9})));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    adrsq(&["all"], &sc, &a);
    adrsq(&["all", "--threads", "1"], &sc, &b);
    for f in ["report.json", "tb_eq3.csv", "t1.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn report_matches_schema_keys() {
    let schema: Value = serde_json::from_slice(&std::fs::read(scenarios().join("report.schema.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "constant-one"})));
    let out = dir.path().join("out");
    adrsq(&["all"], &sc, &out);
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    for k in schema["required"].as_array().unwrap() {
        assert!(report.get(k.as_str().unwrap()).is_some(), "report lacks {k}");
    }
    let stage_schema = &schema["properties"]["stages"]["items"];
    let names = stage_schema["properties"]["name"]["enum"].as_array().unwrap();
    let statuses = stage_schema["properties"]["status"]["enum"].as_array().unwrap();
    let stages = report["stages"].as_array().unwrap();
    assert_eq!(stages.len(), names.len());
    for s in stages {
        for k in stage_schema["required"].as_array().unwrap() {
            assert!(s.get(k.as_str().unwrap()).is_some(), "stage lacks {k}");
        }
        assert!(names.contains(&s["name"]) && statuses.contains(&s["status"]));
    }
}

#[test]
fn shipped_scenarios_parse() {
    let dir = tempfile::tempdir().unwrap();
    for e in std::fs::read_dir(scenarios()).unwrap() {
        let p = e.unwrap().path();
        if p.to_string_lossy().ends_with(".schema.json") {
            continue;
        }
        let o = adrsq(&["verify-geometry"], &p, dir.path());
        assert_eq!(o.status.code(), Some(0), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn convergence_needs_two_levels() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "constant-one"})));
    let o = adrsq(&["convergence", "--levels", "1"], &sc, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("≥ 2 levels required"));
}

#[test]
fn convergence_approaches_a_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "constant-one"})));
    let out = dir.path().join("out");
    let o = adrsq(&["convergence", "--levels", "3"], &sc, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("convergence.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("resolution,k_epsilon,t1_sup,global_ratio"));
    let ratios: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ratios.len(), 3);
    let gaps: Vec<f64> = ratios.iter().map(|r| (r - 0.25).abs()).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
}

#[test]
fn convergence_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write_scenario(dir.path(), &small_line(json!({"generator": "constant-one"})));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    adrsq(&["convergence", "--levels", "2"], &sc, &a);
    adrsq(&["convergence", "--levels", "2"], &sc, &b);
    let read = |d: &Path| std::fs::read(d.join("convergence.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn shipped_line_scenario_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = adrsq(&["all"], &scenarios().join("line_poisson.json"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}
