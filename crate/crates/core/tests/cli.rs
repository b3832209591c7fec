use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const APPENDIX: &str = r#"{"format_version": 1, "input_dim": 2, "layers": [
  {"id": 1, "kind": "Gemm", "weights": [[1, 1], [1, -1]], "bias": [0, 0], "inputs": [0]},
  {"id": 2, "kind": "ReLU", "inputs": [1]},
  {"id": 3, "kind": "Gemm", "weights": [[1, 1]], "bias": [0], "inputs": [2]}]}
"#;

const REGION: &str = "(declare-const X_0 Real)
(declare-const X_1 Real)
(declare-const Y_0 Real)
(assert (>= X_0 -1))
(assert (<= X_0 1))
(assert (>= X_1 0))
(assert (<= X_1 1))
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_obbtrh"))
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        w.write("appendix.json", APPENDIX);
        w.write("safe.vnnlib", &format!("{REGION}(assert (< Y_0 0))\n"));
        w.write("upper.vnnlib", &format!("{REGION}(assert (>= Y_0 1.5))\n"));
        w.write("tight.vnnlib", &format!("{REGION}(assert (>= Y_0 2.5))\n"));
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.path(name), text).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        bin().current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(name)).unwrap()).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn output_interval(report: &Value) -> (f64, f64) {
    let iv = &report["metrics"]["layers"][1]["intervals"][0];
    (iv[0].as_f64().unwrap(), iv[1].as_f64().unwrap())
}

#[test]
fn appendix_verify_with_output_tightening() {
    let w = Work::new();
    let o = w.run(&[
        "verify", "--model", "appendix.json", "--property", "safe.vnnlib", "--method", "obbt-rh", "--horizon", "2",
        "--tighten-output", "--report", "r.json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = w.json("r.json");
    assert_eq!(r["verdict"], "Holds");
    assert_eq!(r["format_version"], 1);
    assert_eq!(output_interval(&r), (0.0, 2.0));
    assert_eq!(r["metrics"]["layers"][1]["range"], 2.0);
}

#[test]
fn one_layer_window_only_sees_the_hidden_box() {
    let w = Work::new();
    let o = w.run(&[
        "verify", "--model", "appendix.json", "--property", "safe.vnnlib", "--horizon", "1", "--tighten-output",
        "--report", "r.json",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(output_interval(&w.json("r.json")), (0.0, 3.0));
}

#[test]
fn interval_bounds_report_wider_range() {
    let w = Work::new();
    let o = w.run(&["verify", "--model", "appendix.json", "--property", "tight.vnnlib", "--method", "ibp", "--report", "r.json"]);
    // max w is 2, so w >= 2.5 is unreachable; the MILP decides it even from loose bounds.
    assert_eq!(code(&o), 0);
    let r = w.json("r.json");
    assert_eq!(r["metrics"]["layers"][1]["range"], 3.0);
    assert_eq!(r["metrics"]["range_all"], 3.0);
}

#[test]
fn violated_property_exits_one_with_counterexample() {
    let w = Work::new();
    let o = w.run(&["verify", "--model", "appendix.json", "--property", "upper.vnnlib", "--report", "r.json"]);
    assert_eq!(code(&o), 1);
    let r = w.json("r.json");
    assert_eq!(r["verdict"], "Violated");
    let y = r["counterexample_output"][0].as_f64().unwrap();
    assert!(y >= 1.5 + 1e-6);
    let x: Vec<f64> = r["counterexample"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((-1.0..=1.0).contains(&x[0]) && (0.0..=1.0).contains(&x[1]));
    assert!(((x[0] + x[1]).max(0.0) + (x[0] - x[1]).max(0.0) - y).abs() < 1e-12);
}

#[test]
fn empty_region_is_vacuous_holds() {
    let w = Work::new();
    let text = REGION.replace("(assert (<= X_0 1))", "(assert (<= X_0 -2))");
    w.write("empty.vnnlib", &format!("{text}(assert (<= Y_0 0))\n"));
    let o = w.run(&["verify", "--model", "appendix.json", "--property", "empty.vnnlib", "--report", "r.json"]);
    assert_eq!(code(&o), 0);
    let r = w.json("r.json");
    assert_eq!(r["verdict"], "Holds");
    assert_eq!(r["vacuous"], true);
}

#[test]
fn input_errors_exit_three_and_name_the_path() {
    let w = Work::new();
    let o = w.run(&["verify", "--model", "nowhere.json", "--property", "safe.vnnlib"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.json"));

    w.write("bad.json", "{\"format_version\": 1,");
    let o = w.run(&["verify", "--model", "bad.json", "--property", "safe.vnnlib"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));

    let o = w.run(&["verify", "--model", "appendix.json", "--property", "safe.vnnlib", "--method", "ibp", "--horizon", "2"]);
    assert_eq!(code(&o), 3);
    let o = w.run(&["verify", "--bogus"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn tighten_ibp_matches_interval_propagation() {
    let w = Work::new();
    let o = w.run(&["tighten", "--model", "appendix.json", "--property", "safe.vnnlib", "--method", "ibp", "--out", "b.json"]);
    assert_eq!(code(&o), 0);
    let b = w.json("b.json");
    assert_eq!(b["pre"]["1"], serde_json::json!([[-1.0, 2.0], [-2.0, 1.0]]));
    assert_eq!(b["pre"]["2"], serde_json::json!([[0.0, 3.0]]));
    assert_eq!(b["post"]["1"], serde_json::json!([[0.0, 2.0], [0.0, 1.0]]));
}

fn fixture(w: &Work, seed: &str, gemms: &str) -> (PathBuf, PathBuf) {
    let dir = w.path(&format!("fx{seed}"));
    let o = w.run(&["fixture", "--seed", seed, "--gemms", gemms, "--max-width", "4", "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (dir.join("model.json"), dir.join("property.vnnlib"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tighten_visits_rolling_windows_in_order() {
    let w = Work::new();
    let (model, prop) = fixture(&w, "11", "5");
    let o = w.run(&[
        "tighten", "--model", s(&model), "--property", s(&prop), "--horizon", "2", "--out", "b.json", "--report", "t.json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = w.json("t.json");
    let pairs: Vec<(u64, u64)> = r["tightening"]["windows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| (v["s"].as_u64().unwrap(), v["t"].as_u64().unwrap()))
        .collect();
    assert_eq!(pairs, vec![(0, 2), (1, 3), (2, 4)]);
    assert!(w.json("b.json")["pre"]["5"].is_array());
}

#[test]
fn exported_bounds_feed_verify_and_report() {
    let w = Work::new();
    let (model, prop) = fixture(&w, "5", "3");
    let o = w.run(&["tighten", "--model", s(&model), "--property", s(&prop), "--out", "b.json"]);
    assert_eq!(code(&o), 0);
    let direct = w.run(&["verify", "--model", s(&model), "--property", s(&prop), "--report", "d.json"]);
    let imported = w.run(&["verify", "--model", s(&model), "--property", s(&prop), "--bounds-in", "b.json", "--report", "i.json"]);
    assert_eq!(code(&direct), code(&imported));
    let (d, i) = (w.json("d.json"), w.json("i.json"));
    assert_eq!(d["metrics"]["layers"], i["metrics"]["layers"]);
    assert!(i["tightening"].is_null());

    let o = w.run(&["report", "--model", s(&model), "--property", s(&prop), "--bounds-in", "b.json", "--out", "m.json"]);
    assert_eq!(code(&o), 0);
    let m = w.json("m.json");
    assert_eq!(m["metrics"]["method"], "imported");
    assert!(m["verdict"].is_null());
}

#[test]
fn worker_count_does_not_change_bound_bytes() {
    let w = Work::new();
    let (model, prop) = fixture(&w, "21", "4");
    for (workers, out) in [("1", "w1.json"), ("4", "w4.json")] {
        let o = w.run(&["tighten", "--model", s(&model), "--property", s(&prop), "--workers", workers, "--out", out]);
        assert_eq!(code(&o), 0);
    }
    let a = std::fs::read(w.path("w1.json")).unwrap();
    let b = std::fs::read(w.path("w4.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn time_limit_env_override_is_validated() {
    let w = Work::new();
    let o = bin()
        .current_dir(w.dir.path())
        .env("OBBTRH_TIME_LIMIT", "0")
        .args(["tighten", "--model", "appendix.json", "--property", "safe.vnnlib"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("time-limit"));
}
