use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use microtune_core::runspec::RunSpec;
use microtune_server::AppState;
use serde_json::Value;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn microtune(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_microtune"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn validate_space_names_the_offending_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"name": "x", "parameters": [
            {"name": "heap", "kind": "byte", "values": ["256m"], "default": "256m"},
            {"name": "gc", "kind": "categorical", "values": ["g1", "g1"], "default": "g1"}]}"#,
    )
    .unwrap();
    let out = microtune(&[&"validate-space", &bad]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`gc`"), "{err}");

    let ok = microtune(&[&"validate-space", &data_dir().join("spaces/s2.json")]);
    assert!(ok.status.success());
    assert!(stdout(&ok).contains("cardinality 6"));
}

#[test]
fn usage_errors_exit_nonzero() {
    assert!(!microtune(&[&"frobnicate"]).status.success());
    assert!(!microtune(&[&"cardinality", &"/nonexistent/space.json"]).status.success());
    assert!(!microtune(&[&"report", &"/nonexistent/run.jsonl"]).status.success());
    let unknown = microtune(&[&"cardinality", &data_dir().join("spaces/s2.json"), &"--disable", &"nope"]);
    assert!(!unknown.status.success());
}

#[test]
fn cardinality_with_disabled_parameters() {
    let space = data_dir().join("spaces/reference-11x3.json");
    assert_eq!(stdout(&microtune(&[&"cardinality", &space])).trim(), "177147");
    let out = microtune(&[&"cardinality", &space, &"--disable", &"gc", &"--disable", &"memory"]);
    assert_eq!(stdout(&out).trim(), "19683");
}

#[test]
fn report_formats_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.jsonl");
    let random = dir.path().join("random.jsonl");
    assert!(microtune(&[&"run", &data_dir().join("specs/sim1-s2-grid.json"), &"-q", &"-o", &grid]).status.success());
    assert!(microtune(&[&"run", &data_dir().join("specs/sim1-s2-random.json"), &"-q", &"-o", &random])
        .status
        .success());

    let json: Value = serde_json::from_str(&stdout(&microtune(&[&"report", &grid, &"-f", &"json"]))).unwrap();
    assert_eq!(json["counts"]["complete"], 6);
    let csv = stdout(&microtune(&[&"report", &grid, &"-f", &"csv"]));
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,5,0.68"));
    let svg_path = dir.path().join("series.svg");
    assert!(microtune(&[&"report", &grid, &"-f", &"svg", &"-o", &svg_path]).status.success());
    assert!(std::fs::read_to_string(&svg_path).unwrap().contains("class=\"baseline\""));

    let cmp: Value =
        serde_json::from_str(&stdout(&microtune(&[&"compare", &grid, &random, &"--format", &"json"]))).unwrap();
    assert!((cmp["global_best_mean_s"].as_f64().unwrap() - 0.684).abs() < 1e-12);
    assert_eq!(cmp["a"]["candidate_trials"], 6);
    assert_eq!(cmp["b"]["candidate_trials"], 3);
    let text = stdout(&microtune(&[&"compare", &grid, &random]));
    assert!(text.contains("time saving"));
}

/// Drops the fields that legitimately differ between two executions of the
/// same run: its identifier and wall-clock timestamps.
fn normalize(log: &Path) -> Vec<String> {
    fn scrub(v: &mut Value) {
        match v {
            Value::Object(map) => {
                for key in ["run_id", "started_at", "finished_at"] {
                    map.remove(key);
                }
                map.values_mut().for_each(scrub);
            }
            Value::Array(items) => items.iter_mut().for_each(scrub),
            _ => {}
        }
    }
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: Value = serde_json::from_str(line).unwrap();
            scrub(&mut v);
            v.to_string()
        })
        .collect()
}

#[test]
fn cli_and_api_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    for spec_file in ["sim1-s2-grid.json", "sim1-s2-random.json"] {
        let spec_path = data_dir().join("specs").join(spec_file);
        let cli_log = dir.path().join(format!("cli-{spec_file}l"));
        assert!(microtune(&[&"run", &spec_path, &"-q", &"-o", &cli_log]).status.success());

        let state = AppState::new(dir.path().join(spec_file));
        let handle = state.runs().start(RunSpec::load(&spec_path).unwrap()).unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        while !state.runs().handle(&handle.run_id).unwrap().status.is_terminal() {
            assert!(Instant::now() < deadline);
            std::thread::sleep(Duration::from_millis(5));
        }
        let api_log = state.runs().log_path(&handle.run_id);
        assert_eq!(normalize(&cli_log), normalize(&api_log), "{spec_file}");
    }
}
