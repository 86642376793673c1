mod common;

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use common::matrix::{coverage_gaps, run_matrix};
use common::{entry_dir, Sandbox, FIXTURE_REPO};

#[test]
fn json_matrix_over_every_verb() {
    let sb = Sandbox::with_fixtures();
    let cases = run_matrix(&sb);
    let broken: Vec<String> = cases
        .iter()
        .filter_map(|c| c.problem.as_ref().map(|p| format!("{:?}: {p}", c.args)))
        .collect();
    assert!(broken.is_empty(), "{}", broken.join("\n"));
    assert_eq!(coverage_gaps(&cases), Vec::<String>::new());
}

#[test]
fn find_on_empty_store() {
    let sb = Sandbox::empty();
    let out = sb.ckp(&["find", "program:*", "--json"]);
    assert_eq!(out.code, 0);
    assert_eq!(out.json(), json!({ "matches": [] }));
}

#[test]
fn usage_errors_exit_two() {
    let sb = Sandbox::empty();
    let out = sb.ckp(&["frobnicate", "thing"]);
    assert_eq!(out.code, 2);
    assert!(out.stdout.is_empty());
    assert!(out.stderr.contains("frobnicate"));

    let out = sb.ckp(&[]);
    assert_eq!(out.code, 2);
    assert!(out.stderr.contains("Usage"), "{}", out.stderr);

    let (code, v) = sb.json(&["find", "gadget:*"]);
    assert_eq!(code, 2);
    assert_eq!(v["error"]["code"], "usage");
}

#[test]
fn version_and_help() {
    let sb = Sandbox::empty();
    let out = sb.ckp(&["--version"]);
    assert_eq!(out.code, 0);
    let line = out.stdout.trim_end();
    assert_eq!(line.lines().count(), 1);
    let ver = line.strip_prefix("ckp ").unwrap();
    assert_eq!(ver.split('.').count(), 3);
    assert!(ver.split('.').all(|p| p.parse::<u64>().is_ok()), "{ver}");

    let out = sb.ckp(&["run", "--help"]);
    assert_eq!(out.code, 0);
    assert!(out.stdout.contains("key=value"), "{}", out.stdout);

    let (code, v) = sb.json(&["--help"]);
    assert_eq!(code, 0);
    assert!(v["help"].as_str().unwrap().contains("Usage"));
}

#[test]
fn operation_errors_go_to_stderr_in_text_mode() {
    let sb = Sandbox::with_fixtures();
    let out = sb.ckp(&["show", "program:nope"]);
    assert_eq!(out.code, 1);
    assert!(out.stdout.is_empty());
    assert!(out.stderr.starts_with("error[not_found]"), "{}", out.stderr);
}

#[test]
fn run_reports_metrics_and_failed_runs_are_recorded() {
    let sb = Sandbox::with_fixtures();
    let v = sb.ok(&["run", "pipeline:hello-bench", "iterations=1000000"]);
    let uid = v["experiment"].as_str().unwrap();
    assert_eq!(v["repetitions"], 3);
    assert_eq!(v["functional"]["ops"], 1000000);
    assert!(v["functional"]["checksum"].as_str().unwrap().len() == 16);
    assert!(v["aggregated"]["wall_time_s"]["mean"].as_f64().unwrap() > 0.0);
    assert_eq!(v["choices"]["opt"], "2");

    let shown = sb.ok(&["show", &format!("experiment:{uid}")]);
    assert_eq!(shown["integrity"]["ok"], true);

    let (code, err) = sb.json(&["run", "pipeline:hello-bench", "iterations=0"]);
    assert_eq!(code, 1);
    assert_eq!(err["error"]["code"], "run_failed");
    let failed = err["error"]["experiment"].as_str().unwrap();
    let rec = sb.ok(&["show", &format!("experiment:{failed}")]);
    assert_eq!(rec["meta"]["record"]["status"], "failed");

    let table = sb.ok(&["table", "experiment", "status=failed", "columns=uid,status"]);
    assert_eq!(table["rows"], 1);
    assert_eq!(table["csv"], format!("uid,status\n{failed},failed\n"));
}

#[test]
fn explore_with_a_crashing_point() {
    let sb = Sandbox::with_fixtures();
    // a space where one value of `iterations` makes the workload exit non-zero
    let dir = entry_dir(&sb, "pipeline", "hello-bench");
    let mut meta: Value = serde_json::from_str(&fs::read_to_string(dir.join("meta.json")).unwrap()).unwrap();
    meta["tuning"]["dimensions"] = json!([
        {"choice_key": "opt", "values": [1, 2]},
        {"choice_key": "iterations", "values": [0, 1000000, 2000000]}
    ]);
    fs::write(dir.join("meta.json"), meta.to_string()).unwrap();

    let v = sb.ok(&["explore", "pipeline:hello-bench"]);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 6);
    let failed: Vec<&Value> = points.iter().filter(|p| p["status"] == "failed").collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|p| p["choices"]["iterations"] == "0"));
    let failed_ids: Vec<&Value> = failed.iter().map(|p| &p["experiment"]).collect();
    let frontier = v["frontier"].as_array().unwrap();
    assert!(!frontier.is_empty());
    assert!(frontier.iter().all(|f| !failed_ids.contains(&f)));
}

#[test]
fn output_flag_writes_files() {
    let sb = Sandbox::with_fixtures();
    sb.ok(&["run", "pipeline:hello-bench", "iterations=1000000"]);
    let csv = sb.path().join("out.csv");
    let v = sb.ok(&["table", "experiment", "--output", csv.to_str().unwrap()]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(v["csv"], text);
    assert!(text.starts_with("uid,status,wall_time_s:mean\n"));
    assert_eq!(text.lines().count(), 2);

    let script = sb.path().join("env.sh");
    sb.ok(&["envscript", "pipeline:hello-bench", "--output", script.to_str().unwrap()]);
    assert!(fs::read_to_string(script).unwrap().contains("export CK_ENV_COMPILER_C="));
}

#[test]
fn add_validates_and_copies_payload() {
    let sb = Sandbox::with_fixtures();
    let payload = sb.path().join("payload");
    fs::create_dir_all(payload.join("sub")).unwrap();
    fs::write(payload.join("sub/data.txt"), "42\n").unwrap();
    let meta = sb.write("meta.json", r#"{"description":"numbers"}"#);
    let v = sb.ok(&[
        "add",
        "dataset:numbers",
        "--meta",
        meta.to_str().unwrap(),
        "--payload",
        payload.to_str().unwrap(),
        "--tag",
        "small",
        "unit=none",
    ]);
    let path = Path::new(v["added"]["path"].as_str().unwrap());
    assert_eq!(fs::read_to_string(path.join("sub/data.txt")).unwrap(), "42\n");
    let shown = sb.ok(&["show", "dataset:numbers"]);
    assert_eq!(shown["meta"], json!({"description": "numbers", "unit": "none"}));

    let bad = sb.write("bad.json", r#"{"pipeline":{"program":"program:hello-bench","run":{"command":"x","repetitions":0}}}"#);
    let (code, v) = sb.json(&["add", "pipeline:broken", "--meta", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["code"], "invalid_definition");
    let (_, found) = sb.json(&["find", "pipeline:broken"]);
    assert_eq!(found["matches"], json!([]));
}

#[test]
fn fixture_documents_are_canonical() {
    fn walk(dir: &Path, count: &mut usize) {
        for item in fs::read_dir(dir).unwrap() {
            let path = item.unwrap().path();
            if path.is_dir() {
                walk(&path, count);
            } else if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path).unwrap();
                let v: Value = serde_json::from_str(&text).unwrap();
                assert_eq!(text, ckp_core::canonical::to_string(&v) + "\n", "{}", path.display());
                *count += 1;
            }
        }
    }
    let mut count = 0;
    walk(Path::new(FIXTURE_REPO), &mut count);
    assert!(count >= 8, "only {count} documents");
}
