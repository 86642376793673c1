use std::collections::BTreeSet;

use serde_json::{json, Value};

use super::Sandbox;

pub const VERBS: [&str; 16] = [
    "add",
    "find",
    "rm",
    "show",
    "detect",
    "resolve",
    "envscript",
    "install",
    "run",
    "explore",
    "replay",
    "compare",
    "check-archival",
    "table",
    "plot-data",
    "report",
];

#[derive(Debug)]
pub struct Case {
    pub args: Vec<String>,
    pub expect_ok: bool,
    pub exit: i32,
    pub problem: Option<String>,
}

impl Case {
    pub fn verb(&self) -> &str {
        &self.args[0]
    }
}

/// Runs one `--json` invocation and checks the output contract without
/// panicking, so a whole matrix can be reported at once.
fn check(sb: &Sandbox, args: &[String], expect_ok: bool) -> (Case, Value) {
    let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
    full.push("--json");
    let out = sb.ckp(&full);
    let mut problem = None;
    let parsed: Option<Value> = serde_json::from_str(out.stdout.trim_end()).ok();
    let v = match parsed {
        Some(v @ Value::Object(_)) if out.stdout.trim_end().lines().count() == 1 => v,
        _ => {
            problem = Some(format!("stdout is not exactly one JSON object: {:?}", out.stdout));
            Value::Null
        }
    };
    if problem.is_none() {
        let has_error = v.get("error").is_some();
        if (out.code == 0) == has_error {
            problem = Some(format!("exit {} with error member = {has_error}", out.code));
        } else if has_error {
            let e = &v["error"];
            if !e["code"].is_string() || !e["message"].is_string() {
                problem = Some(format!("error object lacks code/message: {e}"));
            }
        }
        if problem.is_none() && expect_ok != (out.code == 0) {
            problem = Some(format!("expected {}, got exit {}: {v}", if expect_ok { "success" } else { "failure" }, out.code));
        }
        if problem.is_none() && !expect_ok && ![1, 2].contains(&out.code) {
            problem = Some(format!("failure exit code {} is neither 1 nor 2", out.code));
        }
    }
    let case = Case {
        args: args.to_vec(),
        expect_ok,
        exit: out.code,
        problem,
    };
    (case, v)
}

fn strings(args: &[&str]) -> Vec<String> {
    args.iter().map(|s| s.to_string()).collect()
}

/// Exercises every verb on the fixture repository, once succeeding and at
/// least once failing. Later steps use ids produced by earlier ones.
pub fn run_matrix(sb: &Sandbox) -> Vec<Case> {
    let mut cases = Vec::new();
    let mut go = |args: Vec<String>, ok: bool| -> Value {
        let (case, v) = check(sb, &args, ok);
        cases.push(case);
        v
    };
    let s = |a: &[&str]| strings(a);

    go(s(&["add", "program:scratchpad", "owner=me", "--tag", "tmp"]), true);
    go(s(&["add", "program:hello-bench"]), false);
    go(s(&["add", "program:x", "--meta", "missing.json"]), false);
    go(s(&["find", "program:*"]), true);
    go(s(&["find", "program", "tag=tmp"]), true);
    go(s(&["find", "program", "colour=red"]), false);
    go(s(&["show", "pipeline:hello-bench"]), true);
    go(s(&["show", "pipeline:0123456789abcdef"]), false);
    go(s(&["rm", "program:scratchpad"]), true);
    go(s(&["rm", "program:scratchpad"]), false);

    go(s(&["detect", "soft:compiler.c"]), true);
    go(s(&["detect", "soft:fortran"]), false);
    go(s(&["resolve", "soft:compiler.c", "min=1.0"]), true);
    go(s(&["resolve", "soft:compiler.c", "min=999"]), false);
    go(s(&["resolve", "soft:compiler.c", "min=2", "exact=3"]), false);
    go(s(&["envscript", "pipeline:hello-bench"]), true);
    go(s(&["envscript", "soft:compiler.c", "exact=0.0.1"]), false);

    let prefix = sb.path().join("prefix-tinytool");
    go(strings(&["install", "package:tinytool", &format!("prefix={}", prefix.display())]), true);
    go(s(&["install", "package:nothing-here"]), false);
    go(s(&["install", "pipeline:hello-bench"]), false);

    let run = go(s(&["run", "pipeline:hello-bench", "iterations=2000000"]), true);
    let reference = run["experiment"].as_str().unwrap_or("0000000000000000").to_owned();
    go(s(&["run", "pipeline:hello-bench", "iterations=0"]), false);
    go(s(&["run", "pipeline:hello-bench", "colour=red"]), false);

    let ex = go(s(&["explore", "pipeline:hello-bench", "--seed", "3", "--sample-count", "2"]), true);
    let exploration = ex["exploration"].as_str().unwrap_or("0000000000000000").to_owned();
    go(s(&["explore", "pipeline:hello-bench", "--strategy", "sideways"]), false);
    go(s(&["explore", "pipeline:hello-bench", "--parallel"]), false);

    let rp = go(strings(&["replay", &format!("experiment:{reference}")]), true);
    let replay = rp["experiment"].as_str().unwrap_or("0000000000000000").to_owned();
    go(strings(&["replay", &format!("experiment:{exploration}")]), false);

    let cmp = go(
        strings(&["compare", &format!("experiment:{reference}"), &format!("replay={replay}"), "tol.wall_time_s=relative:0.5"]),
        true,
    );
    let validation = cmp["report"].as_str().unwrap_or("0000000000000000").to_owned();
    go(strings(&["compare", &format!("experiment:{reference}"), &format!("replay={replay}"), "tol=sloppy"]), false);
    go(strings(&["compare", &format!("experiment:{reference}")]), false);

    let manifest = json!({
        "components": [format!("experiment:{reference}"), "pipeline:hello-bench", "program:hello-bench"],
        "archive": "doi:10.5281/zenodo.1234567",
    });
    let good = sb.write("manifest.json", &manifest.to_string());
    go(strings(&["check-archival", &format!("manifest={}", good.display())]), true);
    go(s(&["check-archival", "manifest=no-such-manifest.json"]), false);
    go(s(&["check-archival"]), false);

    go(s(&["table", "experiment", "columns=uid,status,choice:opt,checksum:value,wall_time_s:mean"]), true);
    go(s(&["table", "experiment", "columns=nonsense::"]), false);
    go(strings(&["plot-data", &format!("experiment:{exploration}"), "x=iterations", "y=mops:mean"]), true);
    go(strings(&["plot-data", &format!("experiment:{reference}"), "x=iterations"]), false);
    go(strings(&["report", &format!("experiment:{validation}")]), true);
    go(strings(&["report", &format!("experiment:{reference}")]), false);

    go(s(&["frobnicate", "thing"]), false);
    go(s(&["run", "widget:hello-bench"]), false);
    cases
}

/// Verbs lacking a passing success case or a passing failure case.
pub fn coverage_gaps(cases: &[Case]) -> Vec<String> {
    let mut gaps = Vec::new();
    for verb in VERBS {
        for ok in [true, false] {
            let covered = cases.iter().any(|c| c.verb() == verb && c.expect_ok == ok && c.problem.is_none());
            if !covered {
                gaps.push(format!("{verb} ({})", if ok { "success" } else { "error" }));
            }
        }
    }
    let seen: BTreeSet<&str> = cases.iter().map(Case::verb).collect();
    for verb in VERBS {
        if !seen.contains(verb) {
            gaps.push(format!("{verb} never invoked"));
        }
    }
    gaps
}
