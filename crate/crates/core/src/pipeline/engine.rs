use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::debug;
use walkdir::WalkDir;

use super::template::{render, Bindings};
use super::{
    MetricMap, MetricValue, MetricsSource, PipelineDefinition, PipelineError, PipelineState, Stage,
    Stats, WALL_TIME_KEY,
};
use crate::env::{emit_env_script, resolve_in_store, DetectOptions};
use crate::process::run_shell_in;
use crate::store::{Store, StoreError, Uid, ENTRY_FILE, META_FILE};

/// Overrides the scratch root (default: `<tmp>/ckp-scratch`).
pub const SCRATCH_ENV: &str = "CKP_SCRATCH";
const ENV_SCRIPT: &str = ".ckp-env.sh";

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Everything an execution needs besides the definition.
#[derive(Debug, Clone)]
pub struct ExecContext<'a> {
    pub store: &'a Store,
    pub scratch_root: PathBuf,
    pub detect: DetectOptions,
    pub search_roots: Vec<PathBuf>,
    /// Re-run detection even when cached envs exist.
    pub refresh_detection: bool,
    pub keep_scratch: bool,
}

impl<'a> ExecContext<'a> {
    pub fn new(store: &'a Store) -> Self {
        let scratch_root = std::env::var_os(SCRATCH_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("ckp-scratch"));
        ExecContext {
            store,
            scratch_root,
            detect: DetectOptions::default(),
            search_roots: Vec::new(),
            refresh_detection: false,
            keep_scratch: false,
        }
    }
}

/// An error together with the state reached before it.
#[derive(Debug)]
pub struct ExecutionFailure {
    pub error: PipelineError,
    pub state: PipelineState,
}

impl std::fmt::Display for ExecutionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for ExecutionFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl PipelineState {
    /// Defaults merged with `overrides`; overriding an undeclared choice fails.
    pub fn with_choices(def: &PipelineDefinition, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut choices = def.choices.clone();
        for (k, v) in overrides {
            if !choices.contains_key(k) {
                return Err(PipelineError::UnknownChoice(k.clone()));
            }
            choices.insert(k.clone(), v.clone());
        }
        Ok(PipelineState {
            effective_choices: choices,
            ..Default::default()
        })
    }

    fn bindings(&self) -> Bindings<'_> {
        Bindings {
            deps: self
                .resolved_deps
                .iter()
                .map(|(role, env)| (role.as_str(), env.install_path.display().to_string()))
                .collect(),
            choices: &self.effective_choices,
            artifacts: self
                .artifacts
                .iter()
                .map(|(name, p)| (name.as_str(), p.display().to_string()))
                .collect(),
        }
    }
}

/// Resolves every declared dependency through the detection cache.
pub fn resolve(ctx: &ExecContext<'_>, def: &PipelineDefinition, state: &mut PipelineState) -> Result<()> {
    for dep in &def.dependencies {
        let env = resolve_in_store(
            ctx.store,
            &dep.soft_name,
            &dep.constraint,
            ctx.refresh_detection,
            &ctx.search_roots,
            &ctx.detect,
        )
        .map_err(|source| PipelineError::UnresolvedDependency {
            role: dep.role.clone(),
            source,
        })?;
        state.log.push(format!(
            "{}: {} {} at {}",
            dep.role,
            env.soft_name,
            env.version,
            env.install_path.display()
        ));
        state.resolved_deps.insert(dep.role.clone(), env);
    }
    state.stage = Stage::Resolved;
    Ok(())
}

fn copy_payload(from: &Path, to: &Path) -> Result<()> {
    for entry in WalkDir::new(from).min_depth(1) {
        let entry = entry.map_err(|e| PipelineError::Io {
            path: from.to_owned(),
            source: e.into(),
        })?;
        let rel = entry.path().strip_prefix(from).expect("walkdir yields children");
        if entry.depth() == 1 && (rel == Path::new(META_FILE) || rel == Path::new(ENTRY_FILE)) {
            continue;
        }
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).map_err(io_err(&dest))?;
        } else {
            fs::copy(entry.path(), &dest).map_err(io_err(&dest))?;
            let mut perms = fs::metadata(&dest).map_err(io_err(&dest))?.permissions();
            #[allow(clippy::permissions_set_readonly_false)]
            perms.set_readonly(false);
            fs::set_permissions(&dest, perms).map_err(io_err(&dest))?;
        }
    }
    Ok(())
}

/// Creates the scratch directory on first use: program payload copy plus the
/// environment script of the resolved dependencies.
fn ensure_scratch(ctx: &ExecContext<'_>, def: &PipelineDefinition, state: &mut PipelineState) -> Result<PathBuf> {
    if let Some(dir) = &state.scratch_dir {
        return Ok(dir.clone());
    }
    let program = ctx.store.get(&def.program).map_err(|e| match e {
        StoreError::NotFound(r) => PipelineError::MissingComponent(r),
        other => other.into(),
    })?;
    let dir = ctx.scratch_root.join(format!("run-{}", Uid::generate()));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    copy_payload(&program.data_path, &dir)?;
    let envs: Vec<_> = state.resolved_deps.values().cloned().collect();
    let script = emit_env_script(&envs)?;
    fs::write(dir.join(ENV_SCRIPT), script).map_err(io_err(&dir))?;
    debug!("scratch directory {}", dir.display());
    state.scratch_dir = Some(dir.clone());
    Ok(dir)
}

/// Runs the compile command, if any, and records the produced artifact.
pub fn compile(ctx: &ExecContext<'_>, def: &PipelineDefinition, state: &mut PipelineState) -> Result<()> {
    let Some(spec) = &def.compile else {
        state.stage = Stage::Compiled;
        return Ok(());
    };
    let dir = ensure_scratch(ctx, def, state)?;
    let b = state.bindings();
    let cmd = render(&spec.command, &b).map_err(PipelineError::InvalidDefinition)?;
    let artifact_name = render(&spec.artifact, &b).map_err(PipelineError::InvalidDefinition)?;
    drop(b);
    state.commands.push(cmd.clone());
    let out = run_shell_in(&cmd, &dir, Some(&dir.join(ENV_SCRIPT)), None).map_err(io_err(&dir))?;
    if !out.success() {
        return Err(PipelineError::CompileFailed {
            exit: out.describe_exit(),
            output: out.combined_output(),
        });
    }
    let artifact = dir.join(&artifact_name);
    if !artifact.exists() {
        return Err(PipelineError::ArtifactMissing(artifact));
    }
    state.log.push(format!("compiled: {cmd}"));
    state.artifacts.insert(artifact_name, artifact);
    state.stage = Stage::Compiled;
    Ok(())
}

fn parse_metrics(text: &str, repetition: usize) -> Result<MetricMap> {
    let fail = |message: String| PipelineError::MetricsParseError { repetition, message };
    let obj: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(text.trim()).map_err(|e| fail(format!("{e} in {:?}", text.trim())))?;
    obj.into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::Number(n) => Ok((k, MetricValue::Number(n))),
            serde_json::Value::String(s) => Ok((k, MetricValue::Text(s))),
            other => Err(fail(format!("metric {k:?} must be a number or string, got {other}"))),
        })
        .collect()
}

/// Runs the workload `repetitions` times, sequentially, collecting metrics.
pub fn run(ctx: &ExecContext<'_>, def: &PipelineDefinition, state: &mut PipelineState) -> Result<()> {
    let dir = ensure_scratch(ctx, def, state)?;
    let cmd = render(&def.run.command, &state.bindings()).map_err(PipelineError::InvalidDefinition)?;
    state.commands.push(cmd.clone());
    let timeout = def.run.timeout_s.map(Duration::from_secs_f64);
    let env_script = dir.join(ENV_SCRIPT);
    let perf_keys = def.performance_keys();
    for i in 0..def.run.warmup {
        // unmeasured; a failing workload fails again in the first repetition
        let out = run_shell_in(&cmd, &dir, Some(&env_script), timeout).map_err(io_err(&dir))?;
        debug!("warm-up {} of {cmd:?}: {}", i + 1, out.describe_exit());
    }
    for repetition in 0..def.run.repetitions as usize {
        if let MetricsSource::File(name) = &def.run.metrics {
            let _ = fs::remove_file(dir.join(name));
        }
        let out = run_shell_in(&cmd, &dir, Some(&env_script), timeout).map_err(io_err(&dir))?;
        if !out.success() {
            return Err(PipelineError::RunFailed {
                repetition,
                exit: out.describe_exit(),
                output: out.combined_output(),
            });
        }
        let text = match &def.run.metrics {
            MetricsSource::Stdout => out
                .stdout
                .lines()
                .rev()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("")
                .to_owned(),
            MetricsSource::File(name) => fs::read_to_string(dir.join(name)).map_err(|e| {
                PipelineError::MetricsParseError {
                    repetition,
                    message: format!("{name}: {e}"),
                }
            })?,
        };
        let mut metrics = parse_metrics(&text, repetition)?;
        for key in def.run.functional_keys.iter().chain(&def.run.performance_keys) {
            if !metrics.contains_key(key) && key != WALL_TIME_KEY {
                return Err(PipelineError::MetricsParseError {
                    repetition,
                    message: format!("metric {key:?} missing"),
                });
            }
        }
        let wall = MetricValue::from_f64(out.elapsed.as_secs_f64()).expect("elapsed time is finite");
        metrics.insert(WALL_TIME_KEY.to_owned(), wall);
        for key in &perf_keys {
            if metrics[key].as_f64().is_none() {
                return Err(PipelineError::MetricsParseError {
                    repetition,
                    message: format!("performance metric {key:?} is not a number"),
                });
            }
        }
        state.per_repetition.push(metrics);
    }
    state.stage = Stage::Ran;
    Ok(())
}

/// Summarizes performance keys and checks functional keys are constant.
pub fn aggregate(def: &PipelineDefinition, state: &mut PipelineState) -> Result<()> {
    for key in &def.run.functional_keys {
        let mut distinct: Vec<&MetricValue> = Vec::new();
        for rep in &state.per_repetition {
            let v = &rep[key];
            if !distinct.contains(&v) {
                distinct.push(v);
            }
        }
        if distinct.len() > 1 {
            return Err(PipelineError::NonDeterministicFunctionalOutput {
                key: key.clone(),
                values: distinct.iter().map(|v| v.to_string()).collect(),
            });
        }
        if let Some(v) = distinct.first() {
            state.functional.insert(key.clone(), (*v).clone());
        }
    }
    for key in def.performance_keys() {
        let samples: Vec<f64> = state
            .per_repetition
            .iter()
            .filter_map(|rep| rep.get(&key).and_then(MetricValue::as_f64))
            .collect();
        if let Some(stats) = Stats::from_samples(&samples) {
            state.aggregated.insert(key, stats);
        }
    }
    state.stage = Stage::Aggregated;
    Ok(())
}

/// resolve, compile, run, aggregate. On failure the partial state is returned
/// with the error; its scratch directory is kept for inspection.
#[allow(clippy::result_large_err)]
pub fn execute(
    ctx: &ExecContext<'_>,
    def: &PipelineDefinition,
    overrides: &BTreeMap<String, String>,
) -> std::result::Result<PipelineState, ExecutionFailure> {
    let mut state = match def.validate().and_then(|_| PipelineState::with_choices(def, overrides)) {
        Ok(s) => s,
        Err(error) => {
            return Err(ExecutionFailure {
                error,
                state: PipelineState::default(),
            })
        }
    };
    let outcome = resolve(ctx, def, &mut state)
        .and_then(|_| compile(ctx, def, &mut state))
        .and_then(|_| run(ctx, def, &mut state))
        .and_then(|_| aggregate(def, &mut state));
    match outcome {
        Ok(()) => {
            if !ctx.keep_scratch {
                if let Some(dir) = &state.scratch_dir {
                    let _ = fs::remove_dir_all(dir);
                }
            }
            Ok(state)
        }
        Err(error) => Err(ExecutionFailure { error, state }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ModuleKind;
    use serde_json::json;
    use std::collections::BTreeSet;

    struct Fixture {
        _dir: tempfile::TempDir,
        store: Store,
        scratch: PathBuf,
    }

    fn fixture(script: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::single(dir.path().join("repo")).unwrap();
        let p = store
            .add_entry("local", ModuleKind::Program, Some("w"), &BTreeSet::new(), json!({}))
            .unwrap();
        fs::write(p.data_path.join("work.sh"), script).unwrap();
        let scratch = dir.path().join("scratch");
        Fixture { _dir: dir, store, scratch }
    }

    fn ctx(f: &Fixture) -> ExecContext<'_> {
        ExecContext {
            scratch_root: f.scratch.clone(),
            detect: DetectOptions::isolated(),
            ..ExecContext::new(&f.store)
        }
    }

    fn def(v: serde_json::Value) -> PipelineDefinition {
        let d: PipelineDefinition = serde_json::from_value(v).unwrap();
        d.validate().unwrap();
        d
    }

    #[test]
    fn three_repetitions_with_metrics() {
        let f = fixture("echo noise\necho '{\"ops\":1000,\"checksum\":\"ab12\"}'\n");
        let d = def(json!({"program": "program:w",
            "run": {"command": "sh work.sh", "functional_keys": ["checksum", "ops"]}}));
        let s = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap();
        assert_eq!(s.per_repetition.len(), 3);
        for rep in &s.per_repetition {
            assert_eq!(rep.keys().collect::<Vec<_>>(), ["checksum", "ops", "wall_time_s"]);
        }
        assert_eq!(s.functional["checksum"], MetricValue::Text("ab12".into()));
        assert_eq!(s.aggregated[WALL_TIME_KEY].count, 3);
        assert!(!s.scratch_dir.as_ref().unwrap().exists());
    }

    #[test]
    fn single_repetition_has_zero_std() {
        let f = fixture("echo '{\"t\":0.5}'\n");
        let d = def(json!({"program": "program:w",
            "run": {"command": "sh work.sh", "repetitions": 1, "performance_keys": ["t"]}}));
        let s = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap();
        assert!(s.aggregated.values().all(|st| st.std == 0.0));
        assert_eq!(s.aggregated["t"].mean, 0.5);
    }

    #[test]
    fn warmup_runs_are_not_measured() {
        let f = fixture("n=$(cat c 2>/dev/null || echo 0); n=$((n+1)); echo $n > c; echo \"{\\\"n\\\":$n}\"\n");
        let d = def(json!({"program": "program:w",
            "run": {"command": "sh work.sh", "warmup": 2, "performance_keys": ["n"]}}));
        let s = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap();
        let seen: Vec<f64> = s.per_repetition.iter().map(|r| r["n"].as_f64().unwrap()).collect();
        assert_eq!(seen, [3.0, 4.0, 5.0]);
    }

    #[test]
    fn non_json_final_line() {
        let f = fixture("echo '{\"a\":1}'\necho done\n");
        let d = def(json!({"program": "program:w", "run": {"command": "sh work.sh"}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err.error, PipelineError::MetricsParseError { repetition: 0, .. }));
        assert!(err.state.per_repetition.is_empty());
    }

    #[test]
    fn nested_metrics_rejected() {
        let f = fixture("echo '{\"a\":{\"b\":1}}'\n");
        let d = def(json!({"program": "program:w", "run": {"command": "sh work.sh"}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err.error, PipelineError::MetricsParseError { .. }));
    }

    #[test]
    fn metrics_from_file() {
        let f = fixture("echo '{\"score\":7}' > out.json\n");
        let d = def(json!({"program": "program:w",
            "run": {"command": "sh work.sh", "metrics": {"file": "out.json"}, "performance_keys": ["score"]}}));
        let s = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap();
        assert_eq!(s.aggregated["score"].mean, 7.0);
    }

    #[test]
    fn varying_functional_output() {
        // a counter file in scratch makes each repetition print a different checksum
        let f = fixture("n=$(cat c 2>/dev/null || echo 0); echo $((n+1)) > c; echo \"{\\\"checksum\\\":\\\"v$n\\\"}\"\n");
        let d = def(json!({"program": "program:w",
            "run": {"command": "sh work.sh", "functional_keys": ["checksum"]}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        match err.error {
            PipelineError::NonDeterministicFunctionalOutput { key, values } => {
                assert_eq!(key, "checksum");
                assert_eq!(values, ["v0", "v1", "v2"]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn run_failure_reports_repetition_and_keeps_state() {
        let f = fixture("test \"$1\" -gt 0 || exit 4\necho '{}'\n");
        let d = def(json!({"program": "program:w",
            "run": {"command": "sh work.sh ${choice:iterations}"}, "choices": {"iterations": "5"}}));
        let ok = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap();
        assert_eq!(ok.effective_choices["iterations"], "5");
        let overrides = BTreeMap::from([("iterations".to_string(), "0".to_string())]);
        let err = execute(&ctx(&f), &d, &overrides).unwrap_err();
        assert!(matches!(err.error, PipelineError::RunFailed { repetition: 0, .. }));
        assert_eq!(err.state.stage, Stage::Compiled);
        assert!(err.state.aggregated.is_empty());
        assert!(err.state.scratch_dir.as_ref().unwrap().exists());
    }

    #[test]
    fn unknown_override_rejected() {
        let f = fixture("echo '{}'\n");
        let d = def(json!({"program": "program:w", "run": {"command": "sh work.sh"}}));
        let overrides = BTreeMap::from([("nope".to_string(), "1".to_string())]);
        let err = execute(&ctx(&f), &d, &overrides).unwrap_err();
        assert!(matches!(err.error, PipelineError::UnknownChoice(_)));
    }

    #[test]
    fn compile_absent_is_noop() {
        let f = fixture("echo '{}'\n");
        let d = def(json!({"program": "program:w", "run": {"command": "sh work.sh"}}));
        let c = ctx(&f);
        let mut s = PipelineState::default();
        resolve(&c, &d, &mut s).unwrap();
        compile(&c, &d, &mut s).unwrap();
        assert_eq!(s.stage, Stage::Compiled);
        assert!(s.scratch_dir.is_none());
        assert!(s.commands.is_empty());
    }

    #[test]
    fn compile_missing_artifact() {
        let f = fixture("echo '{}'\n");
        let d = def(json!({"program": "program:w",
            "compile": {"command": "true", "artifact": "bin"},
            "run": {"command": "${artifact:bin}"}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err.error, PipelineError::ArtifactMissing(_)));
    }

    #[test]
    fn compile_failure_captures_output() {
        let f = fixture("");
        let d = def(json!({"program": "program:w",
            "compile": {"command": "echo broken >&2; exit 1", "artifact": "bin"},
            "run": {"command": "true"}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        match err.error {
            PipelineError::CompileFailed { output, .. } => assert!(output.contains("broken")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn program_payload_untouched() {
        let f = fixture("echo x > made.txt; echo '{}'\n");
        let d = def(json!({"program": "program:w", "run": {"command": "sh work.sh", "repetitions": 1}}));
        execute(&ctx(&f), &d, &BTreeMap::new()).unwrap();
        let p = f.store.get(&"program:w".parse().unwrap()).unwrap();
        assert!(!p.data_path.join("made.txt").exists());
    }

    #[test]
    fn missing_program() {
        let f = fixture("");
        let d = def(json!({"program": "program:gone", "run": {"command": "true"}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err.error, PipelineError::MissingComponent(_)));
    }

    #[test]
    fn unresolved_dependency_carries_role() {
        let f = fixture("");
        let d = def(json!({"program": "program:w",
            "dependencies": [{"soft_name": "icc", "role": "compiler", "constraint": {"exact": "99.0"}}],
            "run": {"command": "${dep:compiler}"}}));
        let err = execute(&ctx(&f), &d, &BTreeMap::new()).unwrap_err();
        match err.error {
            PipelineError::UnresolvedDependency { role, .. } => assert_eq!(role, "compiler"),
            other => panic!("{other:?}"),
        }
        assert_eq!(err.state.stage, Stage::Created);
        assert!(err.state.per_repetition.is_empty());
    }

    #[test]
    fn zero_dependencies_resolve_empty() {
        let f = fixture("");
        let d = def(json!({"program": "program:w", "run": {"command": "true"}}));
        let mut s = PipelineState::default();
        resolve(&ctx(&f), &d, &mut s).unwrap();
        assert!(s.resolved_deps.is_empty());
        assert_eq!(s.stage, Stage::Resolved);
    }
}
