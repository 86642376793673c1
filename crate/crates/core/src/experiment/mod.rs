//! Experiment records, replay, validation and archival checks.
//!
//! Every document written here is an `experiment` entry whose meta holds one
//! body under a type key (`record`, `validation`, `exploration`, `frontier`)
//! plus `content_hash`, the SHA-256 of the canonical encoding of the meta
//! without that field.

mod archival;
mod compare;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::env::{PlatformFingerprint, Version};
use crate::pipeline::{
    execute, ExecContext, ExecutionFailure, MetricMap, MetricValue, PipelineDefinition,
    PipelineError, PipelineState, Stats,
};
use crate::store::{read_meta_bytes, ComponentEntry, EntryRef, ModuleKind, Store, StoreError};

pub use archival::{check_archival, manifest_hash, ArchivalCheck, ArchivalManifest, ArchivalReport};
pub use compare::{
    build_report, compare, relative_difference, Badge, DependencyChange, EnvDiff, MetricClass, MetricRow,
    RuleCheck, ToleranceRule, ToleranceSpec, ValidationReport, VALIDATION_KEY, VALIDATION_TAG,
};

pub const HASH_KEY: &str = "content_hash";
pub const RECORD_KEY: &str = "record";
pub const RUN_TAG: &str = "run";
pub const POINT_TAG: &str = "exploration-point";
pub const REPLAY_TAG: &str = "replay";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("missing component {0}")]
    MissingComponent(String),
    #[error("{0} is not an experiment record")]
    NotARecord(String),
    #[error("experiments cannot be compared: {0}")]
    IncomparableExperiments(String),
    #[error("invalid tolerance: {0}")]
    InvalidTolerance(String),
    #[error("invalid archival manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ExperimentError {
    pub fn code(&self) -> &'static str {
        match self {
            ExperimentError::MissingComponent(_) => "missing_component",
            ExperimentError::NotARecord(_) => "not_a_record",
            ExperimentError::IncomparableExperiments(_) => "incomparable_experiments",
            ExperimentError::InvalidTolerance(_) => "invalid_tolerance",
            ExperimentError::InvalidManifest(_) => "invalid_manifest",
            ExperimentError::Pipeline(e) => e.code(),
            ExperimentError::Store(e) => e.code(),
        }
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedDep {
    pub soft_name: String,
    pub version: Version,
    pub install_path: std::path::PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    /// Uid reference of the pipeline entry.
    pub pipeline_ref: EntryRef,
    pub resolved_deps: BTreeMap<String, ResolvedDep>,
    pub effective_choices: BTreeMap<String, String>,
    pub platform: PlatformFingerprint,
    pub per_repetition: Vec<MetricMap>,
    pub aggregated: BTreeMap<String, Stats>,
    pub functional: BTreeMap<String, MetricValue>,
    pub functional_keys: Vec<String>,
    pub performance_keys: Vec<String>,
    pub status: Status,
    pub started_at: u64,
    pub finished_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RecordedError>,
    pub commands: Vec<String>,
    pub log: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Meta document `{key: body, content_hash}`.
pub fn sealed_meta(key: &str, body: Value) -> Value {
    let mut meta = json!({ key: body });
    let hash = canonical::content_hash(&meta);
    meta[HASH_KEY] = Value::String(hash);
    meta
}

/// Writes a sealed document as a new experiment entry in the primary repository.
pub fn persist(store: &Store, tags: &[&str], key: &str, body: Value) -> Result<ComponentEntry> {
    let tags: BTreeSet<String> = tags.iter().map(|t| t.to_string()).collect();
    let meta = sealed_meta(key, body);
    Ok(store.add_entry(&store.primary().name, ModuleKind::Experiment, None, &tags, meta)?)
}

/// Where a record came from, beyond the execution itself.
#[derive(Debug, Clone)]
pub struct RecordContext<'a> {
    pub pipeline: &'a ComponentEntry,
    pub started_at: u64,
    pub exploration_id: Option<String>,
    pub replay_of: Option<String>,
}

impl<'a> RecordContext<'a> {
    pub fn new(pipeline: &'a ComponentEntry) -> Self {
        RecordContext {
            pipeline,
            started_at: unix_now(),
            exploration_id: None,
            replay_of: None,
        }
    }
}

/// Builds the record for an execution outcome without persisting it.
pub fn build_record(
    outcome: &std::result::Result<PipelineState, ExecutionFailure>,
    def: &PipelineDefinition,
    rc: &RecordContext<'_>,
) -> ExperimentRecord {
    let (state, error) = match outcome {
        Ok(s) => (s, None),
        Err(f) => (
            &f.state,
            Some(RecordedError {
                code: f.error.code().to_owned(),
                message: f.error.to_string(),
            }),
        ),
    };
    let failed = error.is_some();
    ExperimentRecord {
        pipeline_ref: rc.pipeline.uid_ref(),
        resolved_deps: state
            .resolved_deps
            .iter()
            .map(|(role, env)| {
                let dep = ResolvedDep {
                    soft_name: env.soft_name.clone(),
                    version: env.version.clone(),
                    install_path: env.install_path.clone(),
                };
                (role.clone(), dep)
            })
            .collect(),
        effective_choices: state.effective_choices.clone(),
        platform: PlatformFingerprint::current(),
        per_repetition: state.per_repetition.clone(),
        aggregated: if failed { BTreeMap::new() } else { state.aggregated.clone() },
        functional: if failed { BTreeMap::new() } else { state.functional.clone() },
        functional_keys: def.run.functional_keys.clone(),
        performance_keys: def.performance_keys(),
        status: if failed { Status::Failed } else { Status::Success },
        started_at: rc.started_at,
        finished_at: unix_now(),
        exploration_id: rc.exploration_id.clone(),
        seed: state.effective_choices.get("seed").and_then(|s| s.parse().ok()),
        replay_of: rc.replay_of.clone(),
        error,
        commands: state.commands.clone(),
        log: state.log.clone(),
    }
}

/// Persists the record of an execution, successful or not.
pub fn record(
    store: &Store,
    outcome: &std::result::Result<PipelineState, ExecutionFailure>,
    def: &PipelineDefinition,
    rc: &RecordContext<'_>,
) -> Result<(ComponentEntry, ExperimentRecord)> {
    let rec = build_record(outcome, def, rc);
    let mut tags = vec![RUN_TAG];
    if rec.exploration_id.is_some() {
        tags.push(POINT_TAG);
    }
    if rec.replay_of.is_some() {
        tags.push(REPLAY_TAG);
    }
    let body = serde_json::to_value(&rec).expect("record serializes");
    let entry = persist(store, &tags, RECORD_KEY, body)?;
    Ok((entry, rec))
}

/// Executes the pipeline stored in `pipeline` and records the outcome.
/// Invalid definitions and unknown overrides fail without a record.
pub fn run_and_record(
    ctx: &ExecContext<'_>,
    pipeline: &ComponentEntry,
    overrides: &BTreeMap<String, String>,
    exploration_id: Option<String>,
) -> Result<(ComponentEntry, ExperimentRecord)> {
    let def = PipelineDefinition::from_entry(pipeline)?;
    PipelineState::with_choices(&def, overrides)?;
    let rc = RecordContext {
        exploration_id,
        ..RecordContext::new(pipeline)
    };
    let outcome = execute(ctx, &def, overrides);
    record(ctx.store, &outcome, &def, &rc)
}

/// Parses the record of an experiment entry.
pub fn record_of(entry: &ComponentEntry) -> Result<ExperimentRecord> {
    let not_record = || ExperimentError::NotARecord(entry.uid_ref().to_string());
    if entry.kind != ModuleKind::Experiment {
        return Err(not_record());
    }
    let body = entry.meta.get(RECORD_KEY).ok_or_else(not_record)?;
    serde_json::from_value(body.clone()).map_err(|_| not_record())
}

pub fn load_record(store: &Store, r: &EntryRef) -> Result<(ComponentEntry, ExperimentRecord)> {
    let entry = store.get(r)?;
    let rec = record_of(&entry)?;
    Ok((entry, rec))
}

/// Outcome of re-hashing a stored experiment document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub ok: bool,
    pub stored_hash: Option<String>,
    pub computed_hash: String,
    pub detail: String,
}

/// Re-reads the meta bytes of `entry` and checks them against the stored hash.
/// The bytes must also still be in canonical form.
pub fn verify_integrity(entry: &ComponentEntry) -> Result<IntegrityReport> {
    let bytes = read_meta_bytes(entry)?;
    let parsed: Value = match serde_json::from_slice(&bytes) {
        Ok(v) => v,
        Err(e) => {
            return Ok(IntegrityReport {
                ok: false,
                stored_hash: None,
                computed_hash: canonical::sha256_hex(&bytes),
                detail: format!("meta is not valid JSON: {e}"),
            })
        }
    };
    let stored = parsed.get(HASH_KEY).and_then(Value::as_str).map(str::to_owned);
    let mut body = parsed.clone();
    if let Some(obj) = body.as_object_mut() {
        obj.remove(HASH_KEY);
    }
    let computed = canonical::content_hash(&body);
    let canonical_bytes = canonical::to_file_bytes(&parsed) == bytes;
    let (ok, detail) = match &stored {
        None => (false, "no content hash stored".to_owned()),
        Some(s) if *s != computed => (false, "content hash mismatch".to_owned()),
        Some(_) if !canonical_bytes => (false, "meta bytes are not canonical".to_owned()),
        Some(_) => (true, "ok".to_owned()),
    };
    Ok(IntegrityReport {
        ok,
        stored_hash: stored,
        computed_hash: computed,
        detail,
    })
}

/// A replay record plus how its environment differs from the reference.
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub entry: ComponentEntry,
    pub record: ExperimentRecord,
    pub reference: ExperimentRecord,
    pub diff: EnvDiff,
}

/// Re-executes a recorded experiment with its recorded choices and freshly
/// resolved dependencies. Execution failures produce a failed record.
pub fn replay(ctx: &ExecContext<'_>, experiment: &EntryRef) -> Result<ReplayOutcome> {
    let (ref_entry, reference) = load_record(ctx.store, experiment)?;
    let missing = |r: &EntryRef| match ctx.store.get(r) {
        Err(StoreError::NotFound(n)) => Err(ExperimentError::MissingComponent(n)),
        other => other.map_err(ExperimentError::from),
    };
    let pipeline = missing(&reference.pipeline_ref)?;
    let def = PipelineDefinition::from_entry(&pipeline)?;
    missing(&def.program)?;

    let mut fresh = ctx.clone();
    fresh.refresh_detection = true;
    let rc = RecordContext {
        replay_of: Some(ref_entry.uid().to_owned()),
        ..RecordContext::new(&pipeline)
    };
    let outcome = match PipelineState::with_choices(&def, &reference.effective_choices) {
        Ok(_) => execute(&fresh, &def, &reference.effective_choices),
        // a choice was removed from the pipeline since recording
        Err(error) => Err(ExecutionFailure {
            error,
            state: PipelineState::default(),
        }),
    };
    let (entry, rec) = record(ctx.store, &outcome, &def, &rc)?;
    let diff = EnvDiff::between(&reference, &rec);
    Ok(ReplayOutcome {
        entry,
        record: rec,
        reference,
        diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::DetectOptions;
    use std::fs;

    pub(crate) struct Bench {
        pub _dir: tempfile::TempDir,
        pub store: Store,
        pub scratch: std::path::PathBuf,
    }

    /// A store with `program:w` (running `work.sh`) and `pipeline:p`.
    pub(crate) fn bench(script: &str, pipeline: Value) -> (Bench, ComponentEntry) {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::single(dir.path().join("repo")).unwrap();
        let p = store
            .add_entry("local", ModuleKind::Program, Some("w"), &BTreeSet::new(), json!({}))
            .unwrap();
        fs::write(p.data_path.join("work.sh"), script).unwrap();
        let pl = store
            .add_entry("local", ModuleKind::Pipeline, Some("p"), &BTreeSet::new(), json!({ "pipeline": pipeline }))
            .unwrap();
        let scratch = dir.path().join("scratch");
        (Bench { _dir: dir, store, scratch }, pl)
    }

    pub(crate) fn ctx(b: &Bench) -> ExecContext<'_> {
        ExecContext {
            scratch_root: b.scratch.clone(),
            detect: DetectOptions::isolated(),
            ..ExecContext::new(&b.store)
        }
    }

    const DET: &str = "echo '{\"checksum\":\"c0ffee\",\"ops\":10}'\n";

    fn det_pipeline() -> Value {
        json!({"program": "program:w",
            "run": {"command": "sh work.sh ${choice:n}", "functional_keys": ["checksum", "ops"]},
            "choices": {"n": 1, "seed": 42}})
    }

    #[test]
    fn record_success_findable_and_sealed() {
        let (b, pl) = bench(DET, det_pipeline());
        let (entry, rec) = run_and_record(&ctx(&b), &pl, &BTreeMap::new(), None).unwrap();
        assert_eq!(rec.status, Status::Success);
        assert_eq!(rec.per_repetition.len(), 3);
        assert_eq!(rec.seed, Some(42));
        assert!(rec.aggregated.contains_key("wall_time_s"));
        assert_eq!(rec.functional["ops"], MetricValue::Number(10.into()));
        let found = b
            .store
            .find_entries(&crate::store::Query::kind(ModuleKind::Experiment))
            .unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(record_of(&found[0]).unwrap(), rec);
        assert!(verify_integrity(&entry).unwrap().ok);
    }

    #[test]
    fn record_failure_has_no_aggregates() {
        let (b, pl) = bench("exit 3\n", det_pipeline());
        let (_, rec) = run_and_record(&ctx(&b), &pl, &BTreeMap::new(), None).unwrap();
        assert_eq!(rec.status, Status::Failed);
        assert!(rec.aggregated.is_empty());
        assert_eq!(rec.error.unwrap().code, "run_failed");
    }

    #[test]
    fn unknown_override_is_not_recorded() {
        let (b, pl) = bench(DET, det_pipeline());
        let o = BTreeMap::from([("bogus".to_string(), "1".to_string())]);
        let err = run_and_record(&ctx(&b), &pl, &o, None).unwrap_err();
        assert_eq!(err.code(), "unknown_choice");
        assert!(b
            .store
            .find_entries(&crate::store::Query::kind(ModuleKind::Experiment))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn records_are_immutable() {
        let (b, pl) = bench(DET, det_pipeline());
        let (entry, _) = run_and_record(&ctx(&b), &pl, &BTreeMap::new(), None).unwrap();
        let err = b.store.update_meta(&entry, json!({})).unwrap_err();
        assert!(matches!(err, StoreError::Immutable(_)));
    }

    #[test]
    fn tampering_detected() {
        let (b, pl) = bench(DET, det_pipeline());
        let (entry, _) = run_and_record(&ctx(&b), &pl, &BTreeMap::new(), None).unwrap();
        let path = entry.data_path.join(crate::store::META_FILE);
        let mut bytes = fs::read(&path).unwrap();
        // flip a byte inside the checksum value so the JSON stays valid
        let pos = bytes.windows(6).position(|w| w == b"c0ffee").unwrap();
        bytes[pos] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        let report = verify_integrity(&entry).unwrap();
        assert!(!report.ok);
        assert_eq!(report.detail, "content hash mismatch");
        // a flip that breaks the JSON is caught too
        bytes[0] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(!verify_integrity(&entry).unwrap().ok);
    }

    #[test]
    fn hash_stable_across_loads() {
        let (b, pl) = bench(DET, det_pipeline());
        let (entry, _) = run_and_record(&ctx(&b), &pl, &BTreeMap::new(), None).unwrap();
        let again = b.store.reload(&entry).unwrap();
        assert_eq!(
            canonical::to_file_bytes(&again.meta),
            read_meta_bytes(&entry).unwrap()
        );
        assert_eq!(verify_integrity(&again).unwrap(), verify_integrity(&entry).unwrap());
    }

    #[test]
    fn replay_reproduces_functional_metrics() {
        let (b, pl) = bench(DET, det_pipeline());
        let c = ctx(&b);
        let o = BTreeMap::from([("n".to_string(), "7".to_string())]);
        let (entry, rec) = run_and_record(&c, &pl, &o, None).unwrap();
        let out = replay(&c, &entry.uid_ref()).unwrap();
        assert_eq!(out.record.functional, rec.functional);
        assert_eq!(out.record.effective_choices["n"], "7");
        assert_eq!(out.record.replay_of.as_deref(), Some(entry.uid()));
        assert!(out.diff.dependencies.is_empty());
        assert!(out.diff.platform.is_empty());
    }

    #[test]
    fn replay_without_program() {
        let (b, pl) = bench(DET, det_pipeline());
        let c = ctx(&b);
        let (entry, _) = run_and_record(&c, &pl, &BTreeMap::new(), None).unwrap();
        let prog = b.store.get(&"program:w".parse().unwrap()).unwrap();
        b.store.remove_entry(&prog).unwrap();
        let err = replay(&c, &entry.uid_ref()).unwrap_err();
        assert!(matches!(err, ExperimentError::MissingComponent(_)), "{err:?}");
    }

    #[test]
    fn failing_replay_is_recorded() {
        let (b, pl) = bench(DET, det_pipeline());
        let c = ctx(&b);
        let (entry, _) = run_and_record(&c, &pl, &BTreeMap::new(), None).unwrap();
        let prog = b.store.get(&"program:w".parse().unwrap()).unwrap();
        fs::write(prog.data_path.join("work.sh"), "exit 9\n").unwrap();
        let out = replay(&c, &entry.uid_ref()).unwrap();
        assert_eq!(out.record.status, Status::Failed);
        assert!(b.store.get(&out.entry.uid_ref()).is_ok());
    }
}
