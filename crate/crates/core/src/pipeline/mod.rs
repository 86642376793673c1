//! Compile/run/measure pipelines.
//!
//! A definition lives under the `pipeline` key of a `pipeline` entry. It names
//! a `program` entry whose payload is copied into a fresh scratch directory per
//! execution; compile and run commands execute there through `/bin/sh`, after
//! sourcing the environment script of the resolved dependencies.
//!
//! Workloads report metrics either as a JSON object on the final stdout line
//! or in a JSON file. Values must be numbers or strings. `wall_time_s` is
//! always added and always aggregated.

mod engine;
mod stats;
pub mod template;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::env::{DetectedEnv, EnvError, VersionConstraint};
use crate::store::{ComponentEntry, EntryRef, StoreError};

pub use engine::{aggregate, compile, execute, resolve, run, ExecContext, ExecutionFailure, SCRATCH_ENV};
pub use stats::{Statistic, Stats};
use template::Placeholder;

pub const WALL_TIME_KEY: &str = "wall_time_s";
pub const DEFAULT_REPETITIONS: u32 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline definition: {0}")]
    InvalidDefinition(String),
    #[error("unknown choice {0:?}")]
    UnknownChoice(String),
    #[error("missing component {0}")]
    MissingComponent(String),
    #[error("dependency role {role:?}: {source}")]
    UnresolvedDependency {
        role: String,
        #[source]
        source: EnvError,
    },
    #[error("compile failed ({exit}):\n{output}")]
    CompileFailed { exit: String, output: String },
    #[error("compile succeeded but artifact {0} is missing")]
    ArtifactMissing(PathBuf),
    #[error("run failed at repetition {repetition} ({exit}):\n{output}")]
    RunFailed {
        repetition: usize,
        exit: String,
        output: String,
    },
    #[error("cannot parse metrics of repetition {repetition}: {message}")]
    MetricsParseError { repetition: usize, message: String },
    #[error("functional metric {key:?} varies across repetitions: {values:?}")]
    NonDeterministicFunctionalOutput { key: String, values: Vec<String> },
    #[error("pipeline I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::InvalidDefinition(_) => "invalid_definition",
            PipelineError::UnknownChoice(_) => "unknown_choice",
            PipelineError::MissingComponent(_) => "missing_component",
            PipelineError::UnresolvedDependency { .. } => "unresolved_dependency",
            PipelineError::CompileFailed { .. } => "compile_failed",
            PipelineError::ArtifactMissing(_) => "artifact_missing",
            PipelineError::RunFailed { .. } => "run_failed",
            PipelineError::MetricsParseError { .. } => "metrics_parse_error",
            PipelineError::NonDeterministicFunctionalOutput { .. } => "nondeterministic_functional_output",
            PipelineError::Io { .. } => "io_error",
            PipelineError::Env(e) => e.code(),
            PipelineError::Store(e) => e.code(),
        }
    }
}

/// A number or a string, as reported by a workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Number(serde_json::Number),
    Text(String),
}

impl MetricValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetricValue::Number(n) => n.as_f64(),
            MetricValue::Text(_) => None,
        }
    }

    pub fn from_f64(v: f64) -> Option<MetricValue> {
        serde_json::Number::from_f64(v).map(MetricValue::Number)
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Number(n) => write!(f, "{n}"),
            MetricValue::Text(s) => f.write_str(s),
        }
    }
}

pub type MetricMap = BTreeMap<String, MetricValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dependency {
    pub soft_name: String,
    pub role: String,
    #[serde(default)]
    pub constraint: VersionConstraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileSpec {
    pub command: String,
    /// File the command must produce in the scratch directory (templated).
    pub artifact: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsSource {
    /// Final stdout line is a JSON object.
    #[default]
    Stdout,
    /// JSON object in this file, relative to the scratch directory.
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub command: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    /// Unmeasured executions before the first repetition.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub warmup: u32,
    #[serde(default)]
    pub metrics: MetricsSource,
    #[serde(default)]
    pub functional_keys: Vec<String>,
    #[serde(default)]
    pub performance_keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn is_zero(n: &u32) -> bool {
    *n == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineDefinition {
    pub program: EntryRef,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compile: Option<CompileSpec>,
    pub run: RunSpec,
    #[serde(default, deserialize_with = "scalar_map")]
    pub choices: BTreeMap<String, String>,
    /// Allows the autotuner to run points in parallel.
    #[serde(default)]
    pub timing_insensitive: bool,
}

/// Accepts numbers and booleans as choice values, stored as strings.
fn scalar_map<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, String>, D::Error> {
    let raw = BTreeMap::<String, serde_json::Value>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => Ok((k, s)),
            serde_json::Value::Number(n) => Ok((k, n.to_string())),
            serde_json::Value::Bool(b) => Ok((k, b.to_string())),
            other => Err(serde::de::Error::custom(format!(
                "choice {k:?} must be a scalar, got {other}"
            ))),
        })
        .collect()
}

impl PipelineDefinition {
    pub fn from_entry(entry: &ComponentEntry) -> Result<Self, PipelineError> {
        let raw = entry.meta.get("pipeline").ok_or_else(|| {
            PipelineError::InvalidDefinition(format!("{} has no `pipeline` key", entry.uid_ref()))
        })?;
        let def: PipelineDefinition = serde_json::from_value(raw.clone())
            .map_err(|e| PipelineError::InvalidDefinition(format!("{}: {e}", entry.uid_ref())))?;
        def.validate()?;
        Ok(def)
    }

    /// Performance keys including the implicit `wall_time_s`.
    pub fn performance_keys(&self) -> Vec<String> {
        let mut keys = self.run.performance_keys.clone();
        if !keys.iter().any(|k| k == WALL_TIME_KEY) {
            keys.push(WALL_TIME_KEY.to_owned());
        }
        keys
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidDefinition(m));
        if self.run.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        let functional: BTreeSet<&String> = self.run.functional_keys.iter().collect();
        if let Some(k) = self.performance_keys().iter().find(|k| functional.contains(k)) {
            return bad(format!("{k:?} is both a functional and a performance key"));
        }
        let mut roles = BTreeSet::new();
        for d in &self.dependencies {
            if !roles.insert(d.role.as_str()) {
                return bad(format!("duplicate dependency role {:?}", d.role));
            }
        }
        let mut templates = vec![("run.command", &self.run.command)];
        if let Some(c) = &self.compile {
            templates.push(("compile.command", &c.command));
            templates.push(("compile.artifact", &c.artifact));
        }
        for (field, t) in templates {
            for p in template::placeholders(t).map_err(PipelineError::InvalidDefinition)? {
                match p {
                    Placeholder::Dep(r) if !roles.contains(r.as_str()) => {
                        return bad(format!("{field}: undeclared dependency role {r:?}"))
                    }
                    Placeholder::Choice(c) if !self.choices.contains_key(&c) => {
                        return bad(format!("{field}: undeclared choice {c:?}"))
                    }
                    Placeholder::Artifact(_) if field != "run.command" || self.compile.is_none() => {
                        return bad(format!("{field}: artifacts are only available to run.command after a compile step"))
                    }
                    _ => {}
                }
            }
        }
        if let Some(t) = self.run.timeout_s {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("timeout_s must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Created,
    Resolved,
    Compiled,
    Ran,
    Aggregated,
}

/// State threaded through the stages of one execution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub stage: Stage,
    pub resolved_deps: BTreeMap<String, DetectedEnv>,
    pub effective_choices: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub per_repetition: Vec<MetricMap>,
    pub aggregated: BTreeMap<String, Stats>,
    /// Value of every functional key (identical across repetitions).
    pub functional: BTreeMap<String, MetricValue>,
    /// Executed command lines, after substitution.
    pub commands: Vec<String>,
    /// Provenance notes (tool versions, paths).
    pub log: Vec<String>,
    pub scratch_dir: Option<PathBuf>,
}
