use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{load_record, persist, ExperimentError, ExperimentRecord, Status};
use crate::env::Version;
use crate::pipeline::Statistic;
use crate::store::{ComponentEntry, EntryRef, Store};

pub const VALIDATION_KEY: &str = "validation";
pub const VALIDATION_TAG: &str = "validation";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleCheck {
    Relative(f64),
    Absolute(f64),
    Exact,
}

/// How one performance metric is compared. Textual form:
/// `relative:<f>`, `absolute:<v>` or `exact`, optionally followed by
/// `@<statistic>` (default `mean`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ToleranceRule {
    pub check: RuleCheck,
    pub statistic: Statistic,
}

impl ToleranceRule {
    pub fn relative(f: f64) -> Self {
        ToleranceRule {
            check: RuleCheck::Relative(f),
            statistic: Statistic::Mean,
        }
    }

    pub fn absolute(v: f64) -> Self {
        ToleranceRule {
            check: RuleCheck::Absolute(v),
            statistic: Statistic::Mean,
        }
    }

    pub fn exact() -> Self {
        ToleranceRule {
            check: RuleCheck::Exact,
            statistic: Statistic::Mean,
        }
    }

    pub fn with_statistic(self, statistic: Statistic) -> Self {
        ToleranceRule { statistic, ..self }
    }

    pub fn passes(&self, reference: f64, replay: f64) -> bool {
        match self.check {
            RuleCheck::Relative(f) => relative_difference(reference, replay).abs() <= f,
            RuleCheck::Absolute(a) => (replay - reference).abs() <= a,
            RuleCheck::Exact => reference == replay,
        }
    }
}

impl fmt::Display for ToleranceRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.check {
            RuleCheck::Relative(x) => write!(f, "relative:{x}")?,
            RuleCheck::Absolute(x) => write!(f, "absolute:{x}")?,
            RuleCheck::Exact => f.write_str("exact")?,
        }
        write!(f, "@{}", self.statistic)
    }
}

impl FromStr for ToleranceRule {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, ExperimentError> {
        let bad = |m: &str| ExperimentError::InvalidTolerance(format!("{s:?}: {m}"));
        let (check, stat) = match s.split_once('@') {
            Some((c, st)) => (c, Statistic::parse(st).ok_or_else(|| bad("unknown statistic"))?),
            None => (s, Statistic::Mean),
        };
        let amount = |v: &str| -> Result<f64, ExperimentError> {
            let x: f64 = v.parse().map_err(|_| bad("not a number"))?;
            if !(x.is_finite() && x >= 0.0) {
                return Err(bad("must be a finite value >= 0"));
            }
            Ok(x)
        };
        let check = match check.split_once(':') {
            Some(("relative", v)) => RuleCheck::Relative(amount(v)?),
            Some(("absolute", v)) => RuleCheck::Absolute(amount(v)?),
            None if check == "exact" => RuleCheck::Exact,
            _ => return Err(bad("expected relative:<f>, absolute:<v> or exact")),
        };
        Ok(ToleranceRule { check, statistic: stat })
    }
}

impl TryFrom<String> for ToleranceRule {
    type Error = ExperimentError;
    fn try_from(s: String) -> Result<Self, ExperimentError> {
        s.parse()
    }
}

impl From<ToleranceRule> for String {
    fn from(r: ToleranceRule) -> String {
        r.to_string()
    }
}

/// Per-metric rules for performance keys; functional keys are always exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSpec {
    #[serde(default)]
    pub rules: BTreeMap<String, ToleranceRule>,
    #[serde(default = "default_rule")]
    pub default: ToleranceRule,
}

fn default_rule() -> ToleranceRule {
    ToleranceRule::relative(0.10)
}

impl Default for ToleranceSpec {
    fn default() -> Self {
        ToleranceSpec {
            rules: BTreeMap::new(),
            default: default_rule(),
        }
    }
}

impl ToleranceSpec {
    pub fn rule_for(&self, metric: &str) -> ToleranceRule {
        self.rules.get(metric).copied().unwrap_or(self.default)
    }
}

/// `(replay - reference) / max(|reference|, |replay|)`, 0 when both are 0.
/// Swapping the arguments flips the sign and keeps the magnitude.
pub fn relative_difference(reference: f64, replay: f64) -> f64 {
    let scale = reference.abs().max(replay.abs());
    if scale == 0.0 {
        0.0
    } else {
        (replay - reference) / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Badge {
    ArtifactsFunctional,
    ResultsReplicated,
    ResultsDivergent,
}

impl Badge {
    pub fn as_str(self) -> &'static str {
        match self {
            Badge::ArtifactsFunctional => "artifacts-functional",
            Badge::ResultsReplicated => "results-replicated",
            Badge::ResultsDivergent => "results-divergent",
        }
    }
}

impl fmt::Display for Badge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricClass {
    Functional,
    Performance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub class: MetricClass,
    pub reference: Option<Value>,
    pub replay: Option<Value>,
    pub rule: String,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyChange {
    pub role: String,
    pub soft_name: String,
    pub reference: Option<Version>,
    pub replay: Option<Version>,
}

impl fmt::Display for DependencyChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<Version>| v.as_ref().map_or("unresolved".to_owned(), |v| v.to_string());
        write!(
            f,
            "{} ({}) {} -> {}",
            self.role,
            self.soft_name,
            show(&self.reference),
            show(&self.replay)
        )
    }
}

/// Dependency version and platform differences between two records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvDiff {
    pub dependencies: Vec<DependencyChange>,
    pub platform: Vec<String>,
}

impl EnvDiff {
    pub fn between(reference: &ExperimentRecord, replay: &ExperimentRecord) -> EnvDiff {
        let roles: BTreeSet<&String> = reference
            .resolved_deps
            .keys()
            .chain(replay.resolved_deps.keys())
            .collect();
        let mut dependencies = Vec::new();
        for role in roles {
            let a = reference.resolved_deps.get(role);
            let b = replay.resolved_deps.get(role);
            let va = a.map(|d| d.version.clone());
            let vb = b.map(|d| d.version.clone());
            if va != vb {
                dependencies.push(DependencyChange {
                    role: role.clone(),
                    soft_name: a.or(b).map(|d| d.soft_name.clone()).unwrap_or_default(),
                    reference: va,
                    replay: vb,
                });
            }
        }
        EnvDiff {
            dependencies,
            platform: reference.platform.diff(&replay.platform),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.dependencies.is_empty() && self.platform.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub reference_id: String,
    pub replay_id: String,
    pub replay_status: Status,
    pub rows: Vec<MetricRow>,
    pub env_diff: EnvDiff,
    pub tolerances: ToleranceSpec,
    pub badge: Badge,
}

/// Compares two records. The reference must have succeeded and the two must
/// declare at least one common metric key.
pub fn build_report(
    reference_id: &str,
    reference: &ExperimentRecord,
    replay_id: &str,
    replay: &ExperimentRecord,
    tol: &ToleranceSpec,
) -> Result<ValidationReport, ExperimentError> {
    if reference.status != Status::Success {
        return Err(ExperimentError::IncomparableExperiments(format!(
            "reference {reference_id} did not run to success"
        )));
    }
    let keys = |r: &ExperimentRecord| -> BTreeSet<String> {
        r.functional_keys.iter().chain(&r.performance_keys).cloned().collect()
    };
    if keys(reference).is_disjoint(&keys(replay)) {
        return Err(ExperimentError::IncomparableExperiments(format!(
            "{reference_id} and {replay_id} share no metric keys"
        )));
    }

    let mut rows = Vec::new();
    let functional: BTreeSet<&String> = reference.functional_keys.iter().chain(&replay.functional_keys).collect();
    for key in functional {
        let a = reference.functional.get(key);
        let b = replay.functional.get(key);
        rows.push(MetricRow {
            metric: key.clone(),
            class: MetricClass::Functional,
            reference: a.map(|v| serde_json::to_value(v).expect("metric serializes")),
            replay: b.map(|v| serde_json::to_value(v).expect("metric serializes")),
            rule: "exact".to_owned(),
            pass: a.is_some() && a == b,
            relative_difference: None,
        });
    }
    let performance: BTreeSet<&String> = reference
        .performance_keys
        .iter()
        .chain(&replay.performance_keys)
        .filter(|k| !reference.functional_keys.contains(k) && !replay.functional_keys.contains(k))
        .collect();
    for key in performance {
        let rule = tol.rule_for(key);
        let a = reference.aggregated.get(key).map(|s| s.get(rule.statistic));
        let b = replay.aggregated.get(key).map(|s| s.get(rule.statistic));
        let (pass, rel) = match (a, b) {
            (Some(a), Some(b)) => (rule.passes(a, b), Some(relative_difference(a, b))),
            _ => (false, None),
        };
        rows.push(MetricRow {
            metric: key.clone(),
            class: MetricClass::Performance,
            reference: a.map(Value::from),
            replay: b.map(Value::from),
            rule: rule.to_string(),
            pass,
            relative_difference: rel,
        });
    }

    let functional_mismatch = rows.iter().any(|r| r.class == MetricClass::Functional && !r.pass);
    let badge = if replay.status == Status::Failed || functional_mismatch {
        Badge::ResultsDivergent
    } else if rows.iter().all(|r| r.pass) {
        Badge::ResultsReplicated
    } else {
        Badge::ArtifactsFunctional
    };
    Ok(ValidationReport {
        reference_id: reference_id.to_owned(),
        replay_id: replay_id.to_owned(),
        replay_status: replay.status,
        rows,
        env_diff: EnvDiff::between(reference, replay),
        tolerances: tol.clone(),
        badge,
    })
}

/// Compares two stored records and persists the report.
pub fn compare(
    store: &Store,
    reference: &EntryRef,
    replay: &EntryRef,
    tol: &ToleranceSpec,
) -> Result<(ComponentEntry, ValidationReport), ExperimentError> {
    let (ref_entry, ref_rec) = load_record(store, reference)?;
    let (rep_entry, rep_rec) = load_record(store, replay)?;
    let report = build_report(ref_entry.uid(), &ref_rec, rep_entry.uid(), &rep_rec, tol)?;
    let body = serde_json::to_value(&report).expect("report serializes");
    let entry = persist(store, &[VALIDATION_TAG], VALIDATION_KEY, body)?;
    Ok((entry, report))
}
