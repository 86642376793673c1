//! CSV tables, plot series and validation report text.
//!
//! Table column selectors:
//!
//! | selector          | cell                                         |
//! |-------------------|----------------------------------------------|
//! | `uid`             | experiment uid                               |
//! | `status`          | `success` or `failed`                        |
//! | `pipeline`        | pipeline reference                           |
//! | `exploration`     | exploration id, if any                       |
//! | `choice:<key>`    | effective choice value                       |
//! | `<metric>:value`  | functional metric value                      |
//! | `<metric>:<stat>` | aggregate statistic (`min`, `mean`, ...)     |
//!
//! Missing values render as empty cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autotune::{exploration_records, load_exploration, AutotuneError, Point};
use crate::experiment::{record_of, ExperimentError, ExperimentRecord, Status, ValidationReport};
use crate::pipeline::{MetricValue, Statistic};
use crate::store::{ComponentEntry, EntryRef, ModuleKind, Query, Store, StoreError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown column selector {0:?}")]
    InvalidColumn(String),
    #[error("{0:?} is not a tuning dimension of the exploration")]
    InvalidAxis(String),
    #[error("{0} is not a validation report")]
    NotAReport(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Autotune(#[from] AutotuneError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        match self {
            ReportError::InvalidColumn(_) => "invalid_column",
            ReportError::InvalidAxis(_) => "invalid_axis",
            ReportError::NotAReport(_) => "not_a_report",
            ReportError::Csv(_) => "csv_error",
            ReportError::Autotune(e) => e.code(),
            ReportError::Experiment(e) => e.code(),
            ReportError::Store(e) => e.code(),
        }
    }
}

type Result<T, E = ReportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Uid,
    Status,
    Pipeline,
    Exploration,
    Choice(String),
    Functional(String),
    Aggregate(String, Statistic),
}

impl Column {
    pub fn parse(s: &str) -> Result<Column> {
        let bad = || ReportError::InvalidColumn(s.to_owned());
        Ok(match s {
            "uid" => Column::Uid,
            "status" => Column::Status,
            "pipeline" => Column::Pipeline,
            "exploration" => Column::Exploration,
            _ => match s.split_once(':') {
                Some(("choice", k)) if !k.is_empty() => Column::Choice(k.to_owned()),
                Some((m, "value")) if !m.is_empty() => Column::Functional(m.to_owned()),
                Some((m, st)) if !m.is_empty() => Column::Aggregate(m.to_owned(), Statistic::parse(st).ok_or_else(bad)?),
                _ => return Err(bad()),
            },
        })
    }

    fn cell(&self, uid: &str, r: &ExperimentRecord) -> String {
        match self {
            Column::Uid => uid.to_owned(),
            Column::Status => status_str(r.status).to_owned(),
            Column::Pipeline => r.pipeline_ref.to_string(),
            Column::Exploration => r.exploration_id.clone().unwrap_or_default(),
            Column::Choice(k) => r.effective_choices.get(k).cloned().unwrap_or_default(),
            Column::Functional(m) => r.functional.get(m).map(MetricValue::to_string).unwrap_or_default(),
            Column::Aggregate(m, st) => r
                .aggregated
                .get(m)
                .map(|s| match st {
                    Statistic::Count => s.count.to_string(),
                    _ => s.get(*st).to_string(),
                })
                .unwrap_or_default(),
        }
    }
}

fn status_str(s: Status) -> &'static str {
    match s {
        Status::Success => "success",
        Status::Failed => "failed",
    }
}

/// Which records go into a table.
#[derive(Debug, Clone, Default)]
pub struct RecordFilter {
    pub tags: Vec<String>,
    pub exploration: Option<String>,
    pub pipeline: Option<EntryRef>,
    pub status: Option<Status>,
}

/// Experiment records matching `filter`, ordered by uid.
pub fn select_records(store: &Store, filter: &RecordFilter) -> Result<Vec<(ComponentEntry, ExperimentRecord)>> {
    let mut q = Query::kind(ModuleKind::Experiment);
    for t in &filter.tags {
        q = q.tag(t);
    }
    let pipeline_uid = match &filter.pipeline {
        Some(r) => Some(store.get(r)?.uid_ref()),
        None => None,
    };
    let mut out = Vec::new();
    for e in store.find_entries(&q)? {
        let Ok(rec) = record_of(&e) else { continue };
        if filter.exploration.as_ref().is_some_and(|x| rec.exploration_id.as_ref() != Some(x))
            || pipeline_uid.as_ref().is_some_and(|p| &rec.pipeline_ref != p)
            || filter.status.is_some_and(|s| rec.status != s)
        {
            continue;
        }
        out.push((e, rec));
    }
    out.sort_by(|a, b| a.0.uid().cmp(b.0.uid()));
    Ok(out)
}

/// CSV with a header row and one row per matching record, LF line endings.
pub fn export_table(store: &Store, filter: &RecordFilter, columns: &[String]) -> Result<String> {
    let cols = columns.iter().map(|c| Column::parse(c)).collect::<Result<Vec<_>>>()?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(columns)?;
    for (entry, rec) in select_records(store, filter)? {
        w.write_record(cols.iter().map(|c| c.cell(entry.uid(), &rec)))?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 cells is UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub metric: String,
    pub statistic: Statistic,
    pub pipeline_ref: EntryRef,
    pub exploration_id: String,
    pub x_key: String,
    /// Values of the other dimensions, constant along the series.
    pub fixed: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub label: String,
    pub x: Vec<String>,
    pub y: Vec<f64>,
    /// Standard deviation of the metric at each point.
    pub y_err: Option<Vec<f64>>,
    pub metadata: SeriesMeta,
}

/// One series per combination of the non-`x` dimensions. Points follow the
/// declared value order of `x`; failed points are left out.
pub fn export_plot_series(store: &Store, exploration: &EntryRef, x: &str, y: &str) -> Result<Vec<PlotSeries>> {
    let (entry, header) = load_exploration(store, exploration)?;
    let dims = &header.space.dimensions;
    let x_dim = dims
        .iter()
        .find(|d| d.choice_key == x)
        .ok_or_else(|| ReportError::InvalidAxis(x.to_owned()))?;
    let (metric, stat) = match Column::parse(y) {
        Ok(Column::Aggregate(m, s)) => (m, s),
        _ => return Err(ReportError::InvalidColumn(y.to_owned())),
    };
    let position = |key: &str, value: &str| {
        dims.iter()
            .find(|d| d.choice_key == key)
            .and_then(|d| d.values.iter().position(|v| v == value))
            .unwrap_or(usize::MAX)
    };

    // group key: declared positions of the other dimensions' values
    // (position of x, x, y, y_err)
    type Samples = Vec<(usize, String, f64, f64)>;
    let mut groups: BTreeMap<Vec<usize>, (Point, Samples)> = BTreeMap::new();
    for (_, rec) in exploration_records(store, entry.uid())? {
        if rec.status != Status::Success {
            continue;
        }
        let stats = rec
            .aggregated
            .get(&metric)
            .ok_or_else(|| ReportError::InvalidColumn(y.to_owned()))?;
        let fixed: Point = rec
            .effective_choices
            .iter()
            .filter(|(k, _)| *k != x && dims.iter().any(|d| &d.choice_key == *k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let key: Vec<usize> = dims
            .iter()
            .filter(|d| d.choice_key != x)
            .map(|d| fixed.get(&d.choice_key).map_or(usize::MAX, |v| position(&d.choice_key, v)))
            .collect();
        let xv = rec.effective_choices.get(x).cloned().unwrap_or_default();
        let group = groups.entry(key).or_insert_with(|| (fixed, Vec::new()));
        group.1.push((position(x, &xv), xv, stats.get(stat), stats.std));
    }

    Ok(groups
        .into_values()
        .map(|(fixed, mut pts)| {
            pts.sort_by_key(|p| p.0);
            let label = if fixed.is_empty() {
                y.to_owned()
            } else {
                dims.iter()
                    .filter_map(|d| fixed.get(&d.choice_key).map(|v| format!("{}={v}", d.choice_key)))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            PlotSeries {
                label,
                x: pts.iter().map(|p| p.1.clone()).collect(),
                y: pts.iter().map(|p| p.2).collect(),
                y_err: Some(pts.iter().map(|p| p.3).collect()),
                metadata: SeriesMeta {
                    metric: metric.clone(),
                    statistic: stat,
                    pipeline_ref: header.pipeline_ref.clone(),
                    exploration_id: entry.uid().to_owned(),
                    x_key: x_dim.choice_key.clone(),
                    fixed,
                },
            }
        })
        .collect())
}

pub fn load_validation(store: &Store, r: &EntryRef) -> Result<ValidationReport> {
    let entry = store.get(r)?;
    let body = entry
        .meta
        .get(crate::experiment::VALIDATION_KEY)
        .filter(|_| entry.kind == ModuleKind::Experiment)
        .ok_or_else(|| ReportError::NotAReport(r.to_string()))?;
    serde_json::from_value(body.clone()).map_err(|_| ReportError::NotAReport(r.to_string()))
}

fn show_value(v: &Option<serde_json::Value>) -> String {
    match v {
        None => "-".to_owned(),
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

/// Fixed-layout text rendering of a validation report:
///
/// ```text
/// VALIDATION REPORT
/// reference: <uid>
/// replay:    <uid> (<status>)
/// BADGE: <badge>
///
/// METRIC  CLASS  RULE  REFERENCE  REPLAY  REL.DIFF  RESULT
/// ...one row per metric...
///
/// ENVIRONMENT
/// CHANGED: <role> (<soft>) <old> -> <new>
/// PLATFORM: <field> <old> -> <new>
/// ```
///
/// When nothing changed the environment section reads `unchanged`.
pub fn render_validation_report(report: &ValidationReport) -> String {
    let mut rows: Vec<[String; 7]> = vec![[
        "METRIC".into(),
        "CLASS".into(),
        "RULE".into(),
        "REFERENCE".into(),
        "REPLAY".into(),
        "REL.DIFF".into(),
        "RESULT".into(),
    ]];
    for r in &report.rows {
        rows.push([
            r.metric.clone(),
            format!("{:?}", r.class).to_lowercase(),
            r.rule.clone(),
            show_value(&r.reference),
            show_value(&r.replay),
            r.relative_difference.map_or("-".to_owned(), |d| format!("{d:+.4}")),
            if r.pass { "PASS" } else { "FAIL" }.to_owned(),
        ]);
    }
    let mut widths = [0usize; 7];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }

    let mut out = String::new();
    out.push_str("VALIDATION REPORT\n");
    let _ = writeln!(out, "reference: {}", report.reference_id);
    let _ = writeln!(out, "replay:    {} ({})", report.replay_id, status_str(report.replay_status));
    let _ = writeln!(out, "BADGE: {}", report.badge);
    out.push('\n');
    for row in &rows {
        let mut line = String::new();
        for (i, (cell, w)) in row.iter().zip(widths).enumerate() {
            if i + 1 == row.len() {
                line.push_str(cell);
            } else {
                let _ = write!(line, "{cell:<w$}  ");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out.push_str("\nENVIRONMENT\n");
    if report.env_diff.is_empty() {
        out.push_str("unchanged\n");
    }
    for c in &report.env_diff.dependencies {
        let _ = writeln!(out, "CHANGED: {c}");
    }
    for p in &report.env_diff.platform {
        let _ = writeln!(out, "PLATFORM: {p}");
    }
    out
}
