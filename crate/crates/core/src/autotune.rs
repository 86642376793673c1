//! Design-space exploration over pipeline choices.
//!
//! The tuning configuration lives under the `tuning` key of a pipeline entry:
//!
//! ```json
//! {"dimensions": [{"choice_key": "opt", "values": ["0", "1", "2"]}],
//!  "strategy": "exhaustive",
//!  "objectives": [{"metric": "wall_time_s", "direction": "minimize"}]}
//! ```
//!
//! `strategy` may also be `{"random": {"sample_count": 4, "seed": 7}}`.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::experiment::{
    persist, record_of, run_and_record, unix_now, ExperimentError, ExperimentRecord, Status,
};
use crate::pipeline::{ExecContext, PipelineDefinition, PipelineError, Statistic};
use crate::store::{ComponentEntry, EntryRef, ModuleKind, Query, Store, StoreError};

pub const EXPLORATION_KEY: &str = "exploration";
pub const EXPLORATION_TAG: &str = "exploration";
pub const FRONTIER_KEY: &str = "frontier";
pub const FRONTIER_TAG: &str = "frontier";

/// Largest space sampled by shuffling all indices.
pub const SHUFFLE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum AutotuneError {
    #[error("invalid tuning space: {0}")]
    InvalidSpace(String),
    #[error("invalid objectives: {0}")]
    InvalidObjectives(String),
    #[error("point {index} lacks objective metric {metric:?}")]
    IncomparablePoint { index: usize, metric: String },
    #[error("tuning dimension {0:?} is not a choice of the pipeline")]
    UnknownChoice(String),
    #[error("parallel exploration requires a timing-insensitive pipeline")]
    ParallelNotAllowed,
    #[error("{0} is not an exploration")]
    NotAnExploration(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl AutotuneError {
    pub fn code(&self) -> &'static str {
        match self {
            AutotuneError::InvalidSpace(_) => "invalid_space",
            AutotuneError::InvalidObjectives(_) => "invalid_objectives",
            AutotuneError::IncomparablePoint { .. } => "incomparable_point",
            AutotuneError::UnknownChoice(_) => "unknown_choice",
            AutotuneError::ParallelNotAllowed => "parallel_not_allowed",
            AutotuneError::NotAnExploration(_) => "not_an_exploration",
            AutotuneError::Pipeline(e) => e.code(),
            AutotuneError::Experiment(e) => e.code(),
            AutotuneError::Store(e) => e.code(),
        }
    }
}

type Result<T, E = AutotuneError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningDimension {
    pub choice_key: String,
    #[serde(deserialize_with = "scalar_list")]
    pub values: Vec<String>,
}

fn scalar_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    Vec::<Value>::deserialize(d)?
        .into_iter()
        .map(|v| match v {
            Value::String(s) => Ok(s),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            other => Err(serde::de::Error::custom(format!("dimension value must be a scalar, got {other}"))),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchStrategy {
    #[default]
    Exhaustive,
    Random { sample_count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningSpace {
    pub dimensions: Vec<TuningDimension>,
    #[serde(default)]
    pub strategy: SearchStrategy,
}

pub type Point = BTreeMap<String, String>;

impl TuningSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AutotuneError::InvalidSpace(m));
        if self.dimensions.is_empty() {
            return bad("no dimensions".into());
        }
        let mut keys = BTreeSet::new();
        for d in &self.dimensions {
            if !keys.insert(&d.choice_key) {
                return bad(format!("dimension {:?} declared twice", d.choice_key));
            }
            if d.values.is_empty() {
                return bad(format!("dimension {:?} has no values", d.choice_key));
            }
            let distinct: BTreeSet<&String> = d.values.iter().collect();
            if distinct.len() != d.values.len() {
                return bad(format!("dimension {:?} repeats a value", d.choice_key));
            }
        }
        if let SearchStrategy::Random { sample_count, .. } = self.strategy {
            if sample_count == 0 {
                return bad("sample_count must be at least 1".into());
            }
            if let Some(n) = self.size() {
                if sample_count as u128 > n {
                    return bad(format!("sample_count {sample_count} exceeds the {n} points of the space"));
                }
            }
        }
        Ok(())
    }

    /// Number of points, `None` on overflow.
    pub fn size(&self) -> Option<u128> {
        self.dimensions
            .iter()
            .try_fold(1u128, |acc, d| acc.checked_mul(d.values.len() as u128))
    }

    fn point_from_digits(&self, digits: &[usize]) -> Point {
        self.dimensions
            .iter()
            .zip(digits)
            .map(|(d, &i)| (d.choice_key.clone(), d.values[i].clone()))
            .collect()
    }

    /// Mixed-radix decoding, last dimension varying fastest.
    fn digits_of(&self, mut index: u128) -> Vec<usize> {
        let mut digits = vec![0; self.dimensions.len()];
        for (slot, d) in digits.iter_mut().zip(&self.dimensions).rev() {
            let n = d.values.len() as u128;
            *slot = (index % n) as usize;
            index /= n;
        }
        digits
    }
}

/// Points of the space: the cartesian product in dimension order for
/// exhaustive search, or `sample_count` distinct seeded draws in draw order.
pub fn enumerate_points(space: &TuningSpace) -> Result<Vec<Point>> {
    space.validate()?;
    match space.strategy {
        SearchStrategy::Exhaustive => {
            let n = space
                .size()
                .filter(|n| *n <= usize::MAX as u128)
                .ok_or_else(|| AutotuneError::InvalidSpace("space too large to enumerate".into()))?;
            Ok((0..n).map(|i| space.point_from_digits(&space.digits_of(i))).collect())
        }
        SearchStrategy::Random { sample_count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match space.size() {
                Some(n) if n <= SHUFFLE_LIMIT => {
                    let mut indices: Vec<u128> = (0..n).collect();
                    let (drawn, _) = indices.partial_shuffle(&mut rng, sample_count);
                    Ok(drawn.iter().map(|&i| space.point_from_digits(&space.digits_of(i))).collect())
                }
                _ => {
                    let mut seen = HashSet::new();
                    let mut out = Vec::with_capacity(sample_count);
                    while out.len() < sample_count {
                        let digits: Vec<usize> =
                            space.dimensions.iter().map(|d| rng.gen_range(0..d.values.len())).collect();
                        if seen.insert(digits.clone()) {
                            out.push(space.point_from_digits(&digits));
                        }
                    }
                    Ok(out)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub metric: String,
    pub direction: Direction,
    #[serde(default)]
    pub statistic: Statistic,
}

/// `tuning` section of a pipeline entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningConfig {
    #[serde(flatten)]
    pub space: TuningSpace,
    pub objectives: Vec<Objective>,
}

impl TuningConfig {
    pub fn from_entry(entry: &ComponentEntry) -> Result<Option<Self>> {
        match entry.meta.get("tuning") {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| AutotuneError::InvalidSpace(format!("{}: {e}", entry.uid_ref()))),
        }
    }

    /// Checks the configuration against the pipeline it tunes.
    pub fn validate_for(&self, def: &PipelineDefinition) -> Result<()> {
        self.space.validate()?;
        for d in &self.space.dimensions {
            if !def.choices.contains_key(&d.choice_key) {
                return Err(AutotuneError::UnknownChoice(d.choice_key.clone()));
            }
        }
        if self.objectives.is_empty() {
            return Err(AutotuneError::InvalidObjectives("at least one objective is required".into()));
        }
        let perf = def.performance_keys();
        for o in &self.objectives {
            if !perf.contains(&o.metric) {
                return Err(AutotuneError::InvalidObjectives(format!(
                    "{:?} is not a performance key of the pipeline",
                    o.metric
                )));
            }
        }
        Ok(())
    }
}

/// `a` dominates `b`: no worse on every objective, better on at least one.
/// Values are already normalized so that smaller is better.
fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Indices of the non-dominated points, in input order. Points with equal
/// coordinates are all kept.
pub fn pareto_filter(points: &[BTreeMap<String, f64>], objectives: &[Objective]) -> Result<Vec<usize>> {
    if objectives.is_empty() {
        return Err(AutotuneError::InvalidObjectives("at least one objective is required".into()));
    }
    let mut coords = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let mut c = Vec::with_capacity(objectives.len());
        for o in objectives {
            let v = p
                .get(&o.metric)
                .copied()
                .filter(|v| v.is_finite())
                .ok_or_else(|| AutotuneError::IncomparablePoint {
                    index,
                    metric: o.metric.clone(),
                })?;
            c.push(match o.direction {
                Direction::Minimize => v,
                Direction::Maximize => -v,
            });
        }
        coords.push(c);
    }
    // Any dominator of a point precedes it lexicographically, and dominance
    // is transitive, so comparing against the kept points is enough.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        coords[a]
            .iter()
            .zip(&coords[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept.iter().any(|&k| dominates(&coords[k], &coords[i])) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Objective values of a successful record.
pub fn objective_values(rec: &ExperimentRecord, objectives: &[Objective]) -> BTreeMap<String, f64> {
    objectives
        .iter()
        .filter_map(|o| rec.aggregated.get(&o.metric).map(|s| (o.metric.clone(), s.get(o.statistic))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointOutcome {
    pub index: usize,
    pub choices: Point,
    pub experiment: String,
    pub status: Status,
}

/// Header of an exploration, stored before any point runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationHeader {
    pub pipeline_ref: EntryRef,
    pub space: TuningSpace,
    pub objectives: Vec<Objective>,
    pub points: Vec<Point>,
    pub started_at: u64,
}

/// Result of an exploration, stored once all points ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierDoc {
    pub exploration_id: String,
    pub points: Vec<PointOutcome>,
    /// Experiment uids on the Pareto frontier, in point order.
    pub frontier: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExploreOptions {
    /// Run points concurrently; only allowed for timing-insensitive pipelines.
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct Exploration {
    pub id: String,
    pub header: ExplorationHeader,
    pub result: FrontierDoc,
}

/// Runs one experiment per point and persists the frontier. Failing points
/// are recorded as failed and do not stop the exploration.
pub fn explore(
    ctx: &ExecContext<'_>,
    pipeline: &ComponentEntry,
    config: &TuningConfig,
    opts: ExploreOptions,
) -> Result<Exploration> {
    let def = PipelineDefinition::from_entry(pipeline)?;
    config.validate_for(&def)?;
    if opts.parallel && !def.timing_insensitive {
        return Err(AutotuneError::ParallelNotAllowed);
    }
    let points = enumerate_points(&config.space)?;
    let header = ExplorationHeader {
        pipeline_ref: pipeline.uid_ref(),
        space: config.space.clone(),
        objectives: config.objectives.clone(),
        points: points.clone(),
        started_at: unix_now(),
    };
    let parent = persist(
        ctx.store,
        &[EXPLORATION_TAG],
        EXPLORATION_KEY,
        serde_json::to_value(&header).expect("header serializes"),
    )?;
    let id = parent.uid().to_owned();
    info!("exploration {id}: {} points", points.len());

    let run_point = |index: usize, choices: &Point| -> Result<(PointOutcome, ExperimentRecord)> {
        let (entry, rec) = run_and_record(ctx, pipeline, choices, Some(id.clone()))?;
        match &rec.error {
            Some(e) => warn!("point {index} {choices:?} failed: {}", e.code),
            None => info!("point {index} {choices:?} done"),
        }
        let outcome = PointOutcome {
            index,
            choices: choices.clone(),
            experiment: entry.uid().to_owned(),
            status: rec.status,
        };
        Ok((outcome, rec))
    };
    let run_point = &run_point;
    let results: Vec<(PointOutcome, ExperimentRecord)> = if opts.parallel {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        let mut slots: Vec<Option<Result<(PointOutcome, ExperimentRecord)>>> = Vec::new();
        slots.resize_with(points.len(), || None);
        for chunk in points.iter().enumerate().collect::<Vec<_>>().chunks(workers) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(i, p)| (i, s.spawn(move || run_point(i, p))))
                    .collect();
                for (i, h) in handles {
                    slots[i] = Some(h.join().expect("point thread panicked"));
                }
            });
        }
        slots.into_iter().map(|r| r.expect("every slot filled")).collect::<Result<_>>()?
    } else {
        points.iter().enumerate().map(|(i, p)| run_point(i, p)).collect::<Result<_>>()?
    };

    let ok: Vec<&(PointOutcome, ExperimentRecord)> =
        results.iter().filter(|(_, r)| r.status == Status::Success).collect();
    let coords: Vec<BTreeMap<String, f64>> =
        ok.iter().map(|(_, r)| objective_values(r, &config.objectives)).collect();
    let frontier = pareto_filter(&coords, &config.objectives)?
        .into_iter()
        .map(|i| ok[i].0.experiment.clone())
        .collect();
    let result = FrontierDoc {
        exploration_id: id.clone(),
        points: results.into_iter().map(|(o, _)| o).collect(),
        frontier,
    };
    persist(
        ctx.store,
        &[FRONTIER_TAG],
        FRONTIER_KEY,
        serde_json::to_value(&result).expect("frontier serializes"),
    )?;
    Ok(Exploration { id, header, result })
}

/// Header of a stored exploration.
pub fn load_exploration(store: &Store, r: &EntryRef) -> Result<(ComponentEntry, ExplorationHeader)> {
    let entry = store.get(r)?;
    let not = || AutotuneError::NotAnExploration(r.to_string());
    if entry.kind != ModuleKind::Experiment {
        return Err(not());
    }
    let body = entry.meta.get(EXPLORATION_KEY).ok_or_else(not)?;
    let header = serde_json::from_value(body.clone()).map_err(|_| not())?;
    Ok((entry, header))
}

/// Point records of an exploration, ordered by uid.
pub fn exploration_records(store: &Store, exploration_id: &str) -> Result<Vec<(ComponentEntry, ExperimentRecord)>> {
    let q = Query::kind(ModuleKind::Experiment).tag(crate::experiment::POINT_TAG);
    let mut out = Vec::new();
    for e in store.find_entries(&q)? {
        let rec = record_of(&e)?;
        if rec.exploration_id.as_deref() == Some(exploration_id) {
            out.push((e, rec));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn dim(k: &str, vals: &[&str]) -> TuningDimension {
        TuningDimension {
            choice_key: k.into(),
            values: vals.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn space(strategy: SearchStrategy) -> TuningSpace {
        TuningSpace {
            dimensions: vec![dim("opt", &["O1", "O2", "O3"]), dim("unroll", &["0", "1"])],
            strategy,
        }
    }

    fn p(pairs: &[(&str, &str)]) -> Point {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn exhaustive_order() {
        let pts = enumerate_points(&space(SearchStrategy::Exhaustive)).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], p(&[("opt", "O1"), ("unroll", "0")]));
        assert_eq!(pts[1], p(&[("opt", "O1"), ("unroll", "1")]));
        assert_eq!(pts[5], p(&[("opt", "O3"), ("unroll", "1")]));
    }

    #[test]
    fn random_is_seeded_and_distinct() {
        let s = space(SearchStrategy::Random { sample_count: 4, seed: 7 });
        let a = enumerate_points(&s).unwrap();
        assert_eq!(a, enumerate_points(&s).unwrap());
        assert_eq!(a.len(), 4);
        let distinct: BTreeSet<&Point> = a.iter().collect();
        assert_eq!(distinct.len(), 4);
        let all = enumerate_points(&space(SearchStrategy::Exhaustive)).unwrap();
        assert!(a.iter().all(|x| all.contains(x)));
    }

    #[test]
    fn random_too_many() {
        let s = space(SearchStrategy::Random { sample_count: 7, seed: 1 });
        assert!(matches!(enumerate_points(&s), Err(AutotuneError::InvalidSpace(_))));
    }

    #[test]
    fn single_point() {
        let s = TuningSpace {
            dimensions: vec![dim("x", &["1"])],
            strategy: SearchStrategy::Exhaustive,
        };
        assert_eq!(enumerate_points(&s).unwrap(), vec![p(&[("x", "1")])]);
    }

    #[test]
    fn huge_space_uses_rejection_sampling() {
        let vals: Vec<String> = (0..1000).map(|i| i.to_string()).collect();
        let refs: Vec<&str> = vals.iter().map(String::as_str).collect();
        let s = TuningSpace {
            dimensions: vec![dim("a", &refs), dim("b", &refs), dim("c", &refs)],
            strategy: SearchStrategy::Random { sample_count: 50, seed: 3 },
        };
        let a = enumerate_points(&s).unwrap();
        assert_eq!(a, enumerate_points(&s).unwrap());
        assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), 50);
    }

    #[test]
    fn invalid_dimensions() {
        for s in [
            TuningSpace { dimensions: vec![], strategy: SearchStrategy::Exhaustive },
            TuningSpace { dimensions: vec![dim("a", &[])], strategy: SearchStrategy::Exhaustive },
            TuningSpace { dimensions: vec![dim("a", &["1", "1"])], strategy: SearchStrategy::Exhaustive },
            TuningSpace { dimensions: vec![dim("a", &["1"]), dim("a", &["2"])], strategy: SearchStrategy::Exhaustive },
        ] {
            assert!(s.validate().is_err(), "{s:?}");
        }
    }

    #[test]
    fn config_json() {
        let c: TuningConfig = serde_json::from_value(json!({
            "dimensions": [{"choice_key": "opt", "values": [0, 1, 2]}],
            "strategy": {"random": {"sample_count": 2, "seed": 9}},
            "objectives": [{"metric": "wall_time_s", "direction": "minimize", "statistic": "min"}]
        }))
        .unwrap();
        assert_eq!(c.space.dimensions[0].values, ["0", "1", "2"]);
        assert_eq!(c.space.strategy, SearchStrategy::Random { sample_count: 2, seed: 9 });
        assert_eq!(c.objectives[0].statistic, Statistic::Min);
    }

    fn obj(dirs: &[Direction]) -> Vec<Objective> {
        dirs.iter()
            .enumerate()
            .map(|(i, d)| Objective {
                metric: format!("m{i}"),
                direction: *d,
                statistic: Statistic::Mean,
            })
            .collect()
    }

    fn pts(rows: &[&[f64]]) -> Vec<BTreeMap<String, f64>> {
        rows.iter()
            .map(|r| r.iter().enumerate().map(|(i, v)| (format!("m{i}"), *v)).collect())
            .collect()
    }

    #[test]
    fn two_objective_example() {
        let o = obj(&[Direction::Minimize, Direction::Minimize]);
        let f = pareto_filter(&pts(&[&[1.0, 2.0], &[2.0, 1.0], &[2.0, 2.0]]), &o).unwrap();
        assert_eq!(f, [0, 1]);
    }

    #[test]
    fn identical_points_all_kept() {
        let o = obj(&[Direction::Minimize, Direction::Maximize]);
        let f = pareto_filter(&pts(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]), &o).unwrap();
        assert_eq!(f, [0, 1, 2]);
    }

    #[test]
    fn maximize_flips() {
        let o = obj(&[Direction::Maximize]);
        assert_eq!(pareto_filter(&pts(&[&[1.0], &[3.0], &[2.0]]), &o).unwrap(), [1]);
    }

    #[test]
    fn missing_metric() {
        let o = obj(&[Direction::Minimize, Direction::Minimize]);
        let err = pareto_filter(&pts(&[&[1.0, 2.0], &[2.0]]), &o).unwrap_err();
        assert!(matches!(err, AutotuneError::IncomparablePoint { index: 1, ref metric } if metric == "m1"));
    }

    /// Pairwise check of every point against every other.
    fn brute_force(points: &[Vec<f64>], dirs: &[Direction]) -> Vec<usize> {
        let better_eq = |a: f64, b: f64, d: Direction| match d {
            Direction::Minimize => a <= b,
            Direction::Maximize => a >= b,
        };
        let strictly = |a: f64, b: f64, d: Direction| match d {
            Direction::Minimize => a < b,
            Direction::Maximize => a > b,
        };
        (0..points.len())
            .filter(|&i| {
                !(0..points.len()).any(|j| {
                    (0..dirs.len()).all(|k| better_eq(points[j][k], points[i][k], dirs[k]))
                        && (0..dirs.len()).any(|k| strictly(points[j][k], points[i][k], dirs[k]))
                })
            })
            .collect()
    }

    fn instance() -> impl Strategy<Value = (Vec<Direction>, Vec<Vec<f64>>)> {
        prop::collection::vec(prop_oneof![Just(Direction::Minimize), Just(Direction::Maximize)], 2..=3)
            .prop_flat_map(|dirs| {
                let m = dirs.len();
                // a small value grid forces ties and duplicates
                let row = prop::collection::vec((0u8..8).prop_map(f64::from), m);
                (Just(dirs), prop::collection::vec(row, 0..=50))
            })
    }

    proptest! {
        #[test]
        fn pareto_matches_brute_force((dirs, rows) in instance()) {
            let o = obj(&dirs);
            let maps: Vec<BTreeMap<String, f64>> = rows
                .iter()
                .map(|r| r.iter().enumerate().map(|(i, v)| (format!("m{i}"), *v)).collect())
                .collect();
            prop_assert_eq!(pareto_filter(&maps, &o).unwrap(), brute_force(&rows, &dirs));
        }

        #[test]
        fn random_sampling_deterministic(seed in any::<u64>(), n in 1usize..=6) {
            let s = space(SearchStrategy::Random { sample_count: n, seed });
            let a = enumerate_points(&s).unwrap();
            prop_assert_eq!(a.len(), n);
            prop_assert_eq!(a.iter().collect::<BTreeSet<_>>().len(), n);
            prop_assert_eq!(a, enumerate_points(&s).unwrap());
        }
    }

    mod exploration {
        use super::*;
        use crate::env::DetectOptions;
        use std::fs;

        fn setup(script: &str, tuning: Value, insensitive: bool) -> (tempfile::TempDir, Store, ComponentEntry) {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::single(dir.path().join("repo")).unwrap();
            let prog = store
                .add_entry("local", ModuleKind::Program, Some("w"), &BTreeSet::new(), json!({}))
                .unwrap();
            fs::write(prog.data_path.join("work.sh"), script).unwrap();
            let meta = json!({
                "pipeline": {"program": "program:w",
                    "run": {"command": "sh work.sh ${choice:a} ${choice:b}", "repetitions": 2,
                            "functional_keys": ["sum"], "performance_keys": ["cost"]},
                    "choices": {"a": 1, "b": 1},
                    "timing_insensitive": insensitive},
                "tuning": tuning,
            });
            let pl = store
                .add_entry("local", ModuleKind::Pipeline, Some("p"), &BTreeSet::new(), meta)
                .unwrap();
            (dir, store, pl)
        }

        const SCRIPT: &str = "test \"$2\" != crash || exit 5\necho \"{\\\"sum\\\":$(( $1 + ${2#x} )),\\\"cost\\\":$(( $1 * 10 ))}\"\n";

        fn tuning() -> Value {
            json!({"dimensions": [{"choice_key": "a", "values": [1, 2]},
                                  {"choice_key": "b", "values": ["3", "crash", "4"]}],
                   "objectives": [{"metric": "cost", "direction": "minimize"},
                                  {"metric": "wall_time_s", "direction": "minimize"}]})
        }

        fn run(parallel: bool, insensitive: bool) -> Result<(tempfile::TempDir, Store, Exploration)> {
            let (dir, store, pl) = setup(SCRIPT, tuning(), insensitive);
            let ctx = ExecContext {
                scratch_root: dir.path().join("scratch"),
                detect: DetectOptions::isolated(),
                ..ExecContext::new(&store)
            };
            let cfg = TuningConfig::from_entry(&pl).unwrap().unwrap();
            let ex = explore(&ctx, &pl, &cfg, ExploreOptions { parallel })?;
            drop(ctx);
            Ok((dir, store, ex))
        }

        #[test]
        fn fail_soft_and_frontier_subset() {
            let (_d, store, ex) = run(false, false).unwrap();
            assert_eq!(ex.result.points.len(), 6);
            let failed: Vec<_> = ex.result.points.iter().filter(|p| p.status == Status::Failed).collect();
            assert_eq!(failed.len(), 2);
            assert!(failed.iter().all(|p| p.choices["b"] == "crash"));
            let recs = exploration_records(&store, &ex.id).unwrap();
            assert_eq!(recs.len(), 6);
            let ok_uids: BTreeSet<&str> = recs
                .iter()
                .filter(|(_, r)| r.status == Status::Success)
                .map(|(e, _)| e.uid())
                .collect();
            assert!(!ex.result.frontier.is_empty());
            assert!(ex.result.frontier.iter().all(|u| ok_uids.contains(u.as_str())));
            assert_eq!(ex.result.points.iter().map(|p| p.index).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 5]);
            assert!(load_exploration(&store, &EntryRef::new(ModuleKind::Experiment, ex.id.as_str())).is_ok());
        }

        #[test]
        fn parallel_needs_opt_in() {
            assert!(matches!(run(true, false), Err(AutotuneError::ParallelNotAllowed)));
            let (_d, _s, ex) = run(true, true).unwrap();
            assert_eq!(ex.result.points.iter().map(|p| p.index).collect::<Vec<_>>(), [0, 1, 2, 3, 4, 5]);
            assert_eq!(ex.result.points[1].choices["b"], "crash");
        }

        #[test]
        fn unknown_dimension_rejected() {
            let (dir, store, pl) = setup(SCRIPT, json!({"dimensions": [{"choice_key": "zzz", "values": [1]}],
                "objectives": [{"metric": "cost", "direction": "minimize"}]}), false);
            let ctx = ExecContext { scratch_root: dir.path().join("s"), ..ExecContext::new(&store) };
            let cfg = TuningConfig::from_entry(&pl).unwrap().unwrap();
            let err = explore(&ctx, &pl, &cfg, ExploreOptions::default()).unwrap_err();
            assert!(matches!(err, AutotuneError::UnknownChoice(_)));
        }

        #[test]
        fn non_performance_objective_rejected() {
            let (dir, store, pl) = setup(SCRIPT, json!({"dimensions": [{"choice_key": "a", "values": [1]}],
                "objectives": [{"metric": "sum", "direction": "minimize"}]}), false);
            let ctx = ExecContext { scratch_root: dir.path().join("s"), ..ExecContext::new(&store) };
            let cfg = TuningConfig::from_entry(&pl).unwrap().unwrap();
            let err = explore(&ctx, &pl, &cfg, ExploreOptions::default()).unwrap_err();
            assert!(matches!(err, AutotuneError::InvalidObjectives(_)));
        }
    }
}
