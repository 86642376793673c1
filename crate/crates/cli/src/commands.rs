use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};

use ckp_core::autotune::{explore, ExploreOptions, SearchStrategy, TuningConfig};
use ckp_core::env::{
    descriptor_for, detect_and_cache, emit_env_script, resolve_in_store, DetectOptions, DetectedEnv,
    SoftDescriptor, Version, VersionConstraint,
};
use ckp_core::experiment::{
    check_archival, compare, load_record, replay, run_and_record, verify_integrity, ArchivalManifest,
    Status, ToleranceRule, ToleranceSpec,
};
use ckp_core::package::{install, InstallOptions, PackageRecipe};
use ckp_core::pipeline::{ExecContext, PipelineDefinition};
use ckp_core::report::{export_plot_series, export_table, load_validation, render_validation_report, RecordFilter};
use ckp_core::store::{ComponentEntry, ModuleKind, Query, Store, ENTRY_FILE, META_FILE};

use crate::args::{Pairs, Target};
use crate::error::CliError;
use crate::{Detection, Output, Verb};

/// Result of a verb: the JSON object and its human-readable form.
pub struct Outcome {
    pub json: Value,
    pub text: String,
}

type Res = Result<Outcome, CliError>;

fn outcome(json: Value, text: impl Into<String>) -> Res {
    Ok(Outcome { json, text: text.into() })
}

fn parse(t: &crate::Target) -> Result<(Target, Pairs), CliError> {
    Ok((Target::parse(&t.target)?, Pairs::parse(&t.pairs)?))
}

fn open_store() -> Result<Store, CliError> {
    Ok(Store::open_default()?)
}

fn exec_context<'a>(store: &'a Store, d: &Detection) -> ExecContext<'a> {
    ExecContext {
        search_roots: d.search_dirs.clone(),
        refresh_detection: d.refresh,
        ..ExecContext::new(store)
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values serialize")
}

fn entry_line(e: &ComponentEntry) -> String {
    let alias = e.id.alias.as_ref().map(|a| a.to_string()).unwrap_or_else(|| "-".into());
    let tags: Vec<&str> = e.tags.iter().map(String::as_str).collect();
    format!("{}:{}  {}  [{}]", e.kind, e.uid(), alias, tags.join(","))
}

fn env_line(e: &DetectedEnv) -> String {
    format!("{} {} {}", e.soft_name, e.version, e.install_path.display())
}

/// Writes `content` to `--output` when given; otherwise returns it as text.
fn emit(o: &Output, json: Value, content: String) -> Res {
    match &o.output {
        Some(path) => {
            fs::write(path, &content)?;
            let mut json = json;
            json["path"] = json!(path);
            outcome(json, format!("wrote {}\n", path.display()))
        }
        None => outcome(json, content),
    }
}

pub fn dispatch(verb: Verb) -> Res {
    match verb {
        Verb::Add { t, meta, tags, payload, repo } => add(&t, meta.as_deref(), &tags, payload.as_deref(), repo),
        Verb::Find { t } => find(&t),
        Verb::Rm { t } => rm(&t),
        Verb::Show { t } => show(&t),
        Verb::Detect { t, search_dirs } => detect(&t, &search_dirs),
        Verb::Resolve { t, d } => resolve(&t, &d),
        Verb::Envscript { t, d, o } => envscript(&t, &d, &o),
        Verb::Install { t, step_timeout } => install_cmd(&t, step_timeout),
        Verb::Run { t, d, keep_scratch } => run(&t, &d, keep_scratch),
        Verb::Explore { t, d, strategy, seed, sample_count, parallel } => {
            explore_cmd(&t, &d, strategy.as_deref(), seed, sample_count, parallel)
        }
        Verb::Replay { t, d } => replay_cmd(&t, &d),
        Verb::Compare { t } => compare_cmd(&t),
        Verb::CheckArchival { pairs } => check_archival_cmd(&pairs),
        Verb::Table { t, o } => table(&t, &o),
        Verb::PlotData { t, o } => plot_data(&t, &o),
        Verb::Report { t, o } => report(&t, &o),
    }
}

fn read_meta(path: &Path) -> Result<Value, CliError> {
    let text = if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(path).map_err(|e| CliError::operation("io_error", format!("{}: {e}", path.display())))?
    };
    serde_json::from_str(&text).map_err(|e| CliError::operation("invalid_meta", format!("{}: {e}", path.display())))
}

/// Rejects meta sections that the owning modules would refuse later.
fn check_known_sections(kind: ModuleKind, meta: &Value) -> Result<(), CliError> {
    let invalid = |e: String| CliError::operation("invalid_meta", e);
    match kind {
        ModuleKind::Pipeline if meta.get("pipeline").is_some() => {
            let def: PipelineDefinition =
                serde_json::from_value(meta["pipeline"].clone()).map_err(|e| invalid(e.to_string()))?;
            def.validate()?;
            if let Some(t) = meta.get("tuning") {
                let cfg: TuningConfig = serde_json::from_value(t.clone()).map_err(|e| invalid(e.to_string()))?;
                cfg.validate_for(&def)?;
            }
        }
        ModuleKind::Soft if meta.get("descriptor").is_some() => {
            let d: SoftDescriptor =
                serde_json::from_value(meta["descriptor"].clone()).map_err(|e| invalid(e.to_string()))?;
            d.validate()?;
        }
        ModuleKind::Package if meta.get("recipe").is_some() => {
            let r: PackageRecipe =
                serde_json::from_value(meta["recipe"].clone()).map_err(|e| invalid(e.to_string()))?;
            r.validate()?;
        }
        _ => {}
    }
    Ok(())
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), CliError> {
    for item in fs::read_dir(from).map_err(|e| CliError::operation("io_error", format!("{}: {e}", from.display())))? {
        let item = item?;
        let name = item.file_name();
        if name == META_FILE || name == ENTRY_FILE {
            continue;
        }
        let dest = to.join(&name);
        if item.file_type()?.is_dir() {
            fs::create_dir_all(&dest)?;
            copy_tree(&item.path(), &dest)?;
        } else {
            fs::copy(item.path(), &dest)?;
        }
    }
    Ok(())
}

fn add(t: &crate::Target, meta_file: Option<&Path>, tags: &[String], payload: Option<&Path>, repo: Option<String>) -> Res {
    let (target, pairs) = parse(t)?;
    let mut meta = match meta_file {
        Some(p) => read_meta(p)?,
        None => json!({}),
    };
    if !meta.is_object() {
        return Err(CliError::operation("invalid_meta", "meta must be a JSON object"));
    }
    for (k, v) in &pairs.0 {
        meta[k.as_str()] = json!(v);
    }
    check_known_sections(target.kind, &meta)?;
    let store = open_store()?;
    let repo = repo.unwrap_or_else(|| store.primary().name.clone());
    let tags: BTreeSet<String> = tags.iter().cloned().collect();
    let entry = store.add_entry(&repo, target.kind, target.name.as_deref(), &tags, meta)?;
    if let Some(dir) = payload {
        if let Err(e) = copy_tree(dir, &entry.data_path) {
            let _ = store.remove_entry(&entry);
            return Err(e);
        }
    }
    outcome(json!({ "added": entry.summary() }), format!("added {}\n", entry_line(&entry)))
}

fn find(t: &crate::Target) -> Res {
    let (target, pairs) = parse(t)?;
    pairs.only(&["tag"])?;
    let store = open_store()?;
    let mut q = Query::kind(target.kind);
    q.pattern = target.pattern()?;
    for tag in pairs.all("tag") {
        q = q.tag(tag);
    }
    let found = store.find_entries(&q)?;
    let text: String = found.iter().map(|e| entry_line(e) + "\n").collect();
    let matches: Vec<Value> = found.iter().map(ComponentEntry::summary).collect();
    outcome(json!({ "matches": matches }), text)
}

fn rm(t: &crate::Target) -> Res {
    let (target, pairs) = parse(t)?;
    pairs.only(&[])?;
    let store = open_store()?;
    let entry = store.get(&target.entry()?)?;
    store.remove_entry(&entry)?;
    outcome(json!({ "removed": entry.summary() }), format!("removed {}\n", entry_line(&entry)))
}

fn show(t: &crate::Target) -> Res {
    let (target, pairs) = parse(t)?;
    pairs.only(&[])?;
    let store = open_store()?;
    let entry = store.get(&target.entry()?)?;
    let mut out = json!({ "entry": entry.summary(), "meta": entry.meta });
    let mut text = format!("{}\n{}\n", entry_line(&entry), pretty(&entry.meta));
    if entry.kind == ModuleKind::Experiment {
        let integrity = verify_integrity(&entry)?;
        let _ = writeln!(text, "integrity: {}", integrity.detail);
        out["integrity"] = serde_json::to_value(&integrity).expect("report serializes");
    }
    outcome(out, text)
}

fn soft_name(target: &Target) -> Result<String, CliError> {
    target.expect_kind(&[ModuleKind::Soft])?;
    target
        .name
        .clone()
        .ok_or_else(|| CliError::usage("target must be soft:<soft_name>"))
}

fn constraint(pairs: &Pairs) -> Result<VersionConstraint, CliError> {
    let v = |k: &str| -> Result<Option<Version>, CliError> {
        pairs.get(k).map(|s| s.parse::<Version>().map_err(CliError::from)).transpose()
    };
    Ok(VersionConstraint::new(v("min")?, v("max")?, v("exact")?)?)
}

fn detect(t: &crate::Target, search_dirs: &[PathBuf]) -> Res {
    let (target, pairs) = parse(t)?;
    pairs.only(&[])?;
    let name = soft_name(&target)?;
    let store = open_store()?;
    let descriptor = descriptor_for(&store, &name)?
        .ok_or_else(|| CliError::operation("not_found", format!("no soft descriptor for {name:?}")))?;
    let found = detect_and_cache(&store, &descriptor, search_dirs, &DetectOptions::default())?;
    let text: String = found.iter().map(|e| env_line(e) + "\n").collect();
    outcome(json!({ "detected": found }), text)
}

fn resolve_soft(store: &Store, target: &Target, pairs: &Pairs, d: &Detection) -> Result<DetectedEnv, CliError> {
    pairs.only(&["min", "max", "exact"])?;
    let name = soft_name(target)?;
    let c = constraint(pairs)?;
    Ok(resolve_in_store(store, &name, &c, d.refresh, &d.search_dirs, &DetectOptions::default())?)
}

fn resolve(t: &crate::Target, d: &Detection) -> Res {
    let (target, pairs) = parse(t)?;
    let store = open_store()?;
    let env = resolve_soft(&store, &target, &pairs, d)?;
    let text = env_line(&env) + "\n";
    outcome(json!({ "resolved": env }), text)
}

fn envscript(t: &crate::Target, d: &Detection, o: &Output) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Soft, ModuleKind::Pipeline])?;
    let store = open_store()?;
    let envs = if target.kind == ModuleKind::Pipeline {
        pairs.only(&[])?;
        let def = PipelineDefinition::from_entry(&store.get(&target.entry()?)?)?;
        let mut envs = Vec::new();
        for dep in &def.dependencies {
            envs.push(resolve_in_store(
                &store,
                &dep.soft_name,
                &dep.constraint,
                d.refresh,
                &d.search_dirs,
                &DetectOptions::default(),
            )?);
        }
        envs
    } else {
        vec![resolve_soft(&store, &target, &pairs, d)?]
    };
    let script = emit_env_script(&envs)?;
    emit(o, json!({ "script": script }), script)
}

fn install_cmd(t: &crate::Target, step_timeout: Option<f64>) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Package])?;
    pairs.only(&["prefix"])?;
    let store = open_store()?;
    let entry = store.get(&target.entry()?)?;
    let recipe = PackageRecipe::from_entry(&entry)?;
    let prefix = match pairs.get("prefix") {
        Some(p) => PathBuf::from(p),
        None => store
            .primary()
            .root
            .join("install")
            .join(format!("{}-{}", recipe.soft_name, recipe.provided_version)),
    };
    let mut opts = InstallOptions::default();
    if let Some(s) = step_timeout {
        if !(s.is_finite() && s > 0.0) {
            return Err(CliError::usage("--step-timeout must be a positive number of seconds"));
        }
        opts.step_timeout = Some(Duration::from_secs_f64(s));
    }
    let env = install(&store, &recipe, &prefix, &opts)?;
    let text = format!("installed {}\n", env_line(&env));
    outcome(json!({ "installed": env }), text)
}

fn run(t: &crate::Target, d: &Detection, keep_scratch: bool) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Pipeline])?;
    let store = open_store()?;
    let pipeline = store.get(&target.entry()?)?;
    let mut ctx = exec_context(&store, d);
    ctx.keep_scratch = keep_scratch;
    let (entry, rec) = run_and_record(&ctx, &pipeline, &pairs.to_map(), None)?;
    if let Some(err) = &rec.error {
        return Err(CliError::operation(&err.code, err.message.clone()).with("experiment", json!(entry.uid())));
    }
    let mut text = format!("experiment {} ({} repetitions)\n", entry.uid(), rec.per_repetition.len());
    for (k, v) in &rec.functional {
        let _ = writeln!(text, "  {k} = {v}");
    }
    for (k, s) in &rec.aggregated {
        let _ = writeln!(text, "  {k}: mean {} median {} std {} (min {}, max {})", s.mean, s.median, s.std, s.min, s.max);
    }
    outcome(
        json!({
            "experiment": entry.uid(),
            "status": rec.status,
            "choices": rec.effective_choices,
            "repetitions": rec.per_repetition.len(),
            "functional": rec.functional,
            "aggregated": rec.aggregated,
        }),
        text,
    )
}

fn explore_cmd(
    t: &crate::Target,
    d: &Detection,
    strategy: Option<&str>,
    seed: Option<u64>,
    sample_count: Option<usize>,
    parallel: bool,
) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Pipeline])?;
    pairs.only(&[])?;
    let store = open_store()?;
    let pipeline = store.get(&target.entry()?)?;
    let mut cfg = TuningConfig::from_entry(&pipeline)?
        .ok_or_else(|| CliError::operation("invalid_space", format!("{} has no tuning section", pipeline.uid_ref())))?;
    let random = match strategy {
        None => seed.is_some() || sample_count.is_some(),
        Some("random") => true,
        Some("exhaustive") if seed.is_none() && sample_count.is_none() => false,
        Some("exhaustive") => return Err(CliError::usage("--seed and --sample-count apply to the random strategy")),
        Some(other) => return Err(CliError::usage(format!("unknown strategy {other:?}; use exhaustive or random"))),
    };
    if random {
        let (old_n, old_seed) = match cfg.space.strategy {
            SearchStrategy::Random { sample_count, seed } => (Some(sample_count), seed),
            SearchStrategy::Exhaustive => (None, 0),
        };
        let n = sample_count
            .or(old_n)
            .ok_or_else(|| CliError::usage("random strategy needs --sample-count"))?;
        cfg.space.strategy = SearchStrategy::Random { sample_count: n, seed: seed.unwrap_or(old_seed) };
    } else if strategy == Some("exhaustive") {
        cfg.space.strategy = SearchStrategy::Exhaustive;
    }
    let ctx = exec_context(&store, d);
    let ex = explore(&ctx, &pipeline, &cfg, ExploreOptions { parallel })?;
    let mut text = format!("exploration {} ({} points)\n", ex.id, ex.result.points.len());
    for p in &ex.result.points {
        let on = if ex.result.frontier.contains(&p.experiment) { "  *frontier*" } else { "" };
        let choices: Vec<String> = p.choices.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let status = if p.status == Status::Success { "success" } else { "failed" };
        let _ = writeln!(text, "  #{} {} {} {status}{on}", p.index, p.experiment, choices.join(" "));
    }
    outcome(
        json!({
            "exploration": ex.id,
            "strategy": cfg.space.strategy,
            "points": ex.result.points,
            "frontier": ex.result.frontier,
        }),
        text,
    )
}

fn replay_cmd(t: &crate::Target, d: &Detection) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Experiment])?;
    pairs.only(&[])?;
    let store = open_store()?;
    let ctx = exec_context(&store, d);
    let out = replay(&ctx, &target.entry()?)?;
    let mut text = format!(
        "replay {} of {}: {}\n",
        out.entry.uid(),
        out.record.replay_of.as_deref().unwrap_or_default(),
        if out.record.status == Status::Success { "success" } else { "failed" }
    );
    for c in &out.diff.dependencies {
        let _ = writeln!(text, "CHANGED: {c}");
    }
    for p in &out.diff.platform {
        let _ = writeln!(text, "PLATFORM: {p}");
    }
    let mut doc = json!({
        "experiment": out.entry.uid(),
        "replay_of": out.record.replay_of,
        "status": out.record.status,
        "functional": out.record.functional,
        "aggregated": out.record.aggregated,
        "env_diff": out.diff,
    });
    // a failed replay is still a recorded result, so it is not an `error`
    if let Some(failure) = &out.record.error {
        let _ = writeln!(text, "failure[{}]: {}", failure.code, failure.message);
        doc["failure"] = json!(failure);
    }
    outcome(doc, text)
}

fn tolerances(pairs: &Pairs) -> Result<ToleranceSpec, CliError> {
    let mut spec = ToleranceSpec::default();
    for (k, v) in &pairs.0 {
        if k == "tol" {
            spec.default = v.parse::<ToleranceRule>()?;
        } else if let Some(metric) = k.strip_prefix("tol.") {
            spec.rules.insert(metric.to_owned(), v.parse::<ToleranceRule>()?);
        }
    }
    Ok(spec)
}

fn compare_cmd(t: &crate::Target) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Experiment])?;
    pairs.only(&["replay", "tol", "tol."])?;
    let replay_ref = Target::parse(&format!("experiment:{}", pairs.require("replay")?))?.entry()?;
    let tol = tolerances(&pairs)?;
    let store = open_store()?;
    // both must be records before anything is persisted
    load_record(&store, &replay_ref)?;
    let (entry, report) = compare(&store, &target.entry()?, &replay_ref, &tol)?;
    let text = render_validation_report(&report);
    outcome(
        json!({
            "report": entry.uid(),
            "badge": report.badge,
            "rows": report.rows,
            "env_diff": report.env_diff,
        }),
        text,
    )
}

fn check_archival_cmd(raw: &[String]) -> Res {
    let pairs = Pairs::parse(raw)?;
    pairs.only(&["manifest"])?;
    let path = PathBuf::from(pairs.require("manifest")?);
    let manifest: ArchivalManifest = serde_json::from_value(read_meta(&path)?)
        .map_err(|e| CliError::operation("invalid_manifest", format!("{}: {e}", path.display())))?;
    let store = open_store()?;
    let report = check_archival(&store, &manifest)?;
    let mut text = String::new();
    for c in &report.checks {
        let _ = writeln!(text, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(h) = &report.computed_hash {
        let _ = writeln!(text, "computed content_hash: {h}");
    }
    outcome(json!({ "archival": report }), text)
}

fn table(t: &crate::Target, o: &Output) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Experiment])?;
    if target.name.is_some() {
        return Err(CliError::usage("table takes the bare `experiment` target; filter with key=value"));
    }
    pairs.only(&["columns", "tag", "exploration", "pipeline", "status"])?;
    let columns: Vec<String> = pairs
        .get("columns")
        .unwrap_or("uid,status,wall_time_s:mean")
        .split(',')
        .map(str::to_owned)
        .collect();
    let pipeline = pairs
        .get("pipeline")
        .map(|p| Target::parse(&format!("pipeline:{p}"))?.entry())
        .transpose()?;
    let status = match pairs.get("status") {
        None => None,
        Some("success") => Some(Status::Success),
        Some("failed") => Some(Status::Failed),
        Some(other) => return Err(CliError::usage(format!("status must be success or failed, got {other:?}"))),
    };
    let filter = RecordFilter {
        tags: pairs.all("tag").into_iter().map(str::to_owned).collect(),
        exploration: pairs.get("exploration").map(str::to_owned),
        pipeline,
        status,
    };
    let store = open_store()?;
    let csv = export_table(&store, &filter, &columns)?;
    let rows = csv.lines().count().saturating_sub(1);
    emit(o, json!({ "csv": csv, "rows": rows }), csv)
}

fn plot_data(t: &crate::Target, o: &Output) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Experiment])?;
    pairs.only(&["x", "y"])?;
    let store = open_store()?;
    let series = export_plot_series(&store, &target.entry()?, pairs.require("x")?, pairs.get("y").unwrap_or("wall_time_s:mean"))?;
    let doc = json!({ "series": series });
    let text = pretty(&doc) + "\n";
    emit(o, doc, text)
}

fn report(t: &crate::Target, o: &Output) -> Res {
    let (target, pairs) = parse(t)?;
    target.expect_kind(&[ModuleKind::Experiment])?;
    pairs.only(&[])?;
    let store = open_store()?;
    let report = load_validation(&store, &target.entry()?)?;
    let text = render_validation_report(&report);
    emit(o, json!({ "text": text, "badge": report.badge }), text)
}
