//! Detection results cached as `soft` entries, keyed by (soft_name, install_path).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    detect_with, resolve_dependency, DetectOptions, DetectedEnv, EnvError, SoftDescriptor,
    VersionConstraint,
};
use crate::store::{ComponentEntry, ModuleKind, Query, Store};

pub const ENV_TAG: &str = "env";
pub const DESCRIPTOR_TAG: &str = "descriptor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvOrigin {
    Detected,
    Installed,
}

impl EnvOrigin {
    fn tag(self) -> &'static str {
        match self {
            EnvOrigin::Detected => "detected",
            EnvOrigin::Installed => "installed",
        }
    }
}

#[derive(Debug, Deserialize)]
struct EnvMeta {
    env: DetectedEnv,
    origin: EnvOrigin,
}

fn env_entries(store: &Store, soft_name: &str) -> Result<Vec<(ComponentEntry, EnvMeta)>, EnvError> {
    let entries = store.find_entries(&Query::kind(ModuleKind::Soft).tag(ENV_TAG))?;
    Ok(entries
        .into_iter()
        .filter_map(|e| {
            let m: EnvMeta = serde_json::from_value(e.meta.clone()).ok()?;
            (m.env.soft_name == soft_name).then_some((e, m))
        })
        .collect())
}

/// The first descriptor (in precedence order) for `soft_name`.
pub fn descriptor_for(store: &Store, soft_name: &str) -> Result<Option<SoftDescriptor>, EnvError> {
    for e in store.find_entries(&Query::kind(ModuleKind::Soft))? {
        if let Some(d) = e.meta.get("descriptor") {
            let d: SoftDescriptor = serde_json::from_value(d.clone())
                .map_err(|err| EnvError::InvalidDescriptor(format!("{}: {err}", e.uid_ref())))?;
            if d.soft_name == soft_name {
                return Ok(Some(d));
            }
        }
    }
    Ok(None)
}

/// Cached envs for `soft_name` whose install path still exists.
pub fn cached_envs(store: &Store, soft_name: &str) -> Result<Vec<DetectedEnv>, EnvError> {
    Ok(env_entries(store, soft_name)?
        .into_iter()
        .map(|(_, m)| m.env)
        .filter(|env| env.install_path.exists())
        .collect())
}

pub fn registered_entry(
    store: &Store,
    soft_name: &str,
    install_path: &Path,
) -> Result<Option<ComponentEntry>, EnvError> {
    Ok(env_entries(store, soft_name)?
        .into_iter()
        .find(|(_, m)| m.env.install_path == install_path)
        .map(|(e, _)| e))
}

/// Inserts or refreshes the cache entry for `env`.
pub fn register_env(
    store: &Store,
    env: &DetectedEnv,
    origin: EnvOrigin,
) -> Result<ComponentEntry, EnvError> {
    let meta = json!({ "env": env, "origin": origin });
    match registered_entry(store, &env.soft_name, &env.install_path)? {
        Some(existing) => Ok(store.update_meta(&existing, meta)?),
        None => {
            let tags: BTreeSet<String> = [ENV_TAG, origin.tag()].iter().map(|s| s.to_string()).collect();
            Ok(store.add_entry(&store.primary().name, ModuleKind::Soft, None, &tags, meta)?)
        }
    }
}

pub fn remove_registration(store: &Store, soft_name: &str, install_path: &Path) -> Result<bool, EnvError> {
    match registered_entry(store, soft_name, install_path)? {
        Some(e) => {
            store.remove_entry(&e)?;
            Ok(true)
        }
        None => Ok(false),
    }
}

/// Runs detection and brings the cache in line with it: found envs are
/// upserted, previously detected envs that were not found are dropped.
/// Installed envs are left alone.
pub fn detect_and_cache(
    store: &Store,
    descriptor: &SoftDescriptor,
    search_roots: &[std::path::PathBuf],
    opts: &DetectOptions,
) -> Result<Vec<DetectedEnv>, EnvError> {
    let found = detect_with(descriptor, search_roots, opts)?;
    for env in &found {
        register_env(store, env, EnvOrigin::Detected)?;
    }
    for (entry, m) in env_entries(store, &descriptor.soft_name)? {
        if m.origin == EnvOrigin::Detected && !found.iter().any(|f| f.install_path == m.env.install_path) {
            store.remove_entry(&entry)?;
        }
    }
    Ok(found)
}

/// Resolves against the cache, detecting first when the cache is empty or
/// `refresh` is set. A soft without descriptor or cache entries is unresolved.
pub fn resolve_in_store(
    store: &Store,
    soft_name: &str,
    constraint: &VersionConstraint,
    refresh: bool,
    search_roots: &[std::path::PathBuf],
    opts: &DetectOptions,
) -> Result<DetectedEnv, EnvError> {
    let mut envs = cached_envs(store, soft_name)?;
    if refresh || envs.is_empty() {
        if let Some(d) = descriptor_for(store, soft_name)? {
            detect_and_cache(store, &d, search_roots, opts)?;
            envs = cached_envs(store, soft_name)?;
        }
    }
    resolve_dependency(soft_name, constraint, &envs)
}

/// Meta document for a descriptor entry.
pub fn descriptor_meta(d: &SoftDescriptor) -> Value {
    json!({ "descriptor": d })
}
