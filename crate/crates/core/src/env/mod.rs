//! Native software detection, version resolution and environment scripts.

mod cache;
mod detect;
mod platform;
mod script;
mod version;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::StoreError;

pub use cache::{
    cached_envs, descriptor_for, descriptor_meta, detect_and_cache, register_env, registered_entry,
    remove_registration, resolve_in_store, EnvOrigin, DESCRIPTOR_TAG, ENV_TAG,
};
pub use detect::{detect, detect_with, system_path_dirs, DetectOptions, PROBE_TIMEOUT, SEARCH_DIRS_ENV};
pub use platform::PlatformFingerprint;
pub use script::emit_env_script;
pub use version::{parse_version, Version, VersionConstraint, VersionPart};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid version {0:?}")]
    InvalidVersion(String),
    #[error("invalid version constraint: {0}")]
    InvalidConstraint(String),
    #[error("invalid soft descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("unresolved dependency {soft_name} ({constraint}); candidates: {}", fmt_candidates(.candidates))]
    UnresolvedDependency {
        soft_name: String,
        constraint: Box<VersionConstraint>,
        candidates: Vec<(Version, PathBuf)>,
    },
    #[error("conflicting values for {variable}: set by {first} and {second}")]
    EnvConflict {
        variable: String,
        first: String,
        second: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EnvError {
    pub fn code(&self) -> &'static str {
        match self {
            EnvError::InvalidVersion(_) => "invalid_version",
            EnvError::InvalidConstraint(_) => "invalid_constraint",
            EnvError::InvalidDescriptor(_) => "invalid_descriptor",
            EnvError::UnresolvedDependency { .. } => "unresolved_dependency",
            EnvError::EnvConflict { .. } => "env_conflict",
            EnvError::Store(e) => e.code(),
        }
    }
}

fn fmt_candidates(c: &[(Version, PathBuf)]) -> String {
    if c.is_empty() {
        return "none".into();
    }
    c.iter()
        .map(|(v, p)| format!("{v} at {}", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Declarative probe for one piece of software.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftDescriptor {
    pub soft_name: String,
    /// File names to look for; `*` is a wildcard.
    pub candidate_filenames: Vec<String>,
    #[serde(default)]
    pub extra_search_dirs: Vec<PathBuf>,
    /// Arguments passed to the candidate to make it print its version.
    #[serde(default)]
    pub version_command: Vec<String>,
    /// Regex with exactly one capture group around the version.
    pub version_pattern: String,
    /// Environment templates; `${INSTALL_PATH}`, `${INSTALL_DIR}` and
    /// `${VERSION}` are substituted. Defaults to `CK_ENV_<SOFT_NAME>` pointing
    /// at the install path.
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

impl SoftDescriptor {
    pub fn validate(&self) -> Result<regex::Regex, EnvError> {
        if self.candidate_filenames.is_empty() {
            return Err(EnvError::InvalidDescriptor(format!(
                "{}: candidate_filenames is empty",
                self.soft_name
            )));
        }
        let re = regex::Regex::new(&self.version_pattern)
            .map_err(|e| EnvError::InvalidDescriptor(format!("{}: {e}", self.soft_name)))?;
        if re.captures_len() != 2 {
            return Err(EnvError::InvalidDescriptor(format!(
                "{}: version_pattern must have exactly one capture group, found {}",
                self.soft_name,
                re.captures_len() - 1
            )));
        }
        Ok(re)
    }

    pub fn default_env_var(&self) -> String {
        default_env_var(&self.soft_name)
    }
}

/// `compiler.c` -> `CK_ENV_COMPILER_C`.
pub fn default_env_var(soft_name: &str) -> String {
    let body: String = soft_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("CK_ENV_{body}")
}

/// A concrete installation found on (or installed into) this host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectedEnv {
    pub soft_name: String,
    pub version: Version,
    pub install_path: PathBuf,
    pub env_settings: BTreeMap<String, String>,
    pub platform: PlatformFingerprint,
    /// Unix seconds at detection time.
    pub detected_at: u64,
}

/// Highest version satisfying `constraint`; ties go to the smallest path.
pub fn resolve_dependency(
    soft_name: &str,
    constraint: &VersionConstraint,
    detected: &[DetectedEnv],
) -> Result<DetectedEnv, EnvError> {
    detected
        .iter()
        .filter(|e| e.soft_name == soft_name && constraint.is_satisfied_by(&e.version))
        .max_by(|a, b| {
            a.version
                .cmp(&b.version)
                .then_with(|| b.install_path.cmp(&a.install_path))
        })
        .cloned()
        .ok_or_else(|| EnvError::UnresolvedDependency {
            soft_name: soft_name.to_owned(),
            constraint: Box::new(constraint.clone()),
            candidates: detected
                .iter()
                .filter(|e| e.soft_name == soft_name)
                .map(|e| (e.version.clone(), e.install_path.clone()))
                .collect(),
        })
}
