//! Installing missing dependencies from checksummed recipes.
//!
//! A recipe lives under the `recipe` key of a `package` entry:
//!
//! ```json
//! {"recipe": {
//!   "soft_name": "dataset.words",
//!   "provided_version": "1.0",
//!   "source": {"path": "words.tar.gz", "sha256": "<64 hex>"},
//!   "steps": ["sh ./configure --prefix=${PREFIX}", "make install"],
//!   "registration": {"WORDS_DIR": "${UNPACK_DIR}/words"},
//!   "dependencies": [{"soft_name": "compiler.c", "constraint": {"min": "4.0"}}]
//! }}
//! ```
//!
//! Steps run through `/bin/sh` in the unpack directory after sourcing the
//! environment script of the resolved dependencies. `${PREFIX}`,
//! `${UNPACK_DIR}` and `${ARTIFACT}` are substituted in steps and
//! registration templates.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{
    default_env_var, emit_env_script, register_env, remove_registration, resolve_in_store,
    DetectOptions, DetectedEnv, EnvError, EnvOrigin, PlatformFingerprint, Version,
    VersionConstraint,
};
use crate::process::run_shell_in;
use crate::store::{FileLock, LockError, Store, StoreError};

pub const INSTALL_LOG: &str = "install.log";
pub const FAILED_MARKER: &str = ".failed";
const INSTALL_LOCK: &str = ".install.lock";
const DOWNLOAD_DIR: &str = "downloads";
const UNPACK_DIR: &str = "unpack";

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("fetch failed: {0}")]
    FetchError(String),
    #[error("cannot unpack {path}: {message}")]
    Unpack { path: PathBuf, message: String },
    #[error("install step {step} failed:\n{output}")]
    InstallStepFailed { step: usize, output: String },
    #[error("another install holds {0}")]
    InstallBusy(PathBuf),
    #[error("I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl PackageError {
    pub fn code(&self) -> &'static str {
        match self {
            PackageError::InvalidRecipe(_) => "invalid_recipe",
            PackageError::ChecksumMismatch { .. } => "checksum_mismatch",
            PackageError::FetchError(_) => "fetch_error",
            PackageError::Unpack { .. } => "unpack_error",
            PackageError::InstallStepFailed { .. } => "install_step_failed",
            PackageError::InstallBusy(_) => "install_busy",
            PackageError::Io { .. } => "io_error",
            PackageError::Env(e) => e.code(),
            PackageError::Store(e) => e.code(),
        }
    }
}

type Result<T, E = PackageError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PackageError + '_ {
    move |source| PackageError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    /// Local archive; relative paths resolve against the package entry directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeDependency {
    pub soft_name: String,
    #[serde(default)]
    pub constraint: VersionConstraint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageRecipe {
    pub soft_name: String,
    pub provided_version: Version,
    pub source: PackageSource,
    #[serde(default)]
    pub steps: Vec<String>,
    #[serde(default)]
    pub registration: BTreeMap<String, String>,
    #[serde(default)]
    pub dependencies: Vec<RecipeDependency>,
}

impl PackageRecipe {
    pub fn validate(&self) -> Result<()> {
        let sha = &self.source.sha256;
        if sha.len() != 64 || !sha.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(PackageError::InvalidRecipe(format!(
                "sha256 must be 64 lowercase hex characters, got {sha:?}"
            )));
        }
        match (&self.source.url, &self.source.path) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(PackageError::InvalidRecipe(
                "source needs exactly one of `url` or `path`".into(),
            )),
        }
    }

    /// Reads the recipe from a package entry's meta; relative source paths
    /// are anchored at the entry directory.
    pub fn from_entry(entry: &crate::store::ComponentEntry) -> Result<Self> {
        let raw = entry
            .meta
            .get("recipe")
            .ok_or_else(|| PackageError::InvalidRecipe(format!("{} has no `recipe`", entry.uid_ref())))?;
        let mut recipe: PackageRecipe = serde_json::from_value(raw.clone())
            .map_err(|e| PackageError::InvalidRecipe(format!("{}: {e}", entry.uid_ref())))?;
        if let Some(p) = &recipe.source.path {
            if p.is_relative() {
                recipe.source.path = Some(entry.data_path.join(p));
            }
        }
        Ok(recipe)
    }

    fn artifact_name(&self) -> String {
        let from_path = self
            .source
            .path
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned());
        let from_url = self.source.url.as_ref().and_then(|u| {
            url::Url::parse(u)
                .ok()
                .and_then(|u| u.path_segments()?.next_back().map(str::to_owned))
                .filter(|s| !s.is_empty())
        });
        from_path.or(from_url).unwrap_or_else(|| "artifact".into())
    }
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn open_source(recipe: &PackageRecipe) -> Result<Box<dyn Read>> {
    if let Some(path) = &recipe.source.path {
        let f = File::open(path)
            .map_err(|e| PackageError::FetchError(format!("{}: {e}", path.display())))?;
        return Ok(Box::new(f));
    }
    let raw = recipe.source.url.as_deref().unwrap_or_default();
    let url = url::Url::parse(raw).map_err(|e| PackageError::FetchError(format!("{raw}: {e}")))?;
    match url.scheme() {
        "file" => {
            let path = url
                .to_file_path()
                .map_err(|_| PackageError::FetchError(format!("{raw}: not a local path")))?;
            let f = File::open(&path)
                .map_err(|e| PackageError::FetchError(format!("{}: {e}", path.display())))?;
            Ok(Box::new(f))
        }
        "http" | "https" => {
            let resp = ureq::get(raw)
                .call()
                .map_err(|e| PackageError::FetchError(format!("{raw}: {e}")))?;
            Ok(Box::new(resp.into_body().into_reader()))
        }
        other => Err(PackageError::FetchError(format!("unsupported scheme {other:?}"))),
    }
}

/// Downloads (or copies) the recipe's artifact into `dest`, verifying its
/// digest before it becomes visible. An already verified artifact is reused.
pub fn fetch(recipe: &PackageRecipe, dest: &Path) -> Result<PathBuf> {
    recipe.validate()?;
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let target = dest.join(recipe.artifact_name());
    if target.is_file() {
        if sha256_file(&target).map_err(io_err(&target))? == recipe.source.sha256 {
            return Ok(target);
        }
        fs::remove_file(&target).map_err(io_err(&target))?;
    }

    let mut reader = open_source(recipe)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dest).map_err(io_err(dest))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = reader
            .read(&mut buf)
            .map_err(|e| PackageError::FetchError(e.to_string()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        tmp.write_all(&buf[..n]).map_err(io_err(dest))?;
    }
    let actual = hex::encode(hasher.finalize());
    if actual != recipe.source.sha256 {
        // dropping `tmp` deletes it
        return Err(PackageError::ChecksumMismatch {
            expected: recipe.source.sha256.clone(),
            actual,
        });
    }
    tmp.persist(&target).map_err(|e| PackageError::Io {
        path: target.clone(),
        source: e.error,
    })?;
    Ok(target)
}

/// Extracts `.tar.gz`/`.tgz` and `.zip`; anything else is copied as is.
pub fn unpack(artifact: &Path, dir: &Path) -> Result<()> {
    let name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let fail = |message: String| PackageError::Unpack {
        path: artifact.to_owned(),
        message,
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if name.ends_with(".tar.gz") || name.ends_with(".tgz") {
        let f = File::open(artifact).map_err(io_err(artifact))?;
        tar::Archive::new(flate2::read::GzDecoder::new(f))
            .unpack(dir)
            .map_err(|e| fail(e.to_string()))?;
    } else if name.ends_with(".zip") {
        let f = File::open(artifact).map_err(io_err(artifact))?;
        zip::ZipArchive::new(f)
            .and_then(|mut z| z.extract(dir))
            .map_err(|e| fail(e.to_string()))?;
    } else {
        let to = dir.join(artifact.file_name().unwrap_or_default());
        fs::copy(artifact, &to).map_err(io_err(&to))?;
    }
    Ok(())
}

fn substitute(template: &str, vars: &[(&str, String)]) -> String {
    vars.iter()
        .fold(template.to_owned(), |acc, (k, v)| acc.replace(&format!("${{{k}}}"), v))
}

#[derive(Debug, Clone)]
pub struct InstallOptions {
    pub lock_timeout: Duration,
    pub step_timeout: Option<Duration>,
    pub detect: DetectOptions,
}

impl Default for InstallOptions {
    fn default() -> Self {
        InstallOptions {
            lock_timeout: Duration::from_secs(60),
            step_timeout: None,
            detect: DetectOptions::default(),
        }
    }
}

/// Fetches, unpacks and builds the recipe under `prefix`, then registers the
/// result in the store. Nothing is registered unless every step succeeds.
pub fn install(
    store: &Store,
    recipe: &PackageRecipe,
    prefix: &Path,
    opts: &InstallOptions,
) -> Result<DetectedEnv> {
    recipe.validate()?;
    fs::create_dir_all(prefix).map_err(io_err(prefix))?;
    let prefix = fs::canonicalize(prefix).map_err(io_err(prefix))?;
    let _guard = FileLock::acquire(&prefix.join(INSTALL_LOCK), opts.lock_timeout).map_err(|e| match e {
        LockError::Timeout => PackageError::InstallBusy(prefix.clone()),
        LockError::Io(source) => PackageError::Io {
            path: prefix.join(INSTALL_LOCK),
            source,
        },
    })?;

    let result = install_locked(store, recipe, &prefix, opts);
    if result.is_err() {
        let _ = fs::write(prefix.join(FAILED_MARKER), b"");
        remove_registration(store, &recipe.soft_name, &prefix)?;
    }
    result
}

fn install_locked(
    store: &Store,
    recipe: &PackageRecipe,
    prefix: &Path,
    opts: &InstallOptions,
) -> Result<DetectedEnv> {
    let unpack_dir = prefix.join(UNPACK_DIR);
    // always start from a clean tree; a `.failed` marker only records history
    if unpack_dir.exists() {
        fs::remove_dir_all(&unpack_dir).map_err(io_err(&unpack_dir))?;
    }
    let marker = prefix.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(io_err(&marker))?;
    }

    let artifact = fetch(recipe, &prefix.join(DOWNLOAD_DIR))?;
    unpack(&artifact, &unpack_dir)?;

    let mut deps = Vec::new();
    for d in &recipe.dependencies {
        deps.push(resolve_in_store(store, &d.soft_name, &d.constraint, false, &[], &opts.detect)?);
    }
    let env_script = prefix.join("env.sh");
    fs::write(&env_script, emit_env_script(&deps)?).map_err(io_err(&env_script))?;

    let vars = [
        ("PREFIX", prefix.display().to_string()),
        ("UNPACK_DIR", unpack_dir.display().to_string()),
        ("ARTIFACT", artifact.display().to_string()),
        ("VERSION", recipe.provided_version.to_string()),
    ];
    let log_path = prefix.join(INSTALL_LOG);
    let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
    for (i, step) in recipe.steps.iter().enumerate() {
        let index = i + 1;
        let cmd = substitute(step, &vars);
        writeln!(log, "## step {index}: {cmd}").map_err(io_err(&log_path))?;
        let out = run_shell_in(&cmd, &unpack_dir, Some(&env_script), opts.step_timeout)
            .map_err(io_err(&unpack_dir))?;
        let output = out.combined_output();
        log.write_all(output.as_bytes()).map_err(io_err(&log_path))?;
        if !out.success() {
            writeln!(log, "## step {index} failed: {}", out.describe_exit()).map_err(io_err(&log_path))?;
            return Err(PackageError::InstallStepFailed { step: index, output });
        }
    }

    let mut templates = recipe.registration.clone();
    if templates.is_empty() {
        templates.insert(default_env_var(&recipe.soft_name), "${PREFIX}".into());
    }
    let mut env_settings = BTreeMap::new();
    for (name, template) in templates {
        let value = substitute(&template, &vars);
        if value.contains("${") {
            return Err(PackageError::InvalidRecipe(format!(
                "unresolved placeholder in registration {name}={template}"
            )));
        }
        env_settings.insert(name, value);
    }
    let env = DetectedEnv {
        soft_name: recipe.soft_name.clone(),
        version: recipe.provided_version.clone(),
        install_path: prefix.to_owned(),
        env_settings,
        platform: PlatformFingerprint::current(),
        detected_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    register_env(store, &env, EnvOrigin::Installed)?;
    Ok(env)
}
