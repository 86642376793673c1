use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use regex::Regex;
use walkdir::WalkDir;

use super::{parse_version, DetectedEnv, EnvError, PlatformFingerprint, SoftDescriptor};
use crate::process::run_captured;
use crate::store::wildcard_match;

/// Path-separator-joined extra roots, searched before the given ones.
pub const SEARCH_DIRS_ENV: &str = "CKP_SEARCH_DIRS";

pub const PROBE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct DetectOptions {
    /// Directories scanned non-recursively; `None` means `$PATH`.
    pub system_path: Option<Vec<PathBuf>>,
    pub probe_timeout: Duration,
    /// Honour `CKP_SEARCH_DIRS`.
    pub use_env_search_dirs: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            system_path: None,
            probe_timeout: PROBE_TIMEOUT,
            use_env_search_dirs: true,
        }
    }
}

impl DetectOptions {
    /// Only the given roots: no `$PATH`, no `CKP_SEARCH_DIRS`.
    pub fn isolated() -> Self {
        DetectOptions {
            system_path: Some(Vec::new()),
            use_env_search_dirs: false,
            ..Default::default()
        }
    }
}

pub fn system_path_dirs() -> Vec<PathBuf> {
    std::env::var_os("PATH")
        .map(|p| std::env::split_paths(&p).collect())
        .unwrap_or_default()
}

/// Detects installations with default options (system path included).
pub fn detect(soft: &SoftDescriptor, search_roots: &[PathBuf]) -> Result<Vec<DetectedEnv>, EnvError> {
    detect_with(soft, search_roots, &DetectOptions::default())
}

/// Walks `search_roots` (recursively) and the system path (flat), probes every
/// file whose name matches a candidate, and returns the envs whose probe
/// succeeded, sorted by descending version then ascending path.
pub fn detect_with(
    soft: &SoftDescriptor,
    search_roots: &[PathBuf],
    opts: &DetectOptions,
) -> Result<Vec<DetectedEnv>, EnvError> {
    let pattern = soft.validate()?;

    let mut roots: Vec<PathBuf> = Vec::new();
    if opts.use_env_search_dirs {
        if let Some(extra) = std::env::var_os(SEARCH_DIRS_ENV) {
            roots.extend(std::env::split_paths(&extra).filter(|p| !p.as_os_str().is_empty()));
        }
    }
    roots.extend(search_roots.iter().cloned());
    roots.extend(soft.extra_search_dirs.iter().cloned());
    let flat = opts.system_path.clone().unwrap_or_else(system_path_dirs);

    let candidates = find_candidates(soft, &roots, &flat);
    debug!("{}: {} candidate file(s)", soft.soft_name, candidates.len());

    let platform = PlatformFingerprint::current();
    let workers = thread::available_parallelism().map_or(4, |n| n.get()).clamp(1, 16);
    let chunk = candidates.len().div_ceil(workers).max(1);
    let mut found: Vec<DetectedEnv> = thread::scope(|s| {
        let handles: Vec<_> = candidates
            .chunks(chunk)
            .map(|part| {
                let pattern = &pattern;
                let platform = &platform;
                s.spawn(move || {
                    part.iter()
                        .filter_map(|path| probe(soft, pattern, path, platform, opts.probe_timeout))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("probe thread panicked"))
            .collect()
    });
    found.sort_by(|a, b| {
        b.version
            .cmp(&a.version)
            .then_with(|| a.install_path.cmp(&b.install_path))
    });
    Ok(found)
}

fn name_matches(soft: &SoftDescriptor, path: &Path) -> bool {
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
        return false;
    };
    soft.candidate_filenames.iter().any(|c| wildcard_match(c, name))
}

fn find_candidates(soft: &SoftDescriptor, roots: &[PathBuf], flat: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = BTreeSet::new();
    for root in roots {
        for entry in WalkDir::new(root).follow_links(false).into_iter().filter_map(Result::ok) {
            let p = entry.path();
            // follow symlinks for the file check so linked tools are found
            if name_matches(soft, p) && p.is_file() {
                out.insert(p.to_path_buf());
            }
        }
    }
    for dir in flat {
        let Ok(rd) = std::fs::read_dir(dir) else { continue };
        for entry in rd.filter_map(Result::ok) {
            let p = entry.path();
            if name_matches(soft, &p) && p.is_file() {
                out.insert(p);
            }
        }
    }
    out.into_iter().collect()
}

fn probe(
    soft: &SoftDescriptor,
    pattern: &Regex,
    path: &Path,
    platform: &PlatformFingerprint,
    timeout: Duration,
) -> Option<DetectedEnv> {
    let mut cmd = Command::new(path);
    cmd.args(&soft.version_command);
    let out = match run_captured(&mut cmd, Some(timeout)) {
        Ok(out) => out,
        Err(e) => {
            warn!("{}: cannot run {}: {e}", soft.soft_name, path.display());
            return None;
        }
    };
    if !out.success() {
        warn!("{}: {} {}, skipped", soft.soft_name, path.display(), out.describe_exit());
        return None;
    }
    let text = out.combined_output();
    let Some(raw) = pattern.captures(&text).and_then(|c| c.get(1)) else {
        warn!("{}: version pattern did not match output of {}", soft.soft_name, path.display());
        return None;
    };
    let version = match parse_version(raw.as_str()) {
        Ok(v) => v,
        Err(e) => {
            warn!("{}: {e} from {}", soft.soft_name, path.display());
            return None;
        }
    };
    let env_settings = render_env(soft, path, &version.to_string())?;
    Some(DetectedEnv {
        soft_name: soft.soft_name.clone(),
        version,
        install_path: path.to_path_buf(),
        env_settings,
        platform: platform.clone(),
        detected_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    })
}

fn render_env(soft: &SoftDescriptor, path: &Path, version: &str) -> Option<BTreeMap<String, String>> {
    let dir = path.parent().unwrap_or(Path::new("/"));
    let mut templates = soft.env.clone();
    if templates.is_empty() {
        templates.insert(soft.default_env_var(), "${INSTALL_PATH}".into());
    }
    let mut out = BTreeMap::new();
    for (name, template) in templates {
        let value = template
            .replace("${INSTALL_PATH}", &path.display().to_string())
            .replace("${INSTALL_DIR}", &dir.display().to_string())
            .replace("${VERSION}", version);
        if value.contains("${") {
            warn!("{}: unresolved placeholder in env template for {name}", soft.soft_name);
            return None;
        }
        out.insert(name, value);
    }
    Some(out)
}
