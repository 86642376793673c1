//! Filesystem-backed component repository.
//!
//! Layout of one repository root:
//!
//! ```text
//! <root>/.lock                      advisory writer lock
//! <root>/<kind>/alias-index         `alias uid` per line, sorted by alias
//! <root>/<kind>/<uid>/entry.json    alias + tags (canonical JSON)
//! <root>/<kind>/<uid>/meta.json     the entry's meta document (canonical JSON)
//! <root>/<kind>/<uid>/...           payload files
//! ```
//!
//! Readers never take the lock; every file is replaced by write-temp-then-rename
//! and new entry directories appear by a single rename.

mod id;
mod lock;
mod pattern;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;

pub use id::{Alias, EntryId, Uid, UID_LEN};
pub use lock::{FileLock, LockError};
pub use pattern::{wildcard_match, NamePattern};

pub const META_FILE: &str = "meta.json";
pub const ENTRY_FILE: &str = "entry.json";
pub const ALIAS_INDEX: &str = "alias-index";
const LOCK_FILE: &str = ".lock";

/// Environment variable naming the repository registration file.
pub const REPOS_ENV: &str = "CKP_REPOS";

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("alias {alias:?} already used for kind {kind} in repository {repo}")]
    AliasConflict {
        repo: String,
        kind: ModuleKind,
        alias: String,
    },
    #[error("unknown module kind {0:?}")]
    InvalidKind(String),
    #[error("invalid alias {0:?}")]
    InvalidAlias(String),
    #[error("invalid uid {0:?}")]
    InvalidUid(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid entry reference {0:?}")]
    InvalidRef(String),
    #[error("meta must be a JSON object: {0}")]
    InvalidMeta(String),
    #[error("entry not found: {0}")]
    NotFound(String),
    #[error("repository {0:?} is busy (writer lock not acquired)")]
    StoreBusy(String),
    #[error("unknown repository {0:?}")]
    UnknownRepo(String),
    #[error("{0} entries are immutable")]
    Immutable(String),
    #[error("repository configuration: {0}")]
    Config(String),
    #[error("store I/O at {path}: {source}")]
    StoreIoError {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed JSON at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::AliasConflict { .. } => "alias_conflict",
            StoreError::InvalidKind(_) => "invalid_kind",
            StoreError::InvalidAlias(_) => "invalid_alias",
            StoreError::InvalidUid(_) => "invalid_uid",
            StoreError::InvalidQuery(_) => "invalid_query",
            StoreError::InvalidRef(_) => "invalid_ref",
            StoreError::InvalidMeta(_) => "invalid_meta",
            StoreError::NotFound(_) => "not_found",
            StoreError::StoreBusy(_) => "store_busy",
            StoreError::UnknownRepo(_) => "unknown_repo",
            StoreError::Immutable(_) => "immutable",
            StoreError::Config(_) => "config",
            StoreError::StoreIoError { .. } => "store_io_error",
            StoreError::Json { .. } => "store_json_error",
        }
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::StoreIoError {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Program,
    Dataset,
    Soft,
    Package,
    Pipeline,
    Experiment,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::Program,
        ModuleKind::Dataset,
        ModuleKind::Soft,
        ModuleKind::Package,
        ModuleKind::Pipeline,
        ModuleKind::Experiment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Program => "program",
            ModuleKind::Dataset => "dataset",
            ModuleKind::Soft => "soft",
            ModuleKind::Package => "package",
            ModuleKind::Pipeline => "pipeline",
            ModuleKind::Experiment => "experiment",
        }
    }
}

impl FromStr for ModuleKind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| StoreError::InvalidKind(s.to_owned()))
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `<kind>:<uid-or-alias>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EntryRef {
    pub kind: ModuleKind,
    pub name: String,
}

impl EntryRef {
    pub fn new(kind: ModuleKind, name: impl Into<String>) -> Self {
        EntryRef {
            kind,
            name: name.into(),
        }
    }
}

impl FromStr for EntryRef {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, name) = s
            .split_once(':')
            .ok_or_else(|| StoreError::InvalidRef(s.to_owned()))?;
        let kind = kind.parse()?;
        if !Uid::is_uid(name) && !Alias::is_valid(name) {
            return Err(StoreError::InvalidRef(s.to_owned()));
        }
        Ok(EntryRef::new(kind, name))
    }
}

impl TryFrom<String> for EntryRef {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EntryRef> for String {
    fn from(r: EntryRef) -> String {
        r.to_string()
    }
}

impl fmt::Display for EntryRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.name)
    }
}

/// A stored unit. Carries no open file handles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentEntry {
    pub repo: String,
    pub kind: ModuleKind,
    pub id: EntryId,
    pub tags: BTreeSet<String>,
    pub meta: Value,
    pub data_path: PathBuf,
}

impl ComponentEntry {
    /// Reference by uid, which survives alias reuse.
    pub fn uid_ref(&self) -> EntryRef {
        EntryRef::new(self.kind, self.id.uid.as_str())
    }

    pub fn uid(&self) -> &str {
        self.id.uid.as_str()
    }

    /// Summary without the meta document.
    pub fn summary(&self) -> Value {
        json!({
            "repo": self.repo,
            "kind": self.kind,
            "uid": self.id.uid,
            "alias": self.id.alias,
            "tags": self.tags,
            "path": self.data_path,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repository {
    pub name: String,
    pub root: PathBuf,
}

impl Repository {
    fn kind_dir(&self, kind: ModuleKind) -> PathBuf {
        self.root.join(kind.as_str())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RepoConfig {
    repos: Vec<Repository>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    alias: Option<Alias>,
    tags: BTreeSet<String>,
    uid: Uid,
}

/// Lookup filter for [`Store::find_entries`].
#[derive(Debug, Clone)]
pub struct Query {
    pub kind: ModuleKind,
    pub pattern: NamePattern,
    pub tags: BTreeSet<String>,
}

impl Query {
    pub fn kind(kind: ModuleKind) -> Self {
        Query {
            kind,
            pattern: NamePattern::any(),
            tags: BTreeSet::new(),
        }
    }

    pub fn pattern(mut self, pattern: &str) -> Result<Self> {
        self.pattern = NamePattern::parse(pattern)?;
        Ok(self)
    }

    pub fn tag(mut self, tag: &str) -> Self {
        self.tags.insert(tag.to_lowercase());
        self
    }
}

/// A set of repositories consulted in precedence order.
#[derive(Debug, Clone)]
pub struct Store {
    repos: Vec<Repository>,
    lock_timeout: Duration,
}

impl Store {
    /// Builds a store over the given repositories (first = highest precedence).
    pub fn new(repos: Vec<Repository>) -> Result<Self> {
        let mut roots = BTreeSet::new();
        let mut names = BTreeSet::new();
        for r in &repos {
            if !names.insert(r.name.clone()) {
                return Err(StoreError::Config(format!("duplicate repository name {:?}", r.name)));
            }
            fs::create_dir_all(&r.root).map_err(io_err(&r.root))?;
            let canon = fs::canonicalize(&r.root).map_err(io_err(&r.root))?;
            if !roots.insert(canon) {
                return Err(StoreError::Config(format!(
                    "repository {:?} shares its root with another repository",
                    r.name
                )));
            }
        }
        if repos.is_empty() {
            return Err(StoreError::Config("no repositories configured".into()));
        }
        Ok(Store {
            repos,
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
        })
    }

    /// Single repository named `local` at `root`.
    pub fn single(root: impl Into<PathBuf>) -> Result<Self> {
        Store::new(vec![Repository {
            name: "local".into(),
            root: root.into(),
        }])
    }

    /// Reads a registration file `{"repos":[{"name":..,"root":..},..]}`.
    /// Relative roots resolve against the file's directory. A missing file is
    /// created with a single `local` repository beside it.
    pub fn open(config_path: &Path) -> Result<Self> {
        let base = config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let config = if config_path.exists() {
            let text = fs::read_to_string(config_path).map_err(io_err(config_path))?;
            serde_json::from_str::<RepoConfig>(&text).map_err(|source| StoreError::Json {
                path: config_path.to_owned(),
                source,
            })?
        } else {
            let config = RepoConfig {
                repos: vec![Repository {
                    name: "local".into(),
                    root: PathBuf::from("local"),
                }],
            };
            fs::create_dir_all(&base).map_err(io_err(&base))?;
            let value = serde_json::to_value(&config).expect("config serializes");
            atomic_write(config_path, &canonical::to_file_bytes(&value))?;
            config
        };
        let repos = config
            .repos
            .into_iter()
            .map(|r| Repository {
                root: if r.root.is_absolute() { r.root } else { base.join(r.root) },
                name: r.name,
            })
            .collect();
        Store::new(repos)
    }

    /// `$CKP_REPOS`, else `~/.ckp/repos.json`.
    pub fn open_default() -> Result<Self> {
        Store::open(&default_config_path()?)
    }

    pub fn with_lock_timeout(mut self, timeout: Duration) -> Self {
        self.lock_timeout = timeout;
        self
    }

    pub fn repositories(&self) -> &[Repository] {
        &self.repos
    }

    pub fn repository(&self, name: &str) -> Result<&Repository> {
        self.repos
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| StoreError::UnknownRepo(name.to_owned()))
    }

    /// The highest-precedence repository; default target for writes.
    pub fn primary(&self) -> &Repository {
        &self.repos[0]
    }

    /// Takes the writer lock of `repo`.
    pub fn lock(&self, repo: &Repository) -> Result<FileLock> {
        let path = repo.root.join(LOCK_FILE);
        FileLock::acquire(&path, self.lock_timeout).map_err(|e| match e {
            LockError::Timeout => StoreError::StoreBusy(repo.name.clone()),
            LockError::Io(source) => StoreError::StoreIoError { path, source },
        })
    }

    pub fn add_entry(
        &self,
        repo: &str,
        kind: ModuleKind,
        alias: Option<&str>,
        tags: &BTreeSet<String>,
        meta: Value,
    ) -> Result<ComponentEntry> {
        let repo = self.repository(repo)?;
        let alias = alias.map(Alias::from_str).transpose()?;
        ensure_object(&meta)?;
        let tags: BTreeSet<String> = tags.iter().map(|t| t.to_lowercase()).collect();

        let _guard = self.lock(repo)?;
        let kind_dir = repo.kind_dir(kind);
        fs::create_dir_all(&kind_dir).map_err(io_err(&kind_dir))?;
        let mut index = read_alias_index(&kind_dir)?;
        if let Some(a) = &alias {
            if index.contains_key(a.as_str()) {
                return Err(StoreError::AliasConflict {
                    repo: repo.name.clone(),
                    kind,
                    alias: a.to_string(),
                });
            }
        }
        let uid = loop {
            let candidate = Uid::generate();
            if !kind_dir.join(candidate.as_str()).exists() {
                break candidate;
            }
        };

        let staging = kind_dir.join(format!(".tmp-{uid}"));
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let header = EntryHeader {
            alias: alias.clone(),
            tags: tags.clone(),
            uid: uid.clone(),
        };
        let header = serde_json::to_value(&header).expect("header serializes");
        fs::write(staging.join(ENTRY_FILE), canonical::to_file_bytes(&header))
            .map_err(io_err(&staging))?;
        fs::write(staging.join(META_FILE), canonical::to_file_bytes(&meta))
            .map_err(io_err(&staging))?;
        let data_path = kind_dir.join(uid.as_str());
        fs::rename(&staging, &data_path).map_err(io_err(&data_path))?;

        if let Some(a) = &alias {
            index.insert(a.to_string(), uid.to_string());
            write_alias_index(&kind_dir, &index)?;
        }
        Ok(ComponentEntry {
            repo: repo.name.clone(),
            kind,
            id: EntryId { uid, alias },
            tags,
            meta: canonical_value(meta),
            data_path,
        })
    }

    /// Every matching entry, ordered by repository precedence then uid.
    pub fn find_entries(&self, query: &Query) -> Result<Vec<ComponentEntry>> {
        let mut out = Vec::new();
        for repo in &self.repos {
            let kind_dir = repo.kind_dir(query.kind);
            for uid in list_uids(&kind_dir)? {
                let Some(entry) = load_entry(repo, query.kind, &uid)? else {
                    continue;
                };
                let name_hit = query.pattern.matches(entry.id.uid.as_str())
                    || entry
                        .id
                        .alias
                        .as_ref()
                        .is_some_and(|a| query.pattern.matches(a.as_str()));
                if name_hit && query.tags.is_subset(&entry.tags) {
                    out.push(entry);
                }
            }
        }
        Ok(out)
    }

    /// First entry matching `r` in precedence order.
    pub fn get(&self, r: &EntryRef) -> Result<ComponentEntry> {
        for repo in &self.repos {
            if let Some(e) = self.get_in(repo, r)? {
                return Ok(e);
            }
        }
        Err(StoreError::NotFound(r.to_string()))
    }

    fn get_in(&self, repo: &Repository, r: &EntryRef) -> Result<Option<ComponentEntry>> {
        let kind_dir = repo.kind_dir(r.kind);
        let uid = if Uid::is_uid(&r.name) {
            r.name.clone()
        } else {
            match read_alias_index(&kind_dir)?.get(&r.name) {
                Some(u) => u.clone(),
                None => return Ok(None),
            }
        };
        load_entry(repo, r.kind, &uid)
    }

    /// Re-reads an entry from disk.
    pub fn reload(&self, entry: &ComponentEntry) -> Result<ComponentEntry> {
        let repo = self.repository(&entry.repo)?;
        load_entry(repo, entry.kind, entry.uid())?
            .ok_or_else(|| StoreError::NotFound(entry.uid_ref().to_string()))
    }

    /// Atomically replaces the meta document of an existing entry.
    pub fn update_meta(&self, entry: &ComponentEntry, new_meta: Value) -> Result<ComponentEntry> {
        if entry.kind == ModuleKind::Experiment {
            return Err(StoreError::Immutable(entry.kind.to_string()));
        }
        self.replace_meta(entry, new_meta)
    }

    pub(crate) fn replace_meta(
        &self,
        entry: &ComponentEntry,
        new_meta: Value,
    ) -> Result<ComponentEntry> {
        ensure_object(&new_meta)?;
        let repo = self.repository(&entry.repo)?;
        let _guard = self.lock(repo)?;
        let dir = repo.kind_dir(entry.kind).join(entry.uid());
        if !dir.join(ENTRY_FILE).is_file() {
            return Err(StoreError::NotFound(entry.uid_ref().to_string()));
        }
        atomic_write(&dir.join(META_FILE), &canonical::to_file_bytes(&new_meta))?;
        Ok(ComponentEntry {
            meta: canonical_value(new_meta),
            ..entry.clone()
        })
    }

    pub fn remove_entry(&self, entry: &ComponentEntry) -> Result<()> {
        let repo = self.repository(&entry.repo)?;
        let _guard = self.lock(repo)?;
        let kind_dir = repo.kind_dir(entry.kind);
        let dir = kind_dir.join(entry.uid());
        if !dir.join(ENTRY_FILE).is_file() {
            return Err(StoreError::NotFound(entry.uid_ref().to_string()));
        }
        let mut index = read_alias_index(&kind_dir)?;
        let before = index.len();
        index.retain(|_, uid| uid != entry.uid());
        if index.len() != before {
            write_alias_index(&kind_dir, &index)?;
        }
        // hide the entry with one rename, then delete the payload
        let trash = kind_dir.join(format!(".trash-{}", entry.uid()));
        fs::rename(&dir, &trash).map_err(io_err(&dir))?;
        fs::remove_dir_all(&trash).map_err(io_err(&trash))?;
        Ok(())
    }
}

pub fn default_config_path() -> Result<PathBuf> {
    if let Some(p) = std::env::var_os(REPOS_ENV) {
        return Ok(PathBuf::from(p));
    }
    let home = std::env::var_os("HOME")
        .ok_or_else(|| StoreError::Config(format!("neither {REPOS_ENV} nor HOME is set")))?;
    Ok(PathBuf::from(home).join(".ckp").join("repos.json"))
}

fn ensure_object(meta: &Value) -> Result<()> {
    if meta.is_object() {
        Ok(())
    } else {
        Err(StoreError::InvalidMeta(canonical::to_string(meta)))
    }
}

/// Normalizes a value to what a canonical save/load would return.
fn canonical_value(v: Value) -> Value {
    serde_json::from_str(&canonical::to_string(&v)).expect("canonical JSON re-parses")
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| StoreError::StoreIoError {
        path: path.to_owned(),
        source: e.error,
    })?;
    Ok(())
}

fn list_uids(kind_dir: &Path) -> Result<Vec<String>> {
    let rd = match fs::read_dir(kind_dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(kind_dir)(e)),
    };
    let mut uids = Vec::new();
    for item in rd {
        let item = item.map_err(io_err(kind_dir))?;
        if let Some(name) = item.file_name().to_str() {
            if Uid::is_uid(name) {
                uids.push(name.to_owned());
            }
        }
    }
    uids.sort();
    Ok(uids)
}

fn load_entry(repo: &Repository, kind: ModuleKind, uid: &str) -> Result<Option<ComponentEntry>> {
    let dir = repo.kind_dir(kind).join(uid);
    let header_path = dir.join(ENTRY_FILE);
    let header_text = match fs::read_to_string(&header_path) {
        Ok(t) => t,
        // removed concurrently or never existed
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(&header_path)(e)),
    };
    let header: EntryHeader =
        serde_json::from_str(&header_text).map_err(|source| StoreError::Json {
            path: header_path.clone(),
            source,
        })?;
    if header.uid.as_str() != uid {
        return Err(StoreError::InvalidUid(format!("{uid} (header says {})", header.uid)));
    }
    let meta_path = dir.join(META_FILE);
    let meta_text = match fs::read_to_string(&meta_path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(&meta_path)(e)),
    };
    let meta: Value = serde_json::from_str(&meta_text).map_err(|source| StoreError::Json {
        path: meta_path.clone(),
        source,
    })?;
    Ok(Some(ComponentEntry {
        repo: repo.name.clone(),
        kind,
        id: EntryId {
            uid: header.uid,
            alias: header.alias,
        },
        tags: header.tags,
        meta,
        data_path: dir,
    }))
}

/// Raw bytes of an entry's meta file, as stored.
pub fn read_meta_bytes(entry: &ComponentEntry) -> Result<Vec<u8>> {
    let p = entry.data_path.join(META_FILE);
    fs::read(&p).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => StoreError::NotFound(entry.uid_ref().to_string()),
        _ => io_err(&p)(e),
    })
}

fn read_alias_index(kind_dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = kind_dir.join(ALIAS_INDEX);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (alias, uid) = line
            .split_once(' ')
            .ok_or_else(|| StoreError::Config(format!("bad alias-index line {line:?} in {}", path.display())))?;
        map.insert(alias.to_owned(), uid.trim().to_owned());
    }
    Ok(map)
}

fn write_alias_index(kind_dir: &Path, index: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (alias, uid) in index {
        text.push_str(alias);
        text.push(' ');
        text.push_str(uid);
        text.push('\n');
    }
    atomic_write(&kind_dir.join(ALIAS_INDEX), text.as_bytes())
}
