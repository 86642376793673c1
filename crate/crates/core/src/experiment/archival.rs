use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::canonical;
use crate::store::{EntryRef, Store, StoreError};

/// Components making up an artifact and where it is archived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchivalManifest {
    pub components: Vec<EntryRef>,
    #[serde(default)]
    pub archive: Option<String>,
    #[serde(default)]
    pub content_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchivalCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchivalReport {
    pub checks: Vec<ArchivalCheck>,
    /// Hash of the referenced components as currently stored, when all exist.
    pub computed_hash: Option<String>,
    pub pass: bool,
}

fn doi_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(doi:)?10\.\d{4,9}/\S+$").expect("static regex"))
}

/// A DOI (`10.NNNN/suffix`, optionally `doi:`-prefixed) or an absolute
/// http(s) URL with a host.
pub fn is_archive_identifier(s: &str) -> bool {
    if doi_re().is_match(s) {
        return true;
    }
    match url::Url::parse(s) {
        Ok(u) => matches!(u.scheme(), "http" | "https") && u.host_str().is_some_and(|h| !h.is_empty()),
        Err(_) => false,
    }
}

/// SHA-256 over `kind:uid\n` followed by the canonical meta, for each
/// component in sorted uid-reference order.
pub fn manifest_hash(store: &Store, components: &[EntryRef]) -> Result<String, ExperimentError> {
    let mut parts = Vec::new();
    for r in components {
        let e = store.get(r)?;
        parts.push((e.uid_ref().to_string(), canonical::to_string(&e.meta)));
    }
    parts.sort();
    parts.dedup();
    let mut buf = String::new();
    for (r, meta) in parts {
        buf.push_str(&r);
        buf.push('\n');
        buf.push_str(&meta);
        buf.push('\n');
    }
    Ok(canonical::sha256_hex(buf.as_bytes()))
}

/// Offline checks: components exist, the content hash matches, and the
/// archive identifier is present and well-formed. No network access.
pub fn check_archival(store: &Store, m: &ArchivalManifest) -> Result<ArchivalReport, ExperimentError> {
    if m.components.is_empty() {
        return Err(ExperimentError::InvalidManifest("no components listed".into()));
    }
    let mut missing = Vec::new();
    for r in &m.components {
        match store.get(r) {
            Ok(_) => {}
            Err(StoreError::NotFound(_)) => missing.push(r.to_string()),
            Err(e) => return Err(e.into()),
        }
    }
    let mut checks = vec![ArchivalCheck {
        name: "components_exist".into(),
        pass: missing.is_empty(),
        detail: if missing.is_empty() {
            format!("{} components present", m.components.len())
        } else {
            format!("missing: {}", missing.join(", "))
        },
    }];

    let computed = if missing.is_empty() {
        Some(manifest_hash(store, &m.components)?)
    } else {
        None
    };
    checks.push(match (&m.content_hash, &computed) {
        (None, _) => ArchivalCheck {
            name: "content_hash".into(),
            pass: false,
            detail: "manifest has no content_hash".into(),
        },
        (Some(_), None) => ArchivalCheck {
            name: "content_hash".into(),
            pass: false,
            detail: "cannot hash missing components".into(),
        },
        (Some(want), Some(got)) => ArchivalCheck {
            name: "content_hash".into(),
            pass: want == got,
            detail: if want == got {
                "matches".into()
            } else {
                format!("expected {want}, stored components hash to {got}")
            },
        },
    });

    checks.push(match &m.archive {
        None => ArchivalCheck {
            name: "archive_identifier".into(),
            pass: false,
            detail: "no archive identifier".into(),
        },
        Some(id) => ArchivalCheck {
            name: "archive_identifier".into(),
            pass: is_archive_identifier(id),
            detail: if is_archive_identifier(id) {
                id.clone()
            } else {
                format!("{id:?} is neither a DOI nor an http(s) URL")
            },
        },
    });
    let pass = checks.iter().all(|c| c.pass);
    Ok(ArchivalReport {
        checks,
        computed_hash: computed,
        pass,
    })
}
