use std::collections::BTreeMap;

use ckp_core::store::{EntryRef, ModuleKind, NamePattern};

use crate::error::CliError;

/// `<kind>[:<entry>]`.
#[derive(Debug, Clone)]
pub struct Target {
    pub kind: ModuleKind,
    pub name: Option<String>,
}

impl Target {
    pub fn parse(raw: &str) -> Result<Target, CliError> {
        let (kind, name) = match raw.split_once(':') {
            Some((k, n)) => (k, Some(n.to_owned())),
            None => (raw, None),
        };
        let kind = kind
            .parse::<ModuleKind>()
            .map_err(|_| CliError::usage(format!("unknown module kind {kind:?} in target {raw:?}")))?;
        if name.as_deref() == Some("") {
            return Err(CliError::usage(format!("empty entry name in target {raw:?}")));
        }
        Ok(Target { kind, name })
    }

    pub fn expect_kind(&self, kinds: &[ModuleKind]) -> Result<&Self, CliError> {
        if kinds.contains(&self.kind) {
            Ok(self)
        } else {
            let names: Vec<&str> = kinds.iter().map(|k| k.as_str()).collect();
            Err(CliError::usage(format!("this verb takes a {} target", names.join(" or "))))
        }
    }

    /// The entry reference; the name is mandatory and may not be a pattern.
    pub fn entry(&self) -> Result<EntryRef, CliError> {
        let name = self
            .name
            .as_deref()
            .ok_or_else(|| CliError::usage(format!("target needs an entry: {}:<uid-or-alias>", self.kind)))?;
        format!("{}:{name}", self.kind)
            .parse()
            .map_err(|e: ckp_core::store::StoreError| CliError::usage(e.to_string()))
    }

    pub fn pattern(&self) -> Result<NamePattern, CliError> {
        match &self.name {
            None => Ok(NamePattern::any()),
            Some(p) => NamePattern::parse(p).map_err(|e| CliError::usage(e.to_string())),
        }
    }
}

/// Ordered `key=value` pairs; keys may repeat.
#[derive(Debug, Clone, Default)]
pub struct Pairs(pub Vec<(String, String)>);

impl Pairs {
    pub fn parse(raw: &[String]) -> Result<Pairs, CliError> {
        raw.iter()
            .map(|s| match s.split_once('=') {
                Some((k, v)) if !k.is_empty() => Ok((k.to_owned(), v.to_owned())),
                _ => Err(CliError::usage(format!("expected key=value, got {s:?}"))),
            })
            .collect::<Result<_, _>>()
            .map(Pairs)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn all(&self, key: &str) -> Vec<&str> {
        self.0.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::usage(format!("missing {key}=<value>")))
    }

    /// Rejects keys outside `allowed`; a trailing `.` admits a prefix.
    pub fn only(&self, allowed: &[&str]) -> Result<&Self, CliError> {
        for (k, _) in &self.0 {
            let ok = allowed
                .iter()
                .any(|a| a == k || (a.ends_with('.') && k.starts_with(a) && k.len() > a.len()));
            if !ok {
                return Err(CliError::usage(format!(
                    "unexpected argument {k:?}; accepted: {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(self)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.0.iter().cloned().collect()
    }
}
