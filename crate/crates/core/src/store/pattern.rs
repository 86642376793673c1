use super::StoreError;

/// Name pattern where `*` matches any run of characters, anchored at both ends.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamePattern {
    raw: String,
    parts: Vec<String>,
}

impl NamePattern {
    pub fn any() -> Self {
        NamePattern::parse("*").expect("`*` is a valid pattern")
    }

    /// Accepts the alias alphabet plus `*`.
    pub fn parse(raw: &str) -> Result<Self, StoreError> {
        if raw.is_empty() {
            return Err(StoreError::InvalidQuery("empty name pattern".into()));
        }
        if let Some(c) = raw
            .chars()
            .find(|c| !matches!(c, 'a'..='z' | '0'..='9' | '-' | '.' | '_' | '*'))
        {
            return Err(StoreError::InvalidQuery(format!(
                "character {c:?} not allowed in pattern {raw:?}"
            )));
        }
        Ok(NamePattern {
            raw: raw.to_owned(),
            parts: raw.split('*').map(str::to_owned).collect(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, name: &str) -> bool {
        glob_match(&self.parts, name)
    }
}

/// `parts` is the pattern split on `*`; a single part means no wildcard.
pub(crate) fn glob_match<S: AsRef<str>>(parts: &[S], name: &str) -> bool {
    let (first, rest) = match parts.split_first() {
        Some(p) => p,
        None => return name.is_empty(),
    };
    let Some(mut remaining) = name.strip_prefix(first.as_ref()) else {
        return false;
    };
    let Some((last, middle)) = rest.split_last() else {
        return remaining.is_empty();
    };
    for part in middle {
        match remaining.find(part.as_ref()) {
            Some(pos) => remaining = &remaining[pos + part.as_ref().len()..],
            None => return false,
        }
    }
    remaining.len() >= last.as_ref().len() && remaining.ends_with(last.as_ref())
}

/// Wildcard match for arbitrary strings (used for file-name candidates).
pub fn wildcard_match(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    glob_match(&parts, name)
}
