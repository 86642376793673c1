use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EnvError;

/// One dot/dash-separated component of a version.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum VersionPart {
    /// Decimal digits without leading zeros (`"0"` for zero). Kept as text so
    /// arbitrarily long numeric runs compare exactly.
    Num(String),
    Str(String),
}

impl VersionPart {
    fn parse(piece: &str) -> VersionPart {
        if piece.bytes().all(|b| b.is_ascii_digit()) {
            let trimmed = piece.trim_start_matches('0');
            VersionPart::Num(if trimmed.is_empty() { "0".into() } else { trimmed.into() })
        } else {
            VersionPart::Str(piece.to_lowercase())
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            VersionPart::Num(n) => n.parse().ok(),
            VersionPart::Str(_) => None,
        }
    }
}

impl Ord for VersionPart {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (VersionPart::Num(a), VersionPart::Num(b)) => {
                a.len().cmp(&b.len()).then_with(|| a.cmp(b))
            }
            // a numeric release outranks a tagged one at the same position
            (VersionPart::Num(_), VersionPart::Str(_)) => Ordering::Greater,
            (VersionPart::Str(_), VersionPart::Num(_)) => Ordering::Less,
            (VersionPart::Str(a), VersionPart::Str(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for VersionPart {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VersionPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionPart::Num(n) | VersionPart::Str(n) => f.write_str(n),
        }
    }
}

/// Totally ordered version: component-wise, with a longer version outranking
/// its own prefix (`3.3.1 > 3.3`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Version {
    parts: Vec<VersionPart>,
}

impl Version {
    pub fn parts(&self) -> &[VersionPart] {
        &self.parts
    }

    pub fn from_numbers(nums: &[u64]) -> Version {
        Version {
            parts: nums.iter().map(|n| VersionPart::Num(n.to_string())).collect(),
        }
    }
}

/// Splits on `.` and `-`; digit-only pieces become integers, the rest
/// lowercase strings. Empty pieces are dropped.
pub fn parse_version(text: &str) -> Result<Version, EnvError> {
    let parts: Vec<VersionPart> = text
        .trim()
        .split(['.', '-'])
        .filter(|p| !p.is_empty())
        .map(VersionPart::parse)
        .collect();
    if parts.is_empty() {
        return Err(EnvError::InvalidVersion(text.to_owned()));
    }
    Ok(Version { parts })
}

impl Ord for Version {
    fn cmp(&self, other: &Self) -> Ordering {
        // slice ordering is lexicographic with the shorter prefix first
        self.parts.as_slice().cmp(other.parts.as_slice())
    }
}

impl PartialOrd for Version {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl FromStr for Version {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_version(s)
    }
}

impl TryFrom<String> for Version {
    type Error = EnvError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        parse_version(&s)
    }
}

impl From<Version> for String {
    fn from(v: Version) -> String {
        v.to_string()
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.parts.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// Inclusive bounds, or an exact pin.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawConstraint")]
pub struct VersionConstraint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<Version>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<Version>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<Version>,
}

#[derive(Deserialize)]
struct RawConstraint {
    #[serde(default)]
    min: Option<Version>,
    #[serde(default)]
    max: Option<Version>,
    #[serde(default)]
    exact: Option<Version>,
}

impl TryFrom<RawConstraint> for VersionConstraint {
    type Error = EnvError;
    fn try_from(r: RawConstraint) -> Result<Self, Self::Error> {
        VersionConstraint::new(r.min, r.max, r.exact)
    }
}

impl VersionConstraint {
    pub fn any() -> Self {
        VersionConstraint::default()
    }

    pub fn new(
        min: Option<Version>,
        max: Option<Version>,
        exact: Option<Version>,
    ) -> Result<Self, EnvError> {
        if exact.is_some() && (min.is_some() || max.is_some()) {
            return Err(EnvError::InvalidConstraint(
                "exact cannot be combined with min/max".into(),
            ));
        }
        if let (Some(lo), Some(hi)) = (&min, &max) {
            if lo > hi {
                return Err(EnvError::InvalidConstraint(format!("min {lo} > max {hi}")));
            }
        }
        Ok(VersionConstraint { min, max, exact })
    }

    pub fn min(v: Version) -> Self {
        VersionConstraint { min: Some(v), ..Default::default() }
    }

    pub fn exact(v: Version) -> Self {
        VersionConstraint { exact: Some(v), ..Default::default() }
    }

    pub fn is_satisfied_by(&self, v: &Version) -> bool {
        if let Some(e) = &self.exact {
            return v == e;
        }
        self.min.as_ref().is_none_or(|lo| v >= lo) && self.max.as_ref().is_none_or(|hi| v <= hi)
    }
}

impl fmt::Display for VersionConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.exact, &self.min, &self.max) {
            (Some(e), _, _) => write!(f, "=={e}"),
            (None, Some(lo), Some(hi)) => write!(f, ">={lo},<={hi}"),
            (None, Some(lo), None) => write!(f, ">={lo}"),
            (None, None, Some(hi)) => write!(f, "<={hi}"),
            (None, None, None) => f.write_str("any"),
        }
    }
}
