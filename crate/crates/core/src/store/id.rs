use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::StoreError;

pub const UID_LEN: usize = 16;

/// 16 lowercase hex characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Uid(String);

impl Uid {
    /// 8 random bytes, hex encoded.
    pub fn generate() -> Self {
        let mut bytes = [0u8; UID_LEN / 2];
        rand::thread_rng().fill_bytes(&mut bytes);
        Uid(hex::encode(bytes))
    }

    pub fn is_uid(s: &str) -> bool {
        s.len() == UID_LEN && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Uid {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if Uid::is_uid(s) {
            Ok(Uid(s.to_owned()))
        } else {
            Err(StoreError::InvalidUid(s.to_owned()))
        }
    }
}

impl TryFrom<String> for Uid {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Uid> for String {
    fn from(u: Uid) -> String {
        u.0
    }
}

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Human-readable slug: `[a-z0-9._-]+`, never uid-shaped.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alias(String);

impl Alias {
    pub fn is_valid(s: &str) -> bool {
        !s.is_empty()
            && s.bytes()
                .all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_'))
            && !Uid::is_uid(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for Alias {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if Alias::is_valid(s) {
            Ok(Alias(s.to_owned()))
        } else {
            Err(StoreError::InvalidAlias(s.to_owned()))
        }
    }
}

impl TryFrom<String> for Alias {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Alias> for String {
    fn from(a: Alias) -> String {
        a.0
    }
}

impl fmt::Display for Alias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryId {
    pub uid: Uid,
    pub alias: Option<Alias>,
}

impl EntryId {
    /// Alias when present, otherwise the uid.
    pub fn display_name(&self) -> &str {
        self.alias.as_ref().map_or(self.uid.as_str(), Alias::as_str)
    }
}
