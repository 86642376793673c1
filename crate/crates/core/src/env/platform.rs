use serde::{Deserialize, Serialize};

use crate::canonical::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlatformFingerprint {
    pub os: String,
    pub architecture: String,
    /// First 16 hex chars of SHA-256(hostname).
    pub hostname_hash: String,
}

impl PlatformFingerprint {
    pub fn current() -> Self {
        PlatformFingerprint {
            os: std::env::consts::OS.to_owned(),
            architecture: std::env::consts::ARCH.to_owned(),
            hostname_hash: sha256_hex(hostname().as_bytes())[..16].to_owned(),
        }
    }

    /// Human-readable list of fields that differ.
    pub fn diff(&self, other: &PlatformFingerprint) -> Vec<String> {
        let mut out = Vec::new();
        for (name, a, b) in [
            ("os", &self.os, &other.os),
            ("architecture", &self.architecture, &other.architecture),
            ("hostname_hash", &self.hostname_hash, &other.hostname_hash),
        ] {
            if a != b {
                out.push(format!("{name} {a} -> {b}"));
            }
        }
        out
    }
}

fn hostname() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .or_else(|_| std::fs::read_to_string("/etc/hostname"))
        .map(|s| s.trim().to_owned())
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into())
}
