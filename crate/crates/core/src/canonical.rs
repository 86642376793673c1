//! Canonical JSON encoding.
//!
//! Objects are written with keys sorted by code point, no insignificant
//! whitespace, and a single trailing LF. The encoding is independent of the
//! key order of the in-memory [`serde_json::Map`].

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Encodes `value` canonically, without the trailing newline.
pub fn to_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value);
    out
}

/// Canonical bytes as stored on disk: the canonical encoding plus LF.
pub fn to_file_bytes(value: &Value) -> Vec<u8> {
    let mut s = to_string(value);
    s.push('\n');
    s.into_bytes()
}

/// Serializes any `Serialize` type through `Value` and then canonically.
pub fn encode<T: Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(to_string(&serde_json::to_value(value)?))
}

/// Re-encodes arbitrary JSON text in canonical form.
pub fn canonicalize(text: &str) -> serde_json::Result<String> {
    let v: Value = serde_json::from_str(text)?;
    Ok(to_string(&v))
}

/// Lowercase hex SHA-256 of the canonical encoding of `value`.
pub fn content_hash(value: &Value) -> String {
    sha256_hex(to_string(value).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_value(out: &mut String, value: &Value) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(out, k);
                out.push(':');
                write_value(out, &map[k.as_str()]);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::String(s) => write_string(out, s),
        // scalars: serde_json already produces the shortest round-tripping form
        other => out.push_str(&other.to_string()),
    }
}

fn write_string(out: &mut String, s: &str) {
    out.push_str(&Value::String(s.to_owned()).to_string());
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_keys_recursively() {
        let v = json!({"b": 1, "a": {"z": [3, {"y": 1, "x": 2}], "c": null}});
        assert_eq!(to_string(&v), r#"{"a":{"c":null,"z":[3,{"x":2,"y":1}]},"b":1}"#);
    }

    #[test]
    fn code_point_order_not_locale() {
        let v = json!({"a": 1, "B": 2, "é": 3, "_": 4});
        assert_eq!(to_string(&v), r#"{"B":2,"_":4,"a":1,"é":3}"#);
    }

    #[test]
    fn file_bytes_end_with_single_lf() {
        let bytes = to_file_bytes(&json!({}));
        assert_eq!(bytes, b"{}\n");
    }

    #[test]
    fn floats_round_trip() {
        let v = json!({"f": 0.1, "g": 1.0, "h": -2.5e-300});
        let once = to_string(&v);
        let twice = canonicalize(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
