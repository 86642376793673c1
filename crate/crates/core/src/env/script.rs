use std::collections::HashMap;
use std::fmt::Write;

use super::{DetectedEnv, EnvError};

/// POSIX `export` lines for each env's settings, preceded by a header comment
/// per env. Fails when two envs assign different values to one variable.
pub fn emit_env_script(envs: &[DetectedEnv]) -> Result<String, EnvError> {
    let mut seen: HashMap<&str, (&str, &str)> = HashMap::new();
    for e in envs {
        for (name, value) in &e.env_settings {
            match seen.get(name.as_str()) {
                Some((prev_value, prev_soft)) if *prev_value != value => {
                    return Err(EnvError::EnvConflict {
                        variable: name.clone(),
                        first: (*prev_soft).to_owned(),
                        second: e.soft_name.clone(),
                    });
                }
                Some(_) => {}
                None => {
                    seen.insert(name, (value, &e.soft_name));
                }
            }
        }
    }

    let mut out = String::new();
    for e in envs {
        writeln!(out, "# {} {}", e.soft_name, e.version).unwrap();
        for (name, value) in &e.env_settings {
            writeln!(out, "export {name}=\"{}\"", escape(value)).unwrap();
        }
    }
    Ok(out)
}

fn escape(value: &str) -> String {
    let mut s = String::with_capacity(value.len());
    for c in value.chars() {
        if matches!(c, '"' | '\\' | '$' | '`') {
            s.push('\\');
        }
        s.push(c);
    }
    s
}
