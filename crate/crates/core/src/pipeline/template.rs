//! `${dep:<role>}`, `${choice:<key>}` and `${artifact:<name>}` placeholders.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placeholder {
    Dep(String),
    Choice(String),
    Artifact(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([a-z]+):([^}]*)\}").expect("static regex"))
}

/// Every placeholder in `template`; anything `${...}`-shaped that is not one
/// of the three forms is an error.
pub fn placeholders(template: &str) -> Result<Vec<Placeholder>, String> {
    let mut out = Vec::new();
    for c in placeholder_re().captures_iter(template) {
        let name = c[2].to_owned();
        out.push(match &c[1] {
            "dep" => Placeholder::Dep(name),
            "choice" => Placeholder::Choice(name),
            "artifact" => Placeholder::Artifact(name),
            other => return Err(format!("unknown placeholder namespace {other:?} in {template:?}")),
        });
    }
    let stripped = placeholder_re().replace_all(template, "");
    if stripped.contains("${") {
        return Err(format!("malformed placeholder in {template:?}"));
    }
    Ok(out)
}

/// Values available for substitution.
#[derive(Debug)]
pub struct Bindings<'a> {
    pub deps: BTreeMap<&'a str, String>,
    pub choices: &'a BTreeMap<String, String>,
    pub artifacts: BTreeMap<&'a str, String>,
}

/// Substitutes every placeholder; an unbound one is an error.
pub fn render(template: &str, b: &Bindings<'_>) -> Result<String, String> {
    placeholders(template)?;
    let mut missing = None;
    let rendered = placeholder_re().replace_all(template, |c: &regex::Captures<'_>| {
        let name = &c[2];
        let value = match &c[1] {
            "dep" => b.deps.get(name).cloned(),
            "choice" => b.choices.get(name).cloned(),
            _ => b.artifacts.get(name).cloned(),
        };
        value.unwrap_or_else(|| {
            missing.get_or_insert_with(|| c[0].to_owned());
            String::new()
        })
    });
    match missing {
        Some(m) => Err(format!("unbound placeholder {m} in {template:?}")),
        None => Ok(rendered.into_owned()),
    }
}
