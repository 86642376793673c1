#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

pub mod matrix;

pub const FIXTURE_REPO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/repo");

/// A private copy of the fixture repository plus scratch space; every `ckp`
/// invocation is pointed at it through the environment.
pub struct Sandbox {
    pub dir: tempfile::TempDir,
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    /// Parses stdout as exactly one JSON object.
    pub fn json(&self) -> Value {
        let v: Value = serde_json::from_str(self.stdout.trim_end())
            .unwrap_or_else(|e| panic!("stdout is not one JSON document ({e}):\n{}", self.stdout));
        assert!(v.is_object(), "stdout is not an object: {v}");
        assert_eq!(self.stdout.trim_end().lines().count(), 1, "more than one line on stdout");
        v
    }
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for item in fs::read_dir(from).unwrap() {
        let item = item.unwrap();
        let dest = to.join(item.file_name());
        if item.file_type().unwrap().is_dir() {
            copy_dir(&item.path(), &dest);
        } else {
            fs::copy(item.path(), &dest).unwrap();
        }
    }
}

impl Sandbox {
    pub fn empty() -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("repos.json"),
            r#"{"repos":[{"name":"local","root":"repo"}]}"#,
        )
        .unwrap();
        Sandbox { dir }
    }

    pub fn with_fixtures() -> Sandbox {
        let sb = Sandbox::empty();
        copy_dir(Path::new(FIXTURE_REPO), &sb.repo());
        sb
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn repo(&self) -> PathBuf {
        self.path().join("repo")
    }

    pub fn command(&self) -> Command {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ckp"));
        cmd.env("CKP_REPOS", self.path().join("repos.json"))
            .env("CKP_SCRATCH", self.path().join("scratch"))
            .env_remove("CKP_SEARCH_DIRS")
            .env_remove("RUST_LOG")
            .current_dir(self.path());
        cmd
    }

    pub fn ckp(&self, args: &[&str]) -> Output {
        let out = self.command().args(args).output().expect("spawn ckp");
        Output {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    /// Runs with `--json`, checks the exit-code rule and returns the object.
    pub fn json(&self, args: &[&str]) -> (i32, Value) {
        let mut all = args.to_vec();
        all.push("--json");
        let out = self.ckp(&all);
        let v = out.json();
        let has_error = v.get("error").is_some();
        assert_eq!(out.code == 0, !has_error, "exit {} vs {v} for {args:?}\nstderr: {}", out.code, out.stderr);
        (out.code, v)
    }

    /// `--json` invocation that must succeed.
    pub fn ok(&self, args: &[&str]) -> Value {
        let (code, v) = self.json(args);
        assert_eq!(code, 0, "{args:?} failed: {v}");
        v
    }

    pub fn write(&self, name: &str, content: &str) -> PathBuf {
        let p = self.path().join(name);
        fs::write(&p, content).unwrap();
        p
    }
}

/// Directory of the named entry inside the sandbox repository.
pub fn entry_dir(sb: &Sandbox, kind: &str, alias: &str) -> PathBuf {
    let index = fs::read_to_string(sb.repo().join(kind).join("alias-index")).unwrap();
    let uid = index
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{alias} ")))
        .unwrap_or_else(|| panic!("no {kind}:{alias}"));
    sb.repo().join(kind).join(uid.trim())
}
