use serde_json::{json, Map, Value};

use ckp_core::autotune::AutotuneError;
use ckp_core::env::EnvError;
use ckp_core::experiment::ExperimentError;
use ckp_core::package::PackageError;
use ckp_core::pipeline::PipelineError;
use ckp_core::report::ReportError;
use ckp_core::store::StoreError;

pub const EXIT_OPERATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// An error as surfaced to the user: a stable code, a message, the exit
/// status, and optional extra fields for the JSON error object.
#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit: i32,
    pub extra: Map<String, Value>,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: "usage".into(),
            message: message.into(),
            exit: EXIT_USAGE,
            extra: Map::new(),
        }
    }

    pub fn operation(code: &str, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
            exit: EXIT_OPERATION,
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.extra.insert(key.into(), value);
        self
    }

    pub fn to_json(&self) -> Value {
        let mut err = Map::new();
        err.insert("code".into(), json!(self.code));
        err.insert("message".into(), json!(self.message));
        for (k, v) in &self.extra {
            err.insert(k.clone(), v.clone());
        }
        json!({ "error": err })
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::operation(e.code(), e.to_string())
            }
        }
    )*};
}

coded!(StoreError, EnvError, PackageError, PipelineError, ExperimentError, AutotuneError, ReportError);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::operation("io_error", e.to_string())
    }
}
