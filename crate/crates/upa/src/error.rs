use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] upa_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (lr {lr}, grad norm {grad_norm}, param norm {param_norm})")]
    Diverged {
        epoch: usize,
        step: usize,
        lr: f64,
        grad_norm: f64,
        param_norm: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset: offset as u64,
            message: msg.into(),
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(upa_core::Error::Config(_)) | Error::Config(_) => "config",
            Error::Core(upa_core::Error::Contract(_)) => "contract",
            Error::Core(upa_core::Error::Numeric(_)) => "numeric",
            Error::Core(_) => "shape",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Json(_) => "json",
            Error::Diverged { .. } => "diverged",
        }
    }

    /// Machine-readable form written to stderr by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        match self {
            Error::Parse { offset, .. } => v["error"]["offset"] = json!(offset),
            Error::Diverged {
                epoch,
                step,
                lr,
                grad_norm,
                param_norm,
            } => {
                v["error"]["diagnostics"] = json!({
                    "epoch": epoch, "step": step, "lr": lr,
                    "grad_norm": if grad_norm.is_finite() { json!(grad_norm) } else { json!(grad_norm.to_string()) },
                    "param_norm": if param_norm.is_finite() { json!(param_norm) } else { json!(param_norm.to_string()) },
                })
            }
            _ => {}
        }
        v
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
