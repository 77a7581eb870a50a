use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{io_error, CliError};

/// Embedded in every JSON output.
#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// SHA-256 over the config and every input file it pulled in.
    pub input_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    meta: &'a Meta,
    #[serde(flatten)]
    body: &'a T,
}

/// A run directory. Files are created once and never overwritten.
pub struct OutDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut f = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::OutputExists(path.clone())
                } else {
                    CliError::Io {
                        path: path.clone(),
                        source: e,
                    }
                }
            })?;
        f.write_all(text.as_bytes()).map_err(io_error(&path))?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// `body` must serialize to an object; `meta` is added alongside its fields.
    pub fn write_json<T: Serialize>(&mut self, name: &str, meta: &Meta, body: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(&Wrapped { meta, body }).expect("outputs serialize");
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}
