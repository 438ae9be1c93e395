use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fairprice_core::persist;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] fairprice_core::Error),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io_error",
            CliError::Core(e) => e.code(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `{"error": {"code": ..., "message": ...}}`
    pub fn to_json(&self) -> String {
        serde_json::json!({"error": {"code": self.code(), "message": self.to_string()}}).to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Resolves user paths against `--workdir`.
#[derive(Debug, Clone)]
pub struct Workdir(PathBuf);

impl Workdir {
    pub fn new(root: PathBuf) -> Self {
        Workdir(root)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.0.join(path)
        }
    }
}

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Writes through a sibling temp file renamed into place, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// SHA-256 over git blob framing (`blob <len>\0` followed by the bytes).
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Provenance of one command invocation. Every output of the command is
/// listed here and the manifest sits in the same directory as the outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path as given, to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    /// Only with `--timings`; omitted so reruns stay byte-identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

pub const MANIFEST_KIND: &str = "run_manifest";

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seeds: Vec<u64>) -> CliResult<Self> {
        Ok(RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).map_err(fairprice_core::Error::from)?,
            seeds,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            wall_clock_seconds: None,
        })
    }

    pub fn add_input(&mut self, label: &Path, bytes: &[u8]) {
        self.inputs.insert(label.display().to_string(), content_hash(bytes));
    }

    /// Writes `contents` atomically and records `label` as an output.
    pub fn write_output(&mut self, path: &Path, label: &str, contents: &[u8]) -> CliResult<()> {
        write_atomic(path, contents)?;
        self.outputs.push(label.to_string());
        Ok(())
    }

    pub fn finish(mut self, path: &Path, started: Option<Instant>) -> CliResult<()> {
        self.wall_clock_seconds = started.map(|t| t.elapsed().as_secs_f64());
        write_atomic(path, persist::to_json(MANIFEST_KIND, &self)?.as_bytes())
    }
}
