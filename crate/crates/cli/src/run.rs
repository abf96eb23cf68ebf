//! Output directories, run manifests and the exit-code taxonomy.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "run_manifest.jsonl";

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or inputs that violate a precondition (exit 1).
    Usage(String),
    /// Unreadable or unwritable files (exit 2).
    Io(String),
    /// Divergence or non-finite results (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<cryodiff::Error> for CliError {
    fn from(e: cryodiff::Error) -> Self {
        use cryodiff::Error as E;
        let msg = e.to_string();
        match e {
            E::Io { .. }
            | E::Format(_)
            | E::UnsupportedMode(_)
            | E::Corrupt(_)
            | E::Checkpoint(_) => CliError::Io(msg),
            E::Numerical(_) => CliError::Numerical(msg),
            E::Precondition(_) | E::Shape(_) | E::Degenerate(_) | E::Json(_) => {
                CliError::Usage(msg)
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Parses a JSON config file; a missing file is an I/O failure, a malformed
/// one a config error.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<(T, Value)> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))?;
    let parsed = serde_json::from_value(value.clone())
        .map_err(|e| CliError::Usage(format!("{}: invalid config: {e}", path.display())))?;
    Ok((parsed, value))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct ManifestLine<'a> {
    command: &'a str,
    args: Vec<String>,
    config: &'a Value,
    seeds: &'a Value,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    wall_clock_s: f64,
    tool_version: &'static str,
}

/// A fresh output directory plus the bookkeeping for its manifest line.
pub struct RunDir {
    pub dir: PathBuf,
    command: String,
    started: Instant,
    config: Value,
    seeds: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    /// Creates `dir`, which must not exist yet or be empty.
    pub fn create(dir: &Path, command: &str) -> CliResult<Self> {
        if dir.exists() {
            let mut entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
            if entries.next().is_some() {
                return usage(format!(
                    "output directory {} is not empty; choose a fresh one",
                    dir.display()
                ));
            }
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            started: Instant::now(),
            config: Value::Null,
            seeds: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config(&mut self, config: Value) {
        self.config = config;
    }

    pub fn seeds(&mut self, seeds: Value) {
        self.seeds = seeds;
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Registers a produced file (relative to the run directory).
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.outputs.push(p.clone());
        p
    }

    /// Appends this run's line to the manifest.
    pub fn finish(self) -> CliResult<()> {
        let records = |paths: &[PathBuf]| -> CliResult<Vec<FileRecord>> {
            paths
                .iter()
                .filter(|p| p.is_file())
                .map(|p| {
                    Ok(FileRecord {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let line = ManifestLine {
            command: &self.command,
            args: std::env::args().collect(),
            config: &self.config,
            seeds: &self.seeds,
            inputs: records(&self.inputs)?,
            outputs: records(&self.outputs)?,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        let path = self.path(MANIFEST_NAME);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let text = serde_json::to_string(&line).expect("manifest serializes");
        writeln!(file, "{text}").map_err(|e| io_err(&path, e))
    }
}
