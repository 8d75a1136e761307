//! Output directory bookkeeping and error reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use fluidlab::datagen::encode_pgm;
use fluidlab::{FieldGrid, FluidError};

use crate::config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    code: u8,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>, code: u8) -> Self {
        Self { kind, message: message.into(), code }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("usage", message, 2)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message, 2)
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self::new("check_failed", message, 1)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new("io", format!("{}: {err}", path.display()), 3)
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind, "message": self.message } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<FluidError> for CliError {
    fn from(e: FluidError) -> Self {
        let (kind, code) = match &e {
            FluidError::Config(_) => ("config", 2),
            FluidError::Io(_) => ("io", 3),
            FluidError::Parse { .. } | FluidError::Json(_) => ("parse", 4),
            FluidError::Shape(_) => ("shape", 5),
            FluidError::NonFinite { .. } | FluidError::NanGradient { .. } => ("numeric", 6),
        };
        Self::new(kind, e.to_string(), code)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string(), 3)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            Self::new("io", e.to_string(), 3)
        } else {
            Self::new("parse", e.to_string(), 4)
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("parse", e.to_string(), 4)
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Input {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, Input>,
    artifacts: Vec<Artifact>,
    created_unix: u64,
}

/// One command's output directory. Every file written through it is
/// listed with its checksum in `manifest.json`.
pub struct Run {
    dir: PathBuf,
    command: &'static str,
    artifacts: Vec<String>,
    inputs: BTreeMap<String, Input>,
}

fn sha256_file(path: &Path) -> Result<(u64, String), CliError> {
    let data = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((data.len() as u64, hex::encode(Sha256::digest(&data))))
}

impl Run {
    pub fn create(dir: &Path, command: &'static str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), command, artifacts: Vec::new(), inputs: BTreeMap::new() })
    }

    /// Absolute location of `rel`, with parent directories created.
    pub fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn register(&mut self, rel: &str) -> Result<(), CliError> {
        if !self.artifacts.iter().any(|a| a == rel) {
            self.artifacts.push(rel.to_string());
        }
        Ok(())
    }

    pub fn bytes(&mut self, rel: &str, data: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel)?;
        std::fs::write(&p, data).map_err(|e| CliError::io(&p, e))?;
        self.register(rel)
    }

    pub fn csv<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<(), CliError> {
        let p = self.path(rel)?;
        let mut w = csv::Writer::from_path(&p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| CliError::io(&p, e))?;
        self.register(rel)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(rel, text.as_bytes())
    }

    pub fn pgm(&mut self, rel: &str, frame: &FieldGrid<f64>) -> Result<(), CliError> {
        let data = encode_pgm(frame)?;
        self.bytes(rel, &data)
    }

    /// Records the checksum of a file the command read.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let (_, sha256) = sha256_file(path)?;
        self.inputs.insert(label.to_string(), Input { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn finish(&self, cfg: &RunConfig) -> Result<(), CliError> {
        let mut artifacts = Vec::with_capacity(self.artifacts.len());
        for rel in &self.artifacts {
            let (bytes, sha256) = sha256_file(&self.dir.join(rel))?;
            artifacts.push(Artifact { path: rel.clone(), bytes, sha256 });
        }
        let created_unix =
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config: cfg,
            inputs: &self.inputs,
            artifacts,
            created_unix,
        };
        let p = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }
}

#[derive(serde::Deserialize)]
struct RolloutCsvRow {
    sequence: usize,
    step: usize,
    ssim: f64,
}

/// SSIM curves keyed by sequence, each ordered by step.
pub fn read_rollout_curves(path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let mut by_seq: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let r: RolloutCsvRow = row?;
        by_seq.entry(r.sequence).or_default().push((r.step, r.ssim));
    }
    if by_seq.is_empty() {
        return Err(CliError::new("parse", format!("{}: no rollout rows", path.display()), 4));
    }
    Ok(by_seq
        .into_values()
        .map(|mut v| {
            v.sort_by_key(|&(s, _)| s);
            v.into_iter().map(|(_, x)| x).collect()
        })
        .collect())
}
