//! Artifact writing. Every CSV starts with a `# config_hash=..., seed=...`
//! line; every JSON report wraps its payload with the same two fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

pub struct Artifacts {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Wrapped<'a, R: Serialize> {
    config_hash: &'a str,
    seed: u64,
    report: &'a R,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    files: &'a [String],
    timestamp: String,
}

impl Artifacts {
    pub fn new(dir: PathBuf, config_hash: String, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Artifacts {
            dir,
            config_hash,
            seed,
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv<R>(&mut self, name: &str, header: &[String], rows: R) -> Result<(), CliError>
    where
        R: IntoIterator<Item = Vec<String>>,
    {
        let path = self.path(name);
        let io = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        let mut file = fs::File::create(&path).map_err(io)?;
        writeln!(file, "# config_hash={}, seed={}", self.config_hash, self.seed).map_err(io)?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| CliError::Csv {
            path: path.clone(),
            message: e.to_string(),
        };
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn json<R: Serialize>(&mut self, name: &str, report: &R) -> Result<(), CliError> {
        let path = self.path(name);
        let wrapped = Wrapped {
            config_hash: &self.config_hash,
            seed: self.seed,
            report,
        };
        write_json(&path, &wrapped)
    }

    /// Lists the files written so far; the only place a timestamp appears.
    pub fn finish(self, command: &str) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            tool: "bsvie",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: &self.config_hash,
            seed: self.seed,
            files: &self.files,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let path = self.dir.join("manifest.json");
        write_json(&path, &manifest)?;
        Ok(self.dir)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Shortest representation that reads back to the same `f64`, switching to
/// exponent form for very small or large magnitudes.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
