use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// A table of rows written as CSV; numbers use `Display`, which round-trips
/// and does not depend on the platform.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn push_numbers(&mut self, row: &[f64]) {
        self.push(row.iter().map(f64::to_string).collect());
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(&self.header).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(CliError::io(path))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Collects output files and stage timings for the manifest.
pub struct RunLog {
    pub out_dir: PathBuf,
    files: Vec<String>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl RunLog {
    pub fn new(out_dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let t = Instant::now();
        let out = f()?;
        *self.timings.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
        Ok(out)
    }

    pub fn table(&mut self, name: &str, table: &Table) -> CliResult<()> {
        table.write(&self.out_dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        write_json(&self.out_dir.join(name), value)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json`: config hash, versions, outputs and wall times.
    pub fn finish(mut self, config: &RunConfig) -> CliResult<()> {
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let manifest = Manifest {
            experiment: config.experiment.name(),
            seed: config.seed,
            config_sha256: config_hash(config),
            versions: BTreeMap::from([
                ("kme-decon", kme_decon_version()),
                ("kme-decon-cli", env!("CARGO_PKG_VERSION")),
            ]),
            files: self.files,
            wall_seconds: self.timings,
        };
        write_json(&self.out_dir.join("manifest.json"), &manifest)
    }
}

#[derive(Serialize)]
struct Manifest {
    experiment: &'static str,
    seed: u64,
    config_sha256: String,
    versions: BTreeMap<&'static str, &'static str>,
    files: Vec<String>,
    wall_seconds: BTreeMap<String, f64>,
}

fn kme_decon_version() -> &'static str {
    // Both crates share the workspace version.
    env!("CARGO_PKG_VERSION")
}

/// SHA-256 of the resolved config in its canonical JSON form. The output
/// directory is left out so that reruns elsewhere hash the same.
pub fn config_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.out_dir = PathBuf::new();
    let digest = Sha256::digest(c.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
