use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub module: &'static str,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(module: &'static str, name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            module,
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Default)]
pub struct Artifacts {
    pub files: Vec<(String, Vec<u8>)>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Artifacts {
    pub fn file(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.file(name, text);
    }

    pub fn check(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.pass).count()
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub version: &'static str,
    pub config: &'a ExperimentConfig,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub passed: bool,
    pub checks: &'a [Check],
    pub notes: &'a [String],
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Writes every artifact plus `manifest.json` into `dir`.
pub fn write_run(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    started_unix: f64,
    artifacts: &Artifacts,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(artifacts.files.len());
    for (name, contents) in &artifacts.files {
        std::fs::write(dir.join(name), contents)?;
        files.push(FileEntry {
            name: name.clone(),
            bytes: contents.len(),
            sha256: hex::encode(Sha256::digest(contents)),
        });
    }
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config,
        started_unix,
        finished_unix: unix_now(),
        passed: artifacts.failures() == 0,
        checks: &artifacts.checks,
        notes: &artifacts.notes,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)
}
