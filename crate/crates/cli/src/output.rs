use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sole writer of the output directory; records every file for the manifest.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<OutputDir, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Output {
            path: root.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// Writes `manifest.json`: command, seed, version, config and input hashes
    /// and the hash of every output. No timestamps, so reruns are identical.
    pub fn finish(mut self, command: &str, cfg: &RunConfig, input_hash: Option<String>) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct OutputFile {
            file: String,
            sha256: String,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            tool: &'static str,
            version: &'static str,
            command: &'a str,
            seed: u64,
            config_sha256: String,
            input_sha256: Option<String>,
            outputs: Vec<OutputFile>,
            config: &'a RunConfig,
        }
        let config_json = serde_json::to_vec(cfg).expect("config serializes");
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            config_sha256: sha256_hex(&config_json),
            input_sha256: input_hash,
            outputs: self
                .written
                .iter()
                .map(|(file, sha256)| OutputFile {
                    file: file.clone(),
                    sha256: sha256.clone(),
                })
                .collect(),
            config: cfg,
        };
        let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        text.push(b'\n');
        self.write("manifest.json", &text)
    }
}

/// Collects CSV rows in memory.
pub fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>, CliError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), CliError>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    fill(&mut w)?;
    w.into_inner().map_err(|e| CliError::Output {
        path: "csv buffer".into(),
        message: e.to_string(),
    })
}

pub fn csv_error(e: csv::Error) -> CliError {
    CliError::Output {
        path: "csv buffer".into(),
        message: e.to_string(),
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
