//! Output directory layout: `fields/`, `models/`, `csv/` and a
//! `manifest.json` listing every artifact with its SHA-256.

use std::io::Write;
use std::path::{Path, PathBuf};

use pato_core::fieldio::{export_vtk, save_raw};
use pato_core::grid::ScalarField;
use pato_core::surrogate::{save_checkpoint, UNet};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const SUBDIRS: [&str; 3] = ["fields", "models", "csv"];

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Headered CSV, one row per record.
pub fn emit_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), CliError> {
    if rows.is_empty() {
        return Err(CliError::Data("nothing to emit".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    files: Vec<ManifestEntry>,
}

pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        for sub in SUBDIRS {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn track(&mut self, rel: String) -> PathBuf {
        let p = self.root.join(&rel);
        self.files.push(rel);
        p
    }

    pub fn field(&mut self, name: &str, f: &ScalarField) -> Result<String, CliError> {
        let rel = format!("fields/{name}.bin");
        let p = self.track(rel.clone());
        save_raw(&p, f)?;
        Ok(rel)
    }

    pub fn vtk(&mut self, name: &str, arrays: &[(&str, &ScalarField)]) -> Result<(), CliError> {
        let p = self.track(format!("fields/{name}.vtk"));
        export_vtk(&p, name, arrays)?;
        Ok(())
    }

    pub fn model(&mut self, name: &str, net: &UNet) -> Result<(), CliError> {
        let p = self.track(format!("models/{name}.bin"));
        save_checkpoint(&p, net)?;
        Ok(())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let mut buf = Vec::new();
        emit_csv(&mut buf, rows)?;
        let p = self.track(format!("csv/{name}.csv"));
        std::fs::write(&p, buf).map_err(|e| io_err(&p, e))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let p = self.track(format!("{name}.json"));
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))
    }

    /// Writes `manifest.json` over everything produced so far.
    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<(), CliError> {
        self.files.sort();
        self.files.dedup();
        let mut files = Vec::new();
        for rel in &self.files {
            let p = self.root.join(rel);
            let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
            files.push(ManifestEntry { path: rel.clone(), sha256: sha256_hex(&bytes) });
        }
        let canonical = serde_json::to_vec(cfg).map_err(|e| CliError::Data(e.to_string()))?;
        let m = Manifest {
            tool: "pato",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            config_sha256: sha256_hex(&canonical),
            files,
        };
        let p = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))
    }
}
