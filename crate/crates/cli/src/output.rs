//! Output directory handling and the run manifest.

use crate::error::{CliError, CliResult};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-channel normalization applied to PNG inputs (CIFAR-100 statistics).
pub const PNG_MEAN: [f32; 3] = [0.5071, 0.4865, 0.4409];
pub const PNG_STD: [f32; 3] = [0.2673, 0.2564, 0.2762];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
    /// Deterministic files are byte-identical across reruns with equal seeds.
    pub deterministic: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Written next to every set of output files.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub png_normalization: Normalization,
    pub outputs: Vec<OutputEntry>,
}

/// Collects output files for one command invocation. Without a directory
/// nothing is written.
pub struct Outputs {
    dir: Option<PathBuf>,
    command: String,
    config: serde_json::Value,
    entries: Vec<OutputEntry>,
}

impl Outputs {
    pub fn new(dir: Option<&Path>, command: &str, config: impl Serialize) -> CliResult<Self> {
        if let Some(d) = dir {
            fs::create_dir_all(d)
                .map_err(|e| CliError::Io(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            entries: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.write_file(name, bytes, true)
    }

    /// Files holding wall-clock measurements.
    pub fn write_nondeterministic(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.write_file(name, bytes, false)
    }

    fn write_file(&mut self, name: &str, bytes: &[u8], deterministic: bool) -> CliResult<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(name);
        fs::write(&path, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.entries.push(OutputEntry {
            file: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
            deterministic,
        });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Write `manifest.json` listing every file written so far.
    pub fn finish(self) -> CliResult<()> {
        let Some(dir) = self.dir else {
            return Ok(());
        };
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: self.config,
            png_normalization: Normalization {
                mean: PNG_MEAN,
                std: PNG_STD,
            },
            outputs: self.entries,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // writing to a Vec cannot fail
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}

/// Render rows as an aligned text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
