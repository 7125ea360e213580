//! Serialization of results and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Rows as CSV with a header, `,` separators and LF line endings.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    Ok(writer.into_inner().map_err(|e| e.into_error())?)
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// A file produced by a run.
#[derive(Debug, Serialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Everything needed to reproduce a run. Only `wall_clock_unix_ms` varies
/// between repeated runs.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: C,
    pub wall_clock_unix_ms: u128,
    pub outputs: Vec<OutputDigest>,
}

/// Collects output files and writes them, followed by the manifest.
pub struct Sink {
    outputs: Vec<OutputDigest>,
}

impl Sink {
    pub fn new() -> Self {
        Self { outputs: Vec::new() }
    }

    /// Writes `bytes` to `path`, or to stdout when `path` is `None`.
    pub fn emit(&mut self, path: Option<&Path>, bytes: &[u8]) -> Result<()> {
        match path {
            Some(path) => {
                fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
                self.outputs.push(OutputDigest {
                    path: path.display().to_string(),
                    sha256: hex::encode(Sha256::digest(bytes)),
                    bytes: bytes.len(),
                });
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(bytes)?;
                stdout.flush()?;
            }
        }
        Ok(())
    }

    /// Writes `<out>.manifest.json` when there is a primary output file.
    pub fn finish<C: Serialize>(self, out: Option<&Path>, command: &'static str, config: C) -> Result<()> {
        let Some(out) = out else { return Ok(()) };
        let manifest = RunManifest {
            tool: "qnetlab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            wall_clock_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            outputs: self.outputs,
        };
        let path = manifest_path(out);
        fs::write(&path, json_bytes(&manifest)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
