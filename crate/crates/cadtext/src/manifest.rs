//! Run manifests: every CLI command writes one next to its outputs with
//! the resolved configuration, paths, seed, and wall-clock. The timing
//! field is the only part expected to differ between identical reruns.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self)?;
        use std::io::Write;
        writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Manifest path for a command whose primary output is `output`: a
/// sibling file `<output>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}
