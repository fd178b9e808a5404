use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Everything needed to rerun a command: written before any other output.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub arguments: Vec<String>,
    pub config_path: Option<&'a Path>,
    pub data_path: Option<&'a Path>,
    pub seed: u64,
    /// The effective configuration after command-line overrides.
    pub config: &'a C,
    pub output_dir: &'a Path,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
}

impl<'a, C: Serialize> RunManifest<'a, C> {
    pub fn new(command: &'a str, seed: u64, config: &'a C, output_dir: &'a Path) -> Self {
        RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            arguments: std::env::args().collect(),
            config_path: None,
            data_path: None,
            seed,
            config,
            output_dir,
            started_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(self.output_dir).map_err(|e| anyhow::anyhow!("{}: {e}", self.output_dir.display()))?;
        let path = self.output_dir.join("manifest.json");
        crowdcal::data_io::export_json(self, &path)?;
        Ok(path)
    }
}
