use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

use resnet_ac_core::ExperimentConfig;

/// `manifest.json`: what was run, with which seeds, and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: ExperimentConfig,
    pub plant_seed: u64,
    pub weight_seeds: Vec<u64>,
    pub threads: Option<usize>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, weight_seeds: Vec<u64>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.clone(),
            plant_seed: config.plant_seed,
            weight_seeds,
            threads: None,
            outputs: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest.json` into `out` after checking every listed output
    /// exists.
    pub fn finish(mut self, out: &Path, start: Instant) -> anyhow::Result<()> {
        for p in &self.outputs {
            anyhow::ensure!(
                p.is_file(),
                "expected output {} was not written",
                p.display()
            );
        }
        let path = out.join("manifest.json");
        self.outputs.push(path.clone());
        self.wall_clock_s = start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
