//! Per-command record of what ran, on which inputs, producing what.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mdqf::protocols::ExperimentConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: ExperimentConfig,
    pub config_file: Option<PathBuf>,
    /// Seeds actually in effect after `--seed`.
    pub seeds: BTreeMap<&'static str, u64>,
    /// sha256 of every file read, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub version: &'static str,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn start(command: Vec<String>, config: &ExperimentConfig, config_file: Option<&Path>) -> Result<Self> {
        let seeds = BTreeMap::from([
            ("data", config.data.seed),
            ("rgb", config.rgb.seed),
            ("tir", config.tir.seed),
            ("adapters", config.model_seed),
            ("train", config.train.seed),
        ]);
        let mut m = Self {
            command,
            config: config.clone(),
            config_file: config_file.map(Path::to_path_buf),
            seeds,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0.0,
            version: env!("CARGO_PKG_VERSION"),
        };
        if let Some(p) = config_file {
            m.input(p)?;
        }
        Ok(m)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hashes the annotation and pairing files of a data directory (not the images).
    pub fn input_dir(&mut self, dir: &Path) -> Result<()> {
        if !dir.is_dir() {
            anyhow::bail!("data directory {} does not exist", dir.display());
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            self.input(&f)?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(&mut self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.finished_unix = now();
        let path = dir.join(format!("manifest_{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
