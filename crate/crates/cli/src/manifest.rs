//! Run manifest: what was run, from which configuration, and how long it took.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use inrct::config::{Precision, RunConfig};
use inrct::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct Versions {
    inrct: &'static str,
    sinogram_format: String,
    volume_format: String,
    checkpoint_format: String,
    target: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    precision: Option<Precision>,
    workers: usize,
    versions: Versions,
    started_unix_s: f64,
    wall_clock_s: f64,
    outputs: Vec<String>,
    /// The resolved configuration, defaults filled in.
    config: Option<String>,
}

/// Tracks a command from start to manifest.
pub struct Recorder {
    command: &'static str,
    started: Instant,
    started_unix: f64,
    outputs: Vec<PathBuf>,
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Hex SHA-256 of the resolved configuration text.
pub fn config_hash(cfg: &RunConfig) -> String {
    format!("{:x}", Sha256::digest(cfg.to_toml_string().as_bytes()))
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Recorder { command, started: Instant::now(), started_unix, outputs: Vec::new() }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest_<command>.json` into `dir` and returns its path.
    pub fn finish(self, dir: &Path, cfg: Option<(&Path, &RunConfig)>) -> Result<PathBuf> {
        let manifest = Manifest {
            command: self.command,
            config_path: cfg.map(|(p, _)| p.display().to_string()),
            config_sha256: cfg.map(|(_, c)| config_hash(c)),
            seed: cfg.map(|(_, c)| c.seed),
            precision: cfg.map(|(_, c)| c.precision),
            workers: rayon::current_num_threads(),
            versions: Versions {
                inrct: env!("CARGO_PKG_VERSION"),
                sinogram_format: text(inrct::io::SINOGRAM_MAGIC),
                volume_format: text(inrct::io::VOLUME_MAGIC),
                checkpoint_format: text(inrct::io::ENCODER_MAGIC),
                target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            },
            started_unix_s: self.started_unix,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            config: cfg.map(|(_, c)| c.to_toml_string()),
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("manifest_{}.json", self.command));
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| inrct::Error::Format(e.to_string()))?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
