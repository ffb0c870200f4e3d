use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config_path: PathBuf,
    pub config_sha256: String,
    /// Verbatim copy of the configuration, so the manifest alone reproduces the run.
    pub config: serde_json::Value,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: f64,
    pub wall_seconds: f64,
    pub exit_code: i32,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(subcommand: &str, config_path: &Path, raw_config: &[u8], seed: u64) -> Self {
        let started = SystemTime::now().duration_since(SystemTime::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            config_path: config_path.to_path_buf(),
            config_sha256: hex::encode(Sha256::digest(raw_config)),
            config: serde_json::from_slice(raw_config).unwrap_or(serde_json::Value::Null),
            seed,
            threads: rayon::current_num_threads(),
            started_unix: started,
            wall_seconds: 0.0,
            exit_code: 0,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }
}
