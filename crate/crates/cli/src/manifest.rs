//! Run manifest and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use kinetic_noise::bgk::InvariantMaxima;
use kinetic_noise::diagnostics::Verdict;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub kinetic_noise: String,
    pub cli: String,
    pub manifest_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            kinetic_noise: kinetic_noise::VERSION.to_string(),
            cli: env!("CARGO_PKG_VERSION").to_string(),
            manifest_format: MANIFEST_FORMAT,
        }
    }
}

/// Record of one run. Passing it back through `--config` replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentKind,
    /// SHA-256 of the normalized config without its output directory.
    pub config_hash: String,
    /// Path `i` draws from `path_seed(seed, i)`.
    pub seed: u64,
    pub n_paths: usize,
    pub versions: Versions,
    pub wall_time_s: f64,
    pub invariants: InvariantMaxima,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
    /// Name of the first failed check, or the error that stopped the run.
    pub first_failure: Option<String>,
    pub error: Option<String>,
    /// File names relative to the output directory.
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    /// Numbers and verdicts only; `wall_time_s` is the one field that differs
    /// between replays.
    pub fn without_wall_time(&self) -> RunManifest {
        RunManifest {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut hashed = cfg.clone();
    hashed.out = PathBuf::new();
    let bytes = serde_json::to_vec(&hashed).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename, so a
/// reader never sees a partial file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)
}
