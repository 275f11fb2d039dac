//! Run manifest: enough provenance to replay any run bit for bit.

use crate::GlobalArgs;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::time::Duration;

#[derive(Debug, Serialize)]
struct RunManifest {
    command: Vec<String>,
    toolkit_version: &'static str,
    config_path: Option<String>,
    config_sha256: Option<String>,
    seed: u64,
    scheme: String,
    horizon: Option<f64>,
    n_steps: Option<usize>,
    dt_override: Option<f64>,
    threads: usize,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

/// Writes `manifest.json` next to the command's outputs. Re-running the
/// recorded command reproduces every listed output byte for byte; the
/// wall clock is informational only.
pub fn write(
    global: &GlobalArgs,
    outputs: &[String],
    elapsed: Duration,
) -> Result<(), std::io::Error> {
    let config_sha256 = match &global.config {
        Some(path) => {
            let bytes = fs::read(path)?;
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            let digest = hasher.finalize();
            Some(digest.iter().map(|b| format!("{b:02x}")).collect::<String>())
        }
        None => None,
    };
    let grid = crate::commands::grid_summary(global);
    let manifest = RunManifest {
        command: std::env::args().collect(),
        toolkit_version: env!("CARGO_PKG_VERSION"),
        config_path: global.config.as_ref().map(|p| p.display().to_string()),
        config_sha256,
        seed: global.seed,
        scheme: global.scheme.clone(),
        horizon: grid.map(|(h, _)| h),
        n_steps: grid.map(|(_, n)| n),
        dt_override: global.dt,
        threads: rayon::current_num_threads(),
        outputs: outputs.to_vec(),
        wall_clock_secs: elapsed.as_secs_f64(),
    };
    fs::create_dir_all(&global.out)?;
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(global.out.join("manifest.json"), body)
}
