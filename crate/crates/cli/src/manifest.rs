use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tandem_polling::Params;

pub const VERSION: &str = env!("TANDEM_POLLING_VERSION");

/// Everything needed to rerun a command and reproduce its output files.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub version: String,
    pub raw_rates: [f64; 3],
    pub params: Params,
    pub settings: serde_json::Value,
    pub seed: Option<u64>,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

pub struct Clock {
    started: SystemTime,
    timer: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Clock { started: SystemTime::now(), timer: Instant::now() }
    }

    pub fn manifest(
        &self,
        raw_rates: [f64; 3],
        params: Params,
        settings: serde_json::Value,
        seed: Option<u64>,
        outputs: Vec<PathBuf>,
    ) -> RunManifest {
        RunManifest {
            command: std::env::args().collect(),
            version: VERSION.to_string(),
            raw_rates,
            params,
            settings,
            seed,
            started_unix_seconds: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0),
            wall_clock_seconds: self.timer.elapsed().as_secs_f64(),
            outputs,
        }
    }
}

/// `<out>.manifest.json` next to the output file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
