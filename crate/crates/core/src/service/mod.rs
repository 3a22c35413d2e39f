//! Experiment server: JSON over HTTP, durable per-session trial logs,
//! online synthesis with pre-fetch, and immutable stimulus PNGs.

mod api;
mod state;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adaptive::{PlanLayout, StaircaseConfig};
use crate::error::{Error, Result};
use crate::stimuli::StimulusSource;

pub use api::{router, serve};
pub use state::ServiceState;

pub const DATA_DIR_ENV: &str = "MAME_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    pub data_dir: PathBuf,
    /// Seconds a next-trial request may wait for synthesis before 503.
    pub latency_budget: f64,
    /// Concurrent synthesis jobs.
    pub workers: usize,
    pub prefetch: bool,
    /// Write a snapshot after this many answered trials; 0 disables.
    pub snapshot_every: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8750,
            data_dir: PathBuf::from("mame-data"),
            latency_budget: 3.0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            prefetch: true,
            snapshot_every: 25,
        }
    }
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `MAME_DATA_DIR`, when set, replaces the configured data directory.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            self.data_dir = dir.into();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency_budget > 0.0) || self.workers == 0 {
            return Err(Error::Config(format!(
                "latency budget and worker count must be positive, got {} and {}",
                self.latency_budget, self.workers
            )));
        }
        Ok(())
    }
}

/// Everything a `configRef` resolves to.
pub struct Experiment {
    pub source: Arc<dyn StimulusSource>,
    pub staircase: StaircaseConfig,
    pub layout: PlanLayout,
}
