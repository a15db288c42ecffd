//! `--config` file: TOML whose values act as defaults for the flags.
//!
//! ```toml
//! out = "runs/forward"
//! jobs = 8
//! seeds = 10
//! train_fraction = 0.8
//!
//! [paths]
//! dataset = "acts/forward_belief.actv"
//! benchmark = "bench/forward_belief.jsonl"
//!
//! [probe]
//! l2_lambda = 1e-3
//! max_iterations = 1000
//!
//! [intervention]
//! kind = "plus_tpfo"
//! k = 16
//! alpha = 8.0
//! alphas = [0.0, 2.0, 4.0, 8.0, 16.0]
//! ks = [4, 16]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use beliefscope::probekit::ProbeConfig;
use beliefscope::steering::DirectionKind;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seeds: Option<usize>,
    pub train_fraction: Option<f64>,
    #[serde(default)]
    pub paths: Paths,
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub intervention: Intervention,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub scan: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intervention {
    pub kind: Option<DirectionKind>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(p) = &cfg.probe {
            p.validate()?;
        }
        Ok(cfg)
    }
}
