//! Config files with command-line overrides, and the per-run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};
use udad_core::training::TrainConfig;

pub const OUT_ROOT_ENV: &str = "UDAD_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const SVG_FILE: &str = "samples.svg";

/// Reads `path` (or nothing) and applies `overrides` as if they were lines
/// of the file. Overridden lines are blanked rather than removed so parse
/// errors still point at the right line number.
pub fn load_config(path: Option<&Path>, overrides: &[(&str, String)]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => String::new(),
    };
    let mut lines: Vec<String> = text
        .lines()
        .map(|l| {
            let key = l.split_once('=').map(|(k, _)| k.trim());
            match key {
                Some(k)
                    if !l.trim_start().starts_with('#')
                        && overrides.iter().any(|(o, _)| *o == k) =>
                {
                    String::new()
                }
                _ => l.to_string(),
            }
        })
        .collect();
    lines.extend(overrides.iter().map(|(k, v)| format!("{k} = {v}")));
    let cfg = TrainConfig::parse(&lines.join("\n"));
    match path {
        Some(p) => cfg.with_context(|| format!("in {}", p.display())),
        None => Ok(cfg?),
    }
}

pub fn content_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// `$UDAD_OUT_ROOT` or `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

pub fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// What a run directory records about how it was produced.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub pipeline: String,
    pub config: TrainConfig,
    /// Where the source teacher came from.
    pub source: String,
    pub files: Vec<String>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

impl RunManifest {
    pub fn config_hash(&self) -> String {
        content_hash(&self.config.to_text())
    }

    /// Header lines, then the resolved config verbatim.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| s.push_str(&format!("{k} = {v}\n"));
        kv("command", &self.command);
        kv("pipeline", &self.pipeline);
        kv("benchmark", self.config.benchmark.name());
        kv("seed", &self.config.seed.to_string());
        kv("config_sha256", &self.config_hash());
        kv("source", &self.source);
        kv("files", &self.files.join(" "));
        kv("started_unix", &self.started_unix.to_string());
        kv("wall_seconds", &format!("{:.3}", self.wall_seconds));
        kv("version", env!("CARGO_PKG_VERSION"));
        s.push_str("\n[config]\n");
        s.push_str(&self.config.to_text());
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}
