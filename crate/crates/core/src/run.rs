//! Self-describing run directories.
//!
//! ```text
//! <run>/config.toml     resolved configuration
//! <run>/manifest.json   code digest, seeds, paths, timestamps
//! <run>/metrics.jsonl   one JSON record per iteration and per evaluation
//! <run>/best.ckpt       state at the best test Dice so far
//! <run>/last.ckpt       state after the latest epoch
//! <run>/summary.json    final scores, written when training finishes
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{save_checkpoint, BestScore, TrainState};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalResult;
use crate::training::{MetricRecord, Observer, TrainSummary};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Free-form variant label, e.g. an ablation name.
    pub variant: String,
    pub config: TrainConfig,
    pub config_digest: String,
    /// SHA-256 of the executable that produced the run.
    pub code_digest: String,
    pub package_version: String,
    pub seed: u64,
    pub split_seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub started_unix: u64,
    #[serde(default)]
    pub finished_unix: Option<u64>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Digest of the running executable, or `"unknown"` if it cannot be read.
pub fn executable_digest() -> String {
    std::env::current_exe()
        .and_then(fs::read)
        .map(|bytes| hex::encode(Sha256::digest(bytes)))
        .unwrap_or_else(|_| "unknown".into())
}

impl RunManifest {
    pub fn new(variant: &str, config: &TrainConfig, data_dir: &Path, run_dir: &Path) -> Self {
        Self {
            variant: variant.to_string(),
            config: config.clone(),
            config_digest: config.digest(),
            code_digest: executable_digest(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            split_seed: config.split_seed,
            data_dir: data_dir.to_path_buf(),
            run_dir: run_dir.to_path_buf(),
            started_unix: unix_now(),
            finished_unix: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best: Option<BestScore>,
    pub best_eval: Option<EvalResult>,
    pub last_eval: Option<EvalResult>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// An open run directory. Acts as the training observer: appends metric
/// records, keeps `best.ckpt` and `last.ckpt` current.
pub struct RunDir {
    dir: PathBuf,
    metrics: File,
    manifest: RunManifest,
}

impl RunDir {
    /// Creates the directory, then writes the config and manifest before any
    /// training happens. An existing metrics stream is truncated.
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, manifest.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        let mpath = dir.join(METRICS_FILE);
        let metrics = File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            manifest,
        })
    }

    /// Reopens a run for resumption; new records are appended.
    pub fn reopen(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mpath = dir.join(METRICS_FILE);
        let metrics = OpenOptions::new().append(true).open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
            manifest,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn finish(mut self, summary: &TrainSummary) -> Result<()> {
        write_json(
            &self.dir.join(SUMMARY_FILE),
            &RunSummary {
                best: summary.best,
                best_eval: summary.best_eval.clone(),
                last_eval: summary.last_eval.clone(),
            },
        )?;
        self.manifest.finished_unix = Some(unix_now());
        write_json(&self.dir.join(MANIFEST_FILE), &self.manifest)
    }
}

impl Observer for RunDir {
    fn record(&mut self, record: &MetricRecord) -> Result<()> {
        let mpath = self.dir.join(METRICS_FILE);
        let line = serde_json::to_string(record)? + "\n";
        self.metrics.write_all(line.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
        self.metrics.flush().map_err(|e| Error::io(&mpath, e))
    }

    fn new_best(&mut self, state: &TrainState, _eval: &EvalResult) -> Result<()> {
        save_checkpoint(state, &self.dir.join(BEST_CHECKPOINT))
    }

    fn epoch_end(&mut self, state: &TrainState) -> Result<()> {
        save_checkpoint(state, &self.dir.join(LAST_CHECKPOINT))
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

/// Reads every complete record of a metrics stream. A trailing line without
/// a newline (a record still being written) is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        out.push(serde_json::from_str(line.trim_end())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_trailing_line_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        let rec = r#"{"kind":"eval","epoch":0,"iter":3,"dice":0.5,"jaccard":0.3333333333333333,"gate_dice":null,"gate_jaccard":null,"gate_weights":{},"best":true}"#;
        fs::write(&p, format!("{rec}\n{{\"kind\":\"ev")).unwrap();
        let recs = read_metrics(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].position(), (0, 3));
    }
}
