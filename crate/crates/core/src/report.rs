//! Cross-validated experiment tables: running a matrix of variants × folds and
//! rebuilding the same report from stored run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Ablation, TrainConfig};
use crate::error::{Error, Result};
use crate::run::{read_manifest, read_metrics, METRICS_FILE};
use crate::training::MetricRecord;

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// `None` for an empty slice. The spread divides by `n`, not `n - 1`.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

/// Scores of one finished cell (test-set means at the best checkpoint).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub dice: f64,
    pub jaccard: f64,
    pub gate_dice: Option<f64>,
    pub gate_jaccard: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<CellScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub folds: Vec<FoldEntry>,
    /// Present only when every fold finished.
    pub dice: Option<Stat>,
    pub jaccard: Option<Stat>,
    pub gate_dice: Option<Stat>,
    pub gate_jaccard: Option<Stat>,
}

impl ReportRow {
    pub fn new(variant: String, folds: Vec<FoldEntry>) -> Self {
        let complete = folds.iter().all(|f| f.score.is_some());
        let collect = |get: &dyn Fn(&CellScore) -> Option<f64>| -> Option<Stat> {
            if !complete {
                return None;
            }
            let v: Option<Vec<f64>> = folds.iter().map(|f| get(f.score.as_ref().expect("complete"))).collect();
            v.and_then(|v| Stat::of(&v))
        };
        Self {
            dice: collect(&|s| Some(s.dice)),
            jaccard: collect(&|s| Some(s.jaccard)),
            gate_dice: collect(&|s| s.gate_dice),
            gate_jaccard: collect(&|s| s.gate_jaccard),
            variant,
            folds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SHA-256 over the config digests of every cell, in row order.
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
}

fn pct(s: Option<Stat>) -> String {
    s.map_or_else(|| "n/a".into(), |s| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std))
}

impl EvalReport {
    pub fn row(&self, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Aligned plain-text table, values in percent.
    pub fn to_table(&self) -> String {
        let header = ["variant", "DSC (%)", "JC (%)", "gate DSC (%)", "gate JC (%)", "folds"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let ok = r.folds.iter().filter(|f| f.score.is_some()).count();
                [
                    r.variant.clone(),
                    pct(r.dice),
                    pct(r.jaccard),
                    pct(r.gate_dice),
                    pct(r.gate_jaccard),
                    format!("{ok}/{}", r.folds.len()),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        line(&mut out, &widths.map(|w| "-".repeat(w)));
        for row in &body {
            line(&mut out, row);
        }
        for r in &self.rows {
            for f in &r.folds {
                if let Some(e) = &f.error {
                    let _ = writeln!(out, "! {} fold {}: {e}", r.variant, f.fold);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// The config of one matrix cell: the variant applied to the base, then the
/// fold index selects both the labeled chunk and the run seed.
pub fn cell_config(base: &TrainConfig, ablation: Ablation, fold: usize) -> TrainConfig {
    let mut cfg = ablation.apply(base);
    cfg.fold = fold;
    cfg.seed = base.seed + fold as u64;
    cfg
}

/// Runs every `(variant, fold)` cell through `runner` in order. A failing
/// cell is recorded with its error and the matrix continues.
pub fn run_matrix(
    base: &TrainConfig,
    ablations: &[Ablation],
    runner: &mut dyn FnMut(&TrainConfig, Ablation) -> Result<(CellScore, Option<PathBuf>)>,
) -> EvalReport {
    let mut digests = Vec::new();
    let rows = ablations
        .iter()
        .map(|&a| {
            let folds = (0..base.n_folds)
                .map(|fold| {
                    let cfg = cell_config(base, a, fold);
                    digests.push(cfg.digest());
                    let (score, error, run_dir) = match runner(&cfg, a) {
                        Ok((s, dir)) => (Some(s), None, dir),
                        Err(e) => (None, Some(e.to_string()), None),
                    };
                    FoldEntry {
                        fold,
                        seed: cfg.seed,
                        score,
                        error,
                        run_dir,
                    }
                })
                .collect();
            ReportRow::new(a.name().to_string(), folds)
        })
        .collect();
    EvalReport {
        config_digest: joint_digest(&digests),
        rows,
    }
}

fn joint_digest(digests: &[String]) -> String {
    hex::encode(Sha256::digest(digests.join("\n").as_bytes()))
}

/// Score of a run as recorded in its metrics stream: the evaluation with the
/// highest expert Dice (the first one on ties).
pub fn best_from_metrics(records: &[MetricRecord]) -> Option<CellScore> {
    let mut best: Option<CellScore> = None;
    for r in records {
        if let MetricRecord::Eval(e) = r {
            if best.is_none_or(|b| e.dice > b.dice) {
                best = Some(CellScore {
                    dice: e.dice,
                    jaccard: e.jaccard,
                    gate_dice: e.gate_dice,
                    gate_jaccard: e.gate_jaccard,
                });
            }
        }
    }
    best
}

/// Rebuilds a report from run directories alone. Rows follow the order in
/// which variants first appear in `runs`; folds within a row are sorted.
pub fn report_from_runs(runs: &[PathBuf]) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(Error::Data("no run directories given".into()));
    }
    let mut groups: Vec<(String, Vec<FoldEntry>)> = Vec::new();
    let mut digests = Vec::new();
    for dir in runs {
        let manifest = read_manifest(dir)?;
        let records = read_metrics(&dir.join(METRICS_FILE))?;
        let score = best_from_metrics(&records);
        let entry = FoldEntry {
            fold: manifest.config.fold,
            seed: manifest.seed,
            error: score.is_none().then(|| "no evaluation recorded".to_string()),
            score,
            run_dir: Some(dir.clone()),
        };
        digests.push(manifest.config_digest.clone());
        match groups.iter_mut().find(|(v, _)| *v == manifest.variant) {
            Some((_, folds)) => folds.push(entry),
            None => groups.push((manifest.variant.clone(), vec![entry])),
        }
    }
    let rows = groups
        .into_iter()
        .map(|(variant, mut folds)| {
            folds.sort_by_key(|f| (f.fold, f.seed));
            ReportRow::new(variant, folds)
        })
        .collect();
    Ok(EvalReport {
        config_digest: joint_digest(&digests),
        rows,
    })
}

/// Directories under `root` holding both a run manifest and a metrics
/// stream, sorted by path.
pub fn discover_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if root.join(crate::run::MANIFEST_FILE).is_file() && root.join(METRICS_FILE).is_file() {
        out.push(root.to_path_buf());
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            out.extend(discover_runs(&path)?);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_spread() {
        let s = Stat::of(&[0.90, 0.91, 0.89]).unwrap();
        assert!((s.mean - 0.90).abs() < 1e-12);
        assert!((s.std - 0.0082).abs() < 5e-5);
        assert!((s.std - (2.0f64 / 3.0).sqrt() * 0.01).abs() < 1e-12);
        assert!(Stat::of(&[]).is_none());
    }

    fn score(d: f64) -> CellScore {
        CellScore {
            dice: d,
            jaccard: d / (2.0 - d),
            gate_dice: None,
            gate_jaccard: None,
        }
    }

    #[test]
    fn matrix_counts_orders_and_survives_failures() {
        let base = TrainConfig::default();
        let ablations = [Ablation::Full, Ablation::SegSdf, Ablation::SegBnd];
        let mut calls = Vec::new();
        let report = run_matrix(&base, &ablations, &mut |cfg, a| {
            calls.push((a, cfg.fold));
            if a == Ablation::SegBnd && cfg.fold == 1 {
                return Err(Error::Data("boom".into()));
            }
            Ok((score(0.8 + 0.01 * cfg.fold as f64), None))
        });
        assert_eq!(calls.len(), 9);
        let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, vec!["full", "seg_sdf", "seg_bnd"]);
        assert!((report.rows[0].dice.unwrap().mean - 0.81).abs() < 1e-12);
        assert!(report.rows[2].dice.is_none());
        assert_eq!(report.rows[2].folds[1].error.as_deref(), Some("dataset error: boom"));
        let table = report.to_table();
        assert!(table.contains("81.00 ± 0.82"), "{table}");
        assert!(table.contains("seg_bnd fold 1"));
        let back: EvalReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
