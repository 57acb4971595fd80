use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleVariant;
use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSummary {
    pub id: usize,
    pub best_valid_acc: Option<f64>,
    pub rounds: usize,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub variant: EnsembleVariant,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_s: f64,
    pub ensemble_s: f64,
    pub eval_s: f64,
}

/// Everything `report.json` records about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub mean_accuracy: Option<f64>,
    pub ci95: Option<f64>,
    /// Per-episode ensemble accuracy on meta-test.
    pub episodes: Vec<f64>,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub workers: Vec<WorkerSummary>,
    /// Meta-test accuracy of each worker's own MCT predictions.
    pub learner_accuracies: Vec<f64>,
    pub ensemble_variant: Option<EnsembleVariant>,
    pub ensemble_candidates: Vec<CandidateScore>,
    pub timings: Timings,
    pub degraded: bool,
    pub config: RunConfig,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Mean and 95% half-width `1.96 * sigma / sqrt(E)` with the population
/// standard deviation.
pub fn mean_and_ci95(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Human-readable summary. Mean and interval are recomputed from the
/// per-episode list rather than trusted from the file.
pub fn format_summary(report: &RunReport) -> Result<String> {
    let (mean, ci) = mean_and_ci95(&report.episodes)
        .ok_or_else(|| Error::Argument("report has no per-episode accuracies".into()))?;
    let mut out = String::new();
    let _ = writeln!(out, "mean accuracy: {mean:.4}");
    let _ = writeln!(out, "ci95: {ci:.4}");
    let _ = writeln!(
        out,
        "episodes: {} ({}-way {}-shot, {} queries per class)",
        report.episodes.len(),
        report.way,
        report.shot,
        report.query
    );
    let _ = writeln!(out, "seed: {}", report.seed);
    if report.degraded {
        let _ = writeln!(out, "degraded: true");
    }
    for w in &report.workers {
        let acc = w
            .best_valid_acc
            .map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        let _ = write!(out, "worker {}: best valid acc {acc}, {} rounds", w.id, w.rounds);
        if let Some(test) = report.learner_accuracies.get(w.id) {
            let _ = write!(out, ", test acc {test:.4}");
        }
        if let Some(f) = &w.failure {
            let _ = write!(out, " (failed: {f})");
        }
        out.push('\n');
    }
    if let Some(v) = report.ensemble_variant {
        let _ = writeln!(out, "ensemble: {}", v.name());
    }
    for c in &report.ensemble_candidates {
        let _ = writeln!(out, "  {:<20} {:.4}", c.variant.name(), c.accuracy);
    }
    let t = &report.timings;
    let _ = writeln!(out, "phase      seconds");
    let _ = writeln!(out, "train      {:>8.3}", t.train_s);
    let _ = writeln!(out, "ensemble   {:>8.3}", t.ensemble_s);
    let _ = writeln!(out, "eval       {:>8.3}", t.eval_s);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_uses_population_deviation() {
        let (m, ci) = mean_and_ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((ci - 1.96 * 0.5 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_and_ci95(&[0.3; 4]).unwrap().1, 0.0);
        assert!(mean_and_ci95(&[]).is_none());
    }
}
