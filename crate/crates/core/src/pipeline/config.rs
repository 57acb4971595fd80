use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ValidationSpec, WorkerSpec};
use crate::decoders::MctConfig;
use crate::ensemble::LinearConfig;
use crate::error::{Error, Result};

/// Episode shape and count for one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSpec {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            episodes: 600,
            way: 5,
            shot: 1,
            query: 19,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    /// Episodes sampled from the training half of the meta-valid items.
    pub train_episodes: usize,
    /// Episodes sampled from the held-out half, used for selection.
    pub test_episodes: usize,
    /// Share of each meta-valid class's items on the training side.
    pub train_fraction: f64,
    pub linear: LinearConfig,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            train_episodes: 200,
            test_episodes: 100,
            train_fraction: 0.5,
            linear: LinearConfig::default(),
        }
    }
}

/// Everything needed to reproduce a run. Loaded from JSON; every key
/// except `dataset` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Image corpus directory or `EMB1` file.
    pub dataset: PathBuf,
    pub split_ratios: [u32; 3],
    pub split_seed: u64,
    /// Master seed for every other random stream.
    pub seed: u64,
    pub workers: Vec<WorkerSpec>,
    pub validation: ValidationSpec,
    pub decoder: MctConfig,
    pub ensemble: EnsembleSpec,
    pub evaluation: EpisodeSpec,
    pub budget_seconds: f64,
    /// Share of the budget kept for the ensemble and evaluation phases.
    pub reserve_fraction: f64,
    pub buffer_capacity: usize,
    /// Optional cap on training rounds per worker.
    pub max_rounds: Option<usize>,
    /// When set, time is simulated: each round costs exactly this many
    /// seconds and no real time is measured.
    pub fake_round_seconds: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            split_ratios: [5, 1, 4],
            split_seed: 0,
            seed: 0,
            workers: vec![WorkerSpec::default(); 4],
            validation: ValidationSpec::default(),
            decoder: MctConfig::default(),
            ensemble: EnsembleSpec::default(),
            evaluation: EpisodeSpec::default(),
            budget_seconds: 7200.0,
            reserve_fraction: 0.15,
            buffer_capacity: 4,
            max_rounds: None,
            fake_round_seconds: None,
        }
    }
}

impl RunConfig {
    /// Parses a config file. A relative `dataset` is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        if let Ok(abs) = cfg.dataset.canonicalize() {
            cfg.dataset = abs;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if self.dataset.as_os_str().is_empty() {
            return fail("config needs a dataset path".into());
        }
        if self.split_ratios.contains(&0) {
            return fail(format!("split ratios {:?} must be positive", self.split_ratios));
        }
        if self.workers.is_empty() {
            return fail("config needs at least one worker".into());
        }
        for (i, w) in self.workers.iter().enumerate() {
            if w.embedding_dim == 0 || w.hidden.contains(&0) {
                return fail(format!("worker {i}: layer widths must be positive"));
            }
            w.hyper
                .validate()
                .map_err(|e| Error::Argument(format!("worker {i}: {e}")))?;
        }
        let ev = &self.evaluation;
        if ev.way < 2 {
            return fail(format!("evaluation way {} must be at least 2", ev.way));
        }
        if ev.episodes == 0 || ev.shot == 0 || ev.query == 0 {
            return fail("evaluation episodes, shot and query must be positive".into());
        }
        let v = &self.validation;
        if v.episodes == 0 || v.way < 2 || v.shot == 0 || v.query == 0 {
            return fail("validation needs positive counts and way >= 2".into());
        }
        let en = &self.ensemble;
        if en.train_episodes == 0 || en.test_episodes == 0 {
            return fail("ensemble episode counts must be positive".into());
        }
        if !(en.train_fraction > 0.0 && en.train_fraction < 1.0) {
            return fail("ensemble train_fraction must be in (0,1)".into());
        }
        self.decoder.validate()?;
        if !(self.budget_seconds > 0.0 && self.budget_seconds.is_finite()) {
            return fail("budget_seconds must be positive".into());
        }
        if !(0.0..1.0).contains(&self.reserve_fraction) {
            return fail("reserve_fraction must be in [0,1)".into());
        }
        if self.buffer_capacity == 0 {
            return fail("buffer_capacity must be positive".into());
        }
        if let Some(s) = self.fake_round_seconds {
            if !(s >= 0.0 && s.is_finite()) {
                return fail("fake_round_seconds must be non-negative".into());
            }
        }
        Ok(())
    }

    pub fn reserve_seconds(&self) -> f64 {
        self.budget_seconds * self.reserve_fraction
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg: RunConfig = serde_json::from_str(r#"{"dataset": "x.emb"}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.evaluation.episodes, 600);
        assert_eq!(cfg.evaluation.way, 5);
        assert_eq!(cfg.evaluation.query, 19);
        assert_eq!(cfg.workers.len(), 4);
        assert_eq!(cfg.workers[0].hidden, vec![256, 128]);
        assert!((cfg.reserve_seconds() - 1080.0).abs() < 1e-9);
    }

    #[test]
    fn worker_keys_are_flat() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"dataset": "d", "workers": [{"hidden": [8], "embedding_dim": 4, "alpha": 0.0, "learning_rate": 0.01}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.workers[0].hyper.alpha, 0.0);
        assert_eq!(cfg.workers[0].hyper.batch_way, 10);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = RunConfig {
            dataset: "d".into(),
            ..RunConfig::default()
        };
        cfg.evaluation.way = 1;
        assert!(cfg.validate().is_err());
        cfg.evaluation.way = 5;
        cfg.split_ratios = [0, 1, 4];
        assert!(cfg.validate().is_err());
    }
}
