//! End-to-end runs: split, meta-train under a budget, fit the ensemble on
//! meta-valid, evaluate on meta-test, and persist everything in a run
//! directory:
//!
//! ```text
//! run_dir/config.json          resolved config
//! run_dir/split.json           class partition
//! run_dir/worker_<i>/best.enc1 best encoder per worker
//! run_dir/ensemble.ens1        selected ensemble
//! run_dir/log.txt              controller events
//! run_dir/report.json          RunReport
//! ```

pub mod config;
pub mod report;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::info;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{
    run_meta_training, BudgetClock, BufferSpec, Clock, FakeClock, MetaTrainingResult, RoundHook,
    SupervisorOptions, SystemClock,
};
use crate::dataset::{load_dataset, split_classes, split_for_ensemble, ClassSplit, Episode, ItemPool, LabeledDataset};
use crate::decoders::{episodic_accuracy, mct_predict, ClassDistribution, DistanceMode, MctConfig};
use crate::encoder::{encode_encoder, load_encoder, EmbeddingProvider, Encoder};
use crate::ensemble::{
    build_features, ensemble_predict, load_ensemble, save_ensemble, select_best, train_candidates,
    EnsembleEpisode, EnsembleModel, EnsembleSelection,
};
use crate::error::{Error, Result};
use crate::rng;

pub use config::{EnsembleSpec, EpisodeSpec, RunConfig};
pub use report::{format_summary, mean_and_ci95, CandidateScore, RunReport, Timings, WorkerSummary};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// `split.json` contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    #[serde(flatten)]
    pub split: ClassSplit,
    pub seed: u64,
    pub ratios: [u32; 3],
}

impl SplitFile {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("split serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn make_split(dataset: &LabeledDataset, ratios: [u32; 3], seed: u64) -> Result<SplitFile> {
    let split = split_classes(dataset, (ratios[0], ratios[1], ratios[2]), seed)?;
    Ok(SplitFile { split, seed, ratios })
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(PathBuf);

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir(root.into())
    }

    pub fn root(&self) -> &Path {
        &self.0
    }

    pub fn config(&self) -> PathBuf {
        self.0.join("config.json")
    }

    pub fn split(&self) -> PathBuf {
        self.0.join("split.json")
    }

    pub fn encoder(&self, worker: usize) -> PathBuf {
        self.0.join(format!("worker_{worker}")).join("best.enc1")
    }

    pub fn ensemble(&self) -> PathBuf {
        self.0.join("ensemble.ens1")
    }

    pub fn log(&self) -> PathBuf {
        self.0.join("log.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// The run's clock. With `fake_round_seconds` every round costs exactly
/// that much simulated time and nothing else advances the clock.
fn run_clock(cfg: &RunConfig) -> (Arc<dyn Clock>, Option<RoundHook>) {
    match cfg.fake_round_seconds {
        Some(s) => {
            let cost = Duration::from_secs_f64(s);
            let hook: RoundHook = Arc::new(move |_, _, clock: &dyn Clock| clock.sleep(cost));
            (Arc::new(FakeClock::new()), Some(hook))
        }
        None => (Arc::new(SystemClock::new()), None),
    }
}

fn min_class_size(pool: &ItemPool) -> usize {
    pool.classes().map(|c| pool.items_of(c).len()).min().unwrap_or(0)
}

/// Fails early when a partition cannot supply the configured episodes.
fn check_partitions(dataset: &LabeledDataset, split: &ClassSplit, cfg: &RunConfig) -> Result<()> {
    let ev = &cfg.evaluation;
    let test = dataset.pool(&split.meta_test)?;
    if test.num_classes() < ev.way {
        return Err(Error::Sampling(format!(
            "{}-way evaluation needs {} meta-test classes, split has {} (short by {})",
            ev.way,
            ev.way,
            test.num_classes(),
            ev.way - test.num_classes()
        )));
    }
    if split.meta_valid.len() < ev.way {
        return Err(Error::Sampling(format!(
            "the ensemble is fit on {}-way meta-valid episodes but the split has {} meta-valid classes (short by {})",
            ev.way,
            split.meta_valid.len(),
            ev.way - split.meta_valid.len()
        )));
    }
    let need = ev.shot + ev.query;
    let have = min_class_size(&test);
    if have < need {
        return Err(Error::Sampling(format!(
            "{}-shot {}-query evaluation needs {need} items per meta-test class, smallest has {have} (short by {})",
            ev.shot,
            ev.query,
            need - have
        )));
    }
    Ok(())
}

/// One distribution list per learner, each over the episode's queries.
pub fn decode_episode(
    dataset: &LabeledDataset,
    encoders: &[Encoder],
    episode: &Episode,
    mct: &MctConfig,
) -> Result<Vec<Vec<ClassDistribution>>> {
    let support = episode.support_payloads(dataset);
    let query = episode.query_payloads(dataset);
    let labels = episode.support_labels();
    encoders
        .iter()
        .map(|enc| {
            let s = enc.embed(&support)?;
            let q = enc.embed(&query)?;
            mct_predict(&s, &labels, &q, episode.way, mct)
        })
        .collect()
}

fn sample_episodes<R: Rng>(pool: &ItemPool, count: usize, spec: &EpisodeSpec, rng: &mut R) -> Result<Vec<Episode>> {
    (0..count)
        .map(|_| pool.sample_episode(spec.way, spec.shot, spec.query, rng))
        .collect()
}

/// Decodes episodes in parallel; results keep episode order.
fn ensemble_episodes(
    dataset: &LabeledDataset,
    encoders: &[Encoder],
    episodes: &[Episode],
    mct: &MctConfig,
) -> Result<Vec<EnsembleEpisode>> {
    episodes
        .par_iter()
        .map(|ep| {
            let dists = decode_episode(dataset, encoders, ep, mct)?;
            Ok(EnsembleEpisode {
                features: build_features(&dists)?,
                labels: ep.query_labels(),
            })
        })
        .collect()
}

/// Splits the meta-valid items, decodes ensemble episodes on both halves,
/// and selects the best combiner. The query count shrinks to what the
/// smaller half of each class can supply.
pub fn fit_ensemble(
    dataset: &LabeledDataset,
    meta_valid: &BTreeSet<usize>,
    encoders: &[Encoder],
    cfg: &RunConfig,
) -> Result<EnsembleSelection> {
    let en = &cfg.ensemble;
    let mut split_rng = rng::stream(cfg.seed, "ensemble/split");
    let (train_pool, test_pool) = split_for_ensemble(dataset, meta_valid, en.train_fraction, &mut split_rng)?;
    let shot = cfg.evaluation.shot;
    let fit = |pool: &ItemPool| {
        let have = min_class_size(pool);
        let query = cfg.evaluation.query.min(have.saturating_sub(shot));
        if query == 0 {
            return Err(Error::Sampling(format!(
                "meta-valid halves with {have} items per class cannot supply {shot}-shot ensemble episodes"
            )));
        }
        Ok(EpisodeSpec {
            episodes: 0,
            way: cfg.evaluation.way,
            shot,
            query,
        })
    };
    let train_spec = fit(&train_pool)?;
    let test_spec = fit(&test_pool)?;
    let train_eps = sample_episodes(
        &train_pool,
        en.train_episodes,
        &train_spec,
        &mut rng::stream(cfg.seed, "ensemble/train"),
    )?;
    let test_eps = sample_episodes(
        &test_pool,
        en.test_episodes,
        &test_spec,
        &mut rng::stream(cfg.seed, "ensemble/test"),
    )?;
    let train = ensemble_episodes(dataset, encoders, &train_eps, &cfg.decoder)?;
    let test = ensemble_episodes(dataset, encoders, &test_eps, &cfg.decoder)?;
    let candidates = train_candidates(&train, &en.linear)?;
    select_best(candidates, &test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Ensemble accuracy per episode.
    pub per_episode: Vec<f64>,
    /// Mean accuracy of each learner's own predictions.
    pub learner_accuracies: Vec<f64>,
    /// Every item id the episodes touched.
    pub touched: BTreeSet<usize>,
}

/// Evaluates the ensemble on `spec.episodes` meta-test episodes drawn from
/// the `"eval/episodes"` stream of `seed`.
pub fn evaluate(
    dataset: &LabeledDataset,
    meta_test: &BTreeSet<usize>,
    encoders: &[Encoder],
    model: &EnsembleModel,
    spec: &EpisodeSpec,
    mct: &MctConfig,
    seed: u64,
) -> Result<Evaluation> {
    let (m, k) = model.shape();
    if m != encoders.len() || k != spec.way {
        return Err(Error::Argument(format!(
            "ensemble was fit for {m} learners on {k}-way episodes, evaluation has {} learners on {}-way episodes",
            encoders.len(),
            spec.way
        )));
    }
    let pool = dataset.pool(meta_test)?;
    let episodes = sample_episodes(&pool, spec.episodes, spec, &mut rng::stream(seed, "eval/episodes"))?;

    // audit: evaluation must only see meta-test items
    let allowed = pool.item_ids();
    let mut touched = BTreeSet::new();
    for ep in &episodes {
        for it in ep.support.iter().chain(&ep.query) {
            if !allowed.contains(&it.item_id) {
                return Err(Error::Sampling(format!(
                    "evaluation episode drew item {} from outside meta-test",
                    it.item_id
                )));
            }
            touched.insert(it.item_id);
        }
    }

    let decoded: Vec<(Vec<Vec<ClassDistribution>>, Vec<ClassDistribution>)> = episodes
        .par_iter()
        .map(|ep| {
            let dists = decode_episode(dataset, encoders, ep, mct)?;
            let preds = build_features(&dists)?
                .iter()
                .map(|f| ensemble_predict(model, f))
                .collect::<Result<Vec<_>>>()?;
            Ok((dists, preds))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<usize>> = episodes.iter().map(Episode::query_labels).collect();
    let (per_learner, ensemble): (Vec<_>, Vec<_>) = decoded.into_iter().unzip();
    let per_episode = episodic_accuracy(&ensemble, &labels)?.per_episode;
    let learner_accuracies = (0..encoders.len())
        .map(|w| {
            let preds: Vec<Vec<ClassDistribution>> = per_learner.iter().map(|d| d[w].clone()).collect();
            Ok(episodic_accuracy(&preds, &labels)?.mean)
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        per_episode,
        learner_accuracies,
        touched,
    })
}

/// Outcome of [`train`]: the written report, plus the raw controller result.
#[derive(Debug)]
pub struct TrainOutput {
    pub report: RunReport,
    pub meta: MetaTrainingResult,
}

fn controller_log(meta: &MetaTrainingResult) -> String {
    let mut log = String::new();
    for e in &meta.events {
        let _ = writeln!(log, "{e}");
    }
    for w in &meta.workers {
        let _ = writeln!(
            log,
            "worker {} finished at {:.3}s after {} rounds, best valid acc {:.4}",
            w.worker, w.finished_at, w.rounds_completed, w.best_valid_accuracy
        );
    }
    log
}

/// Runs the whole pipeline into `out`. A run where no worker completed a
/// validation is degraded: its report has no evaluation and
/// `degraded: true`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    let dataset = Arc::new(load_dataset(&cfg.dataset)?);
    let split_file = make_split(&dataset, cfg.split_ratios, cfg.split_seed)?;
    let split = &split_file.split;
    check_partitions(&dataset, split, cfg)?;
    let dir = RunDir::new(out);
    write_file(&dir.config(), cfg.to_json())?;
    write_file(&dir.split(), split_file.to_json())?;

    let (clock, hook) = run_clock(cfg);
    let budget = BudgetClock::start(clock, cfg.budget_seconds);
    let opts = SupervisorOptions {
        reserve: cfg.reserve_seconds(),
        validation: cfg.validation,
        distance: cfg.decoder.distance_mode,
        buffer: BufferSpec {
            capacity: cfg.buffer_capacity,
        },
        seed: cfg.seed,
        max_rounds: cfg.max_rounds,
        round_hook: hook,
        ..SupervisorOptions::default()
    };
    let meta = run_meta_training(&cfg.workers, Arc::clone(&dataset), split, &budget, &opts)?;
    let train_s = budget.elapsed();
    write_file(&dir.log(), controller_log(&meta))?;
    for w in &meta.workers {
        write_file(&dir.encoder(w.worker), encode_encoder(&w.encoder))?;
    }
    let workers: Vec<WorkerSummary> = meta
        .workers
        .iter()
        .map(|w| WorkerSummary {
            id: w.worker,
            best_valid_acc: (!w.validation_history.is_empty()).then_some(w.best_valid_accuracy),
            rounds: w.rounds_completed,
            failure: w.failure.clone(),
        })
        .collect();
    let mut report = RunReport {
        version: VERSION.to_string(),
        seed: cfg.seed,
        mean_accuracy: None,
        ci95: None,
        episodes: Vec::new(),
        way: cfg.evaluation.way,
        shot: cfg.evaluation.shot,
        query: cfg.evaluation.query,
        workers,
        learner_accuracies: Vec::new(),
        ensemble_variant: None,
        ensemble_candidates: Vec::new(),
        timings: Timings {
            train_s,
            ..Timings::default()
        },
        degraded: false,
        config: cfg.clone(),
    };
    if report.workers.iter().all(|w| w.best_valid_acc.is_none()) {
        info!("no worker finished a validated round; writing a degraded report");
        report.degraded = true;
        report.save(&dir.report())?;
        return Ok(TrainOutput { report, meta });
    }

    let encoders: Vec<Encoder> = meta.workers.iter().map(|w| w.encoder.clone()).collect();
    let selection = fit_ensemble(&dataset, &split.meta_valid, &encoders, cfg)?;
    save_ensemble(&selection.best, &dir.ensemble())?;
    report.ensemble_variant = Some(selection.best.variant());
    report.ensemble_candidates = selection
        .accuracies
        .iter()
        .map(|&(variant, accuracy)| CandidateScore { variant, accuracy })
        .collect();
    let ensemble_done = budget.elapsed();
    report.timings.ensemble_s = ensemble_done - train_s;

    let eval = evaluate(
        &dataset,
        &split.meta_test,
        &encoders,
        &selection.best,
        &cfg.evaluation,
        &cfg.decoder,
        cfg.seed,
    )?;
    report.timings.eval_s = budget.elapsed() - ensemble_done;
    fill_evaluation(&mut report, eval);
    report.save(&dir.report())?;
    Ok(TrainOutput { report, meta })
}

fn fill_evaluation(report: &mut RunReport, eval: Evaluation) {
    let (mean, ci) = mean_and_ci95(&eval.per_episode).expect("at least one episode");
    report.mean_accuracy = Some(mean);
    report.ci95 = Some(ci);
    report.episodes = eval.per_episode;
    report.learner_accuracies = eval.learner_accuracies;
}

/// Overrides accepted by [`eval`]; `None` keeps the run's config value.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOverrides {
    pub episodes: Option<usize>,
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub query: Option<usize>,
    pub seed: Option<u64>,
    pub distance: Option<DistanceMode>,
    pub mct_steps: Option<usize>,
}

/// Re-evaluates a trained run directory on fresh meta-test episodes and
/// rewrites its `report.json`.
pub fn eval(run_dir: &Path, overrides: &EvalOverrides) -> Result<RunReport> {
    let dir = RunDir::new(run_dir);
    let mut cfg = RunConfig::load(&dir.config())?;
    let split = SplitFile::load(&dir.split())?.split;
    let previous = RunReport::load(&dir.report()).ok();
    let encoders = (0..cfg.workers.len())
        .map(|w| load_encoder(&dir.encoder(w)))
        .collect::<Result<Vec<_>>>()?;
    let model = load_ensemble(&dir.ensemble())?;

    let ev = &mut cfg.evaluation;
    ev.episodes = overrides.episodes.unwrap_or(ev.episodes);
    ev.way = overrides.way.unwrap_or(ev.way);
    ev.shot = overrides.shot.unwrap_or(ev.shot);
    ev.query = overrides.query.unwrap_or(ev.query);
    cfg.seed = overrides.seed.unwrap_or(cfg.seed);
    cfg.decoder.distance_mode = overrides.distance.unwrap_or(cfg.decoder.distance_mode);
    cfg.decoder.iterations = overrides.mct_steps.unwrap_or(cfg.decoder.iterations);
    cfg.validate()?;

    let dataset = load_dataset(&cfg.dataset)?;
    let (clock, _) = run_clock(&cfg);
    let started = clock.now();
    let evaluation = evaluate(
        &dataset,
        &split.meta_test,
        &encoders,
        &model,
        &cfg.evaluation,
        &cfg.decoder,
        cfg.seed,
    )?;
    let eval_s = clock.now().saturating_sub(started).as_secs_f64();

    let mut report = RunReport {
        version: VERSION.to_string(),
        seed: cfg.seed,
        mean_accuracy: None,
        ci95: None,
        episodes: Vec::new(),
        way: cfg.evaluation.way,
        shot: cfg.evaluation.shot,
        query: cfg.evaluation.query,
        workers: previous.as_ref().map(|r| r.workers.clone()).unwrap_or_default(),
        learner_accuracies: Vec::new(),
        ensemble_variant: Some(model.variant()),
        ensemble_candidates: previous
            .as_ref()
            .map(|r| r.ensemble_candidates.clone())
            .unwrap_or_default(),
        timings: Timings {
            eval_s,
            ..previous.as_ref().map(|r| r.timings).unwrap_or_default()
        },
        degraded: false,
        config: cfg,
    };
    fill_evaluation(&mut report, evaluation);
    report.save(&dir.report())?;
    Ok(report)
}
