//! The supervisor loop.
//!
//! One dispatcher thread samples training batches for every MLP worker and
//! feeds them through bounded buffers. Each worker thread repeats
//! train-`r`-epochs, validate with the prototype decoder, keep the best
//! checkpoint, then reports the round and waits for a verdict. The calling
//! thread is the supervisor: it folds each report into that worker's cost
//! estimate and stops the worker when another round is predicted not to fit
//! in the remaining budget minus the reserve.
//!
//! Every worker measures time on a fork of the budget clock. With a real
//! clock all forks read wall time; with a fake clock each worker advances
//! its own timeline, which keeps decisions reproducible.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::controller::buffer::{bounded, dispatch_batches, BatchProducer, BufferSpec};
use crate::controller::clock::{BudgetClock, Clock};
use crate::controller::estimator::{should_continue_with, EpochCostEstimator};
use crate::controller::StopFlag;
use crate::dataset::{ClassSplit, Episode, ItemPool, LabeledDataset, PayloadKind};
use crate::decoders::{compute_prototypes, episodic_accuracy, protonet_predict, DistanceMode};
use crate::encoder::train::{train_epochs_from, BatchSource, ClassIndex, PreparedBatch, TrainHyper};
use crate::encoder::{Architecture, EmbeddingProvider, Encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Mlp,
    Identity,
}

/// Per-worker encoder and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerSpec {
    pub encoder: EncoderKind,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(flatten)]
    pub hyper: TrainHyper,
}

impl Default for WorkerSpec {
    fn default() -> Self {
        WorkerSpec {
            encoder: EncoderKind::Mlp,
            hidden: vec![256, 128],
            embedding_dim: 64,
            hyper: TrainHyper::default(),
        }
    }
}

/// Shape and count of the fixed meta-valid episodes scored every round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationSpec {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        ValidationSpec {
            episodes: 100,
            way: 5,
            shot: 1,
            query: 19,
        }
    }
}

/// Called after each round's training with `(worker, round, worker clock)`.
/// Used to inject round costs into fake clocks.
pub type RoundHook = Arc<dyn Fn(usize, usize, &dyn Clock) + Send + Sync>;

#[derive(Clone)]
pub struct SupervisorOptions {
    /// Seconds kept free for the phases after meta-training.
    pub reserve: f64,
    pub validation: ValidationSpec,
    pub distance: DistanceMode,
    pub buffer: BufferSpec,
    pub poll: Duration,
    pub seed: u64,
    /// Stops each worker after this many rounds even if budget remains.
    pub max_rounds: Option<usize>,
    pub round_hook: Option<RoundHook>,
}

impl Default for SupervisorOptions {
    fn default() -> Self {
        SupervisorOptions {
            reserve: 0.0,
            validation: ValidationSpec::default(),
            distance: DistanceMode::default(),
            buffer: BufferSpec::default(),
            poll: Duration::from_millis(10),
            seed: 0,
            max_rounds: None,
            round_hook: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerOutcome {
    pub worker: usize,
    /// Best checkpoint; the initial encoder if no validation completed.
    pub encoder: Encoder,
    pub best_valid_accuracy: f64,
    pub validation_history: Vec<f64>,
    pub round_durations: Vec<f64>,
    pub rounds_completed: usize,
    pub stop_requested: bool,
    pub failure: Option<String>,
    /// Budget-clock seconds at which the worker finished.
    pub finished_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Round {
        round: usize,
        duration: f64,
        valid_accuracy: Option<f64>,
        continue_training: bool,
    },
    BudgetExhausted,
    WorkerFailed {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerEvent {
    /// Budget-clock seconds when the event happened.
    pub at: f64,
    pub worker: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl std::fmt::Display for ControllerEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{:>10.3}s] worker {} ", self.at, self.worker)?;
        match &self.kind {
            EventKind::Round {
                round,
                duration,
                valid_accuracy,
                continue_training,
            } => {
                write!(f, "round {round} duration {duration:.3}s valid_acc ")?;
                match valid_accuracy {
                    Some(a) => write!(f, "{a:.4}")?,
                    None => write!(f, "-")?,
                }
                let decision = if *continue_training { "continue" } else { "stop" };
                write!(f, " decision {decision}")
            }
            EventKind::BudgetExhausted => write!(f, "stopped: budget exhausted"),
            EventKind::WorkerFailed { message } => write!(f, "failed: {message}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaTrainingResult {
    pub workers: Vec<WorkerOutcome>,
    /// Sorted by time, then worker, then round.
    pub events: Vec<ControllerEvent>,
    /// Latest worker finish time on the budget clock.
    pub elapsed: f64,
}

/// Prototype-decoder accuracy of `encoder` averaged over `episodes`.
pub fn validation_accuracy(
    encoder: &Encoder,
    dataset: &LabeledDataset,
    episodes: &[Episode],
    mode: DistanceMode,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(episodes.len());
    let mut labels = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let support = encoder.embed(&ep.support_payloads(dataset))?;
        let query = encoder.embed(&ep.query_payloads(dataset))?;
        let protos = compute_prototypes(&support, &ep.support_labels(), ep.way)?;
        preds.push(protonet_predict(&protos, &query, mode)?);
        labels.push(ep.query_labels());
    }
    Ok(episodic_accuracy(&preds, &labels)?.mean)
}

/// Fixed validation episodes. The way and query count shrink to what the
/// meta-valid classes can supply.
pub fn validation_episodes(
    dataset: &LabeledDataset,
    classes: &BTreeSet<usize>,
    spec: &ValidationSpec,
    seed: u64,
) -> Result<Vec<Episode>> {
    let pool = dataset.pool(classes)?;
    let way = spec.way.min(pool.num_classes());
    if way < 2 {
        return Err(Error::Sampling(format!(
            "validation needs 2 meta-valid classes, found {}",
            pool.num_classes()
        )));
    }
    let min_items = pool.classes().map(|c| pool.items_of(c).len()).min().unwrap_or(0);
    let query = spec.query.min(min_items.saturating_sub(spec.shot));
    if query == 0 || spec.episodes == 0 {
        return Err(Error::Sampling(format!(
            "meta-valid classes with {min_items} items cannot supply {}-shot validation episodes",
            spec.shot
        )));
    }
    let mut rng = rng::stream(seed, "validation");
    (0..spec.episodes)
        .map(|_| pool.sample_episode(way, spec.shot, query, &mut rng))
        .collect()
}

/// Samples per-worker batches on per-worker streams, so every worker sees the
/// same batch sequence regardless of thread timing.
struct WorkerBatches {
    dataset: Arc<LabeledDataset>,
    pool: ItemPool,
    index: ClassIndex,
    shapes: Vec<(usize, usize)>,
    rngs: Vec<rng::StreamRng>,
}

impl BatchProducer for WorkerBatches {
    type Item = PreparedBatch;

    fn produce(&mut self, target: usize) -> Result<PreparedBatch> {
        let (way, shot) = self.shapes[target];
        let batch = self.pool.sample_batch(way, shot, &mut self.rngs[target])?;
        PreparedBatch::prepare(&self.dataset, &batch, &self.index)
    }
}

struct BufferSource {
    rx: Receiver<PreparedBatch>,
    poll: Duration,
}

impl BatchSource for BufferSource {
    fn next_batch(&mut self, stop: &StopFlag) -> Result<Option<PreparedBatch>> {
        loop {
            match self.rx.recv_timeout(self.poll) {
                Ok(b) => return Ok(Some(b)),
                Err(RecvTimeoutError::Timeout) if stop.is_set() => return Ok(None),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Sampling("batch dispatcher stopped".into()));
                }
            }
        }
    }
}

#[derive(Debug)]
struct RoundReport {
    worker: usize,
    round: usize,
    duration: f64,
    elapsed: f64,
    accuracy: Option<f64>,
    failure: Option<String>,
}

enum WorkerMsg {
    Round(RoundReport),
    /// The round ran past the hard-stop point and was not validated.
    Exhausted { worker: usize, elapsed: f64 },
    Finished(usize),
}

/// Shared so the supervisor can recover best-so-far state after a panic.
#[derive(Debug, Clone)]
struct WorkerRecord {
    best: Encoder,
    best_accuracy: f64,
    history: Vec<f64>,
    durations: Vec<f64>,
    rounds: usize,
    failure: Option<String>,
    finished_at: f64,
}

fn lock(record: &Mutex<WorkerRecord>) -> std::sync::MutexGuard<'_, WorkerRecord> {
    record.lock().unwrap_or_else(|p| p.into_inner())
}

struct WorkerContext {
    id: usize,
    spec: WorkerSpec,
    dataset: Arc<LabeledDataset>,
    validation: Arc<Vec<Episode>>,
    distance: DistanceMode,
    clock: BudgetClock,
    stop: StopFlag,
    batches: Option<BufferSource>,
    record: Arc<Mutex<WorkerRecord>>,
    reports: Sender<WorkerMsg>,
    verdicts: Receiver<bool>,
    hook: Option<RoundHook>,
    max_rounds: Option<usize>,
    reserve: f64,
}

fn worker_loop(mut ctx: WorkerContext) {
    let mut current = lock(&ctx.record).best.clone();
    for round in 0.. {
        if ctx.stop.is_set() {
            break;
        }
        let started = ctx.clock.elapsed();
        let mut failure = None;
        if let (Encoder::Mlp(params), Some(source)) = (&current, ctx.batches.as_mut()) {
            match train_epochs_from(params.clone(), source, &ctx.spec.hyper, &ctx.stop) {
                Ok(r) => {
                    failure = r.failure.map(|e| e.to_string());
                    current = Encoder::Mlp(r.params);
                }
                Err(e) => failure = Some(e.to_string()),
            }
        }
        if let Some(hook) = &ctx.hook {
            hook(ctx.id, round, ctx.clock.clock().as_ref());
        }
        if ctx.stop.is_set() || ctx.clock.remaining() <= ctx.reserve {
            // interrupted by the budget: no time left to validate
            let elapsed = ctx.clock.elapsed();
            lock(&ctx.record).finished_at = elapsed;
            let _ = ctx.reports.send(WorkerMsg::Exhausted {
                worker: ctx.id,
                elapsed,
            });
            break;
        }
        // a failed round still validates its last finite parameters
        let accuracy = match validation_accuracy(&current, &ctx.dataset, &ctx.validation, ctx.distance) {
            Ok(a) => Some(a),
            Err(e) => {
                failure.get_or_insert(e.to_string());
                None
            }
        };
        let elapsed = ctx.clock.elapsed();
        {
            let mut rec = lock(&ctx.record);
            rec.rounds += 1;
            rec.durations.push(elapsed - started);
            rec.finished_at = elapsed;
            if let Some(acc) = accuracy {
                if rec.history.is_empty() || acc > rec.best_accuracy {
                    rec.best_accuracy = acc;
                    rec.best = current.clone();
                }
                rec.history.push(acc);
            }
            if failure.is_some() {
                rec.failure = failure.clone();
            }
        }
        let terminal = failure.is_some()
            || matches!(current, Encoder::Identity)
            || ctx.max_rounds.is_some_and(|m| round + 1 >= m);
        let report = RoundReport {
            worker: ctx.id,
            round,
            duration: elapsed - started,
            elapsed,
            accuracy,
            failure,
        };
        if ctx.reports.send(WorkerMsg::Round(report)).is_err() {
            break;
        }
        // wait for the supervisor's verdict on this round
        match ctx.verdicts.recv() {
            Ok(true) if !terminal => {}
            _ => break,
        }
    }
    let _ = ctx.reports.send(WorkerMsg::Finished(ctx.id));
}

fn initial_encoder(
    spec: &WorkerSpec,
    dataset: &LabeledDataset,
    num_classes: usize,
    seed: u64,
    id: usize,
) -> Result<Encoder> {
    match spec.encoder {
        EncoderKind::Identity => {
            if dataset.payload_kind() != PayloadKind::Embedding {
                return Err(Error::Argument(format!(
                    "worker {id}: identity encoder needs an embedding dataset"
                )));
            }
            Ok(Encoder::Identity)
        }
        EncoderKind::Mlp => {
            spec.hyper.validate()?;
            let arch = Architecture {
                input_dim: dataset.feature_dim(),
                hidden: spec.hidden.clone(),
                embedding_dim: spec.embedding_dim,
                num_classes,
            };
            let mut rng = rng::stream(seed, &format!("worker/{id}/init"));
            Ok(Encoder::Mlp(EncoderParams::init(&arch, &mut rng)?))
        }
    }
}

/// Checks that the meta-train classes can supply every worker's batches.
fn check_batch_shapes(pool: &ItemPool, workers: &[WorkerSpec]) -> Result<()> {
    let min_items = pool.classes().map(|c| pool.items_of(c).len()).min().unwrap_or(0);
    for (i, w) in workers.iter().enumerate() {
        if w.encoder != EncoderKind::Mlp {
            continue;
        }
        if w.hyper.batch_way > pool.num_classes() {
            return Err(Error::Sampling(format!(
                "worker {i}: batch way {} exceeds {} meta-train classes",
                w.hyper.batch_way,
                pool.num_classes()
            )));
        }
        if w.hyper.batch_shot > min_items {
            return Err(Error::Sampling(format!(
                "worker {i}: batch shot {} exceeds the smallest meta-train class ({min_items} items)",
                w.hyper.batch_shot
            )));
        }
    }
    Ok(())
}

/// Trains every worker under the budget and returns each one's best
/// checkpoint. A worker that fails or panics still yields its best-so-far
/// state; other workers are unaffected.
pub fn run_meta_training(
    workers: &[WorkerSpec],
    dataset: Arc<LabeledDataset>,
    split: &ClassSplit,
    clock: &BudgetClock,
    opts: &SupervisorOptions,
) -> Result<MetaTrainingResult> {
    if workers.is_empty() {
        return Err(Error::Argument("at least one worker is required".into()));
    }
    if !(clock.total() > 0.0) {
        return Err(Error::Argument("budget must be positive".into()));
    }
    let train_pool = dataset.pool(&split.meta_train)?;
    check_batch_shapes(&train_pool, workers)?;
    let validation = Arc::new(validation_episodes(
        &dataset,
        &split.meta_valid,
        &opts.validation,
        opts.seed,
    )?);
    let index = ClassIndex::new(&split.meta_train);

    let dispatch_stop = StopFlag::new();
    let (report_tx, report_rx) = crossbeam_channel::unbounded();
    let mut senders = Vec::new();
    let mut shapes = Vec::new();
    let mut rngs = Vec::new();
    let mut verdict_txs = Vec::new();
    let mut stops = Vec::new();
    let mut records = Vec::new();
    let mut handles: Vec<Option<JoinHandle<()>>> = Vec::new();

    for (id, spec) in workers.iter().enumerate() {
        let encoder = initial_encoder(spec, &dataset, index.len(), opts.seed, id)?;
        let batches = match encoder {
            Encoder::Mlp(_) => {
                let (tx, rx) = bounded(opts.buffer)?;
                senders.push(tx);
                shapes.push((spec.hyper.batch_way, spec.hyper.batch_shot));
                rngs.push(rng::stream(opts.seed, &format!("worker/{id}/batches")));
                Some(BufferSource { rx, poll: opts.poll })
            }
            Encoder::Identity => None,
        };
        let record = Arc::new(Mutex::new(WorkerRecord {
            best: encoder,
            best_accuracy: 0.0,
            history: Vec::new(),
            durations: Vec::new(),
            rounds: 0,
            failure: None,
            finished_at: 0.0,
        }));
        let (verdict_tx, verdict_rx) = crossbeam_channel::bounded(1);
        let stop = StopFlag::new();
        let ctx = WorkerContext {
            id,
            spec: spec.clone(),
            dataset: Arc::clone(&dataset),
            validation: Arc::clone(&validation),
            distance: opts.distance,
            clock: clock.fork(),
            stop: stop.clone(),
            batches,
            record: Arc::clone(&record),
            reports: report_tx.clone(),
            verdicts: verdict_rx,
            hook: opts.round_hook.clone(),
            max_rounds: opts.max_rounds,
            reserve: opts.reserve,
        };
        let handle = std::thread::Builder::new()
            .name(format!("worker-{id}"))
            .spawn(move || worker_loop(ctx))
            .map_err(|e| Error::Train(format!("cannot spawn worker {id}: {e}")))?;
        handles.push(Some(handle));
        verdict_txs.push(verdict_tx);
        stops.push(stop);
        records.push(record);
    }
    drop(report_tx);

    let dispatcher = {
        let mut producer = WorkerBatches {
            dataset: Arc::clone(&dataset),
            pool: train_pool,
            index,
            shapes,
            rngs,
        };
        let stop = dispatch_stop.clone();
        let poll = opts.poll;
        std::thread::Builder::new()
            .name("dispatcher".into())
            .spawn(move || dispatch_batches(&mut producer, senders, &stop, poll))
            .map_err(|e| Error::Train(format!("cannot spawn dispatcher: {e}")))?
    };

    let mut estimators = vec![EpochCostEstimator::default(); workers.len()];
    let mut done = vec![false; workers.len()];
    let mut events = Vec::new();
    let mut budget_stopped = false;
    let mut exhausted = vec![false; workers.len()];
    while done.iter().any(|d| !d) {
        match report_rx.recv_timeout(opts.poll) {
            Ok(WorkerMsg::Round(r)) => {
                let w = r.worker;
                if let Err(e) = estimators[w].observe(r.duration) {
                    warn!("worker {w}: {e}");
                }
                let remaining = (clock.total() - r.elapsed).max(0.0);
                let go = r.failure.is_none()
                    && should_continue_with(remaining, &estimators[w], opts.reserve);
                if !go {
                    stops[w].set();
                }
                info!(
                    "worker {w} round {} took {:.3}s, valid acc {:?}, {}",
                    r.round,
                    r.duration,
                    r.accuracy,
                    if go { "continue" } else { "stop" }
                );
                events.push(ControllerEvent {
                    at: r.elapsed,
                    worker: w,
                    kind: EventKind::Round {
                        round: r.round,
                        duration: r.duration,
                        valid_accuracy: r.accuracy,
                        continue_training: go,
                    },
                });
                if let Some(message) = r.failure {
                    events.push(ControllerEvent {
                        at: r.elapsed,
                        worker: w,
                        kind: EventKind::WorkerFailed { message },
                    });
                }
                let _ = verdict_txs[w].send(go);
            }
            Ok(WorkerMsg::Exhausted { worker, elapsed }) => {
                if !exhausted[worker] {
                    exhausted[worker] = true;
                    events.push(ControllerEvent {
                        at: elapsed,
                        worker,
                        kind: EventKind::BudgetExhausted,
                    });
                }
            }
            Ok(WorkerMsg::Finished(w)) => done[w] = true,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if !budget_stopped && clock.remaining() <= opts.reserve {
            budget_stopped = true;
            for (w, s) in stops.iter().enumerate() {
                if !done[w] && !exhausted[w] {
                    exhausted[w] = true;
                    s.set();
                    events.push(ControllerEvent {
                        at: clock.elapsed(),
                        worker: w,
                        kind: EventKind::BudgetExhausted,
                    });
                }
            }
        }
        for (w, h) in handles.iter().enumerate() {
            if !done[w] && h.as_ref().is_some_and(JoinHandle::is_finished) {
                done[w] = true;
            }
        }
    }

    // a worker noticed as finished may have left its last message queued
    for msg in report_rx.try_iter() {
        if let WorkerMsg::Exhausted { worker, elapsed } = msg {
            if !exhausted[worker] {
                exhausted[worker] = true;
                events.push(ControllerEvent {
                    at: elapsed,
                    worker,
                    kind: EventKind::BudgetExhausted,
                });
            }
        }
    }

    dispatch_stop.set();
    let mut outcomes = Vec::with_capacity(workers.len());
    for (w, handle) in handles.iter_mut().enumerate() {
        let joined = handle.take().map(JoinHandle::join);
        let mut rec = lock(&records[w]).clone();
        if let Some(Err(panic)) = joined {
            let message = panic_message(&panic);
            warn!("worker {w} panicked: {message}");
            events.push(ControllerEvent {
                at: rec.finished_at,
                worker: w,
                kind: EventKind::WorkerFailed {
                    message: message.clone(),
                },
            });
            rec.failure = Some(message);
        }
        outcomes.push(WorkerOutcome {
            worker: w,
            encoder: rec.best,
            best_valid_accuracy: rec.best_accuracy,
            validation_history: rec.history,
            round_durations: rec.durations,
            rounds_completed: rec.rounds,
            stop_requested: stops[w].is_set(),
            failure: rec.failure,
            finished_at: rec.finished_at,
        });
    }
    match dispatcher.join() {
        Ok(Ok(_)) => {}
        Ok(Err(e)) => warn!("dispatcher stopped with error: {e}"),
        Err(_) => warn!("dispatcher panicked"),
    }

    let elapsed = outcomes.iter().map(|o| o.finished_at).fold(0.0, f64::max);
    clock.catch_up_elapsed(elapsed);
    events.sort_by(|a, b| {
        a.at.total_cmp(&b.at)
            .then(a.worker.cmp(&b.worker))
            .then_with(|| event_round(a).cmp(&event_round(b)))
    });
    Ok(MetaTrainingResult {
        workers: outcomes,
        events,
        elapsed,
    })
}

fn event_round(e: &ControllerEvent) -> usize {
    match e.kind {
        EventKind::Round { round, .. } => round,
        _ => usize::MAX,
    }
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}
