//! Budget-aware supervision of parallel meta-learner workers.

pub mod buffer;
pub mod clock;
pub mod estimator;
pub mod supervisor;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

pub use buffer::{bounded, dispatch_batches, BatchProducer, BufferSpec, DispatchStats};
pub use clock::{BudgetClock, Clock, FakeClock, SystemClock};
pub use estimator::{estimate_round_cost, should_continue, should_continue_with, EpochCostEstimator};
pub use supervisor::{
    run_meta_training, validation_accuracy, validation_episodes, ControllerEvent, EncoderKind, EventKind, MetaTrainingResult,
    RoundHook, SupervisorOptions, ValidationSpec, WorkerOutcome, WorkerSpec,
};

/// Monotonic cross-thread stop signal: once set it stays set.
#[derive(Debug, Clone, Default)]
pub struct StopFlag(Arc<AtomicBool>);

impl StopFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}
