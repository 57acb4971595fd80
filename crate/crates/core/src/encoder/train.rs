//! Non-episodic batch training of the reference encoder.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::StopFlag;
use crate::dataset::{Batch, ItemPool, LabeledDataset, PayloadKind};
use crate::encoder::mlp::{forward_loss, EncoderParams};
use crate::encoder::rotation::{augment_with_rotations, RotationLabel};
use crate::encoder::payload_matrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f32,
    /// Weight of the rotation loss.
    pub alpha: f32,
    pub epochs_per_round: usize,
    pub batches_per_epoch: usize,
    /// Classes per batch (L).
    pub batch_way: usize,
    /// Items per class per batch (Z).
    pub batch_shot: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.05,
            alpha: 0.5,
            epochs_per_round: 1,
            batches_per_epoch: 20,
            batch_way: 10,
            batch_shot: 4,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Argument("alpha must be non-negative".into()));
        }
        if self.batches_per_epoch == 0 || self.batch_way == 0 || self.batch_shot == 0 {
            return Err(Error::Argument(
                "batches_per_epoch, batch_way and batch_shot must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Maps meta-train class ids to class-head rows (ascending id order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassIndex {
    rows: HashMap<usize, usize>,
}

impl ClassIndex {
    pub fn new(classes: &BTreeSet<usize>) -> Self {
        ClassIndex {
            rows: classes.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, class: usize) -> Result<usize> {
        self.rows
            .get(&class)
            .copied()
            .ok_or_else(|| Error::Shape(format!("class {class} has no head row")))
    }
}

/// A batch ready for `forward_loss`: flat inputs, head targets and, for
/// raster data, rotation labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub inputs: Matrix<f32>,
    pub class_targets: Vec<usize>,
    pub rot_labels: Option<Vec<RotationLabel>>,
}

impl PreparedBatch {
    /// Raster batches are expanded with all four rotations; embedding
    /// batches pass through unchanged.
    pub fn prepare(dataset: &LabeledDataset, batch: &Batch, index: &ClassIndex) -> Result<Self> {
        match dataset.payload_kind() {
            PayloadKind::Raster => {
                let aug = augment_with_rotations(batch, dataset)?;
                let dim = aug.images.first().map_or(0, |r| r.pixels().len());
                let rows: Vec<&[f32]> = aug.images.iter().map(|r| r.pixels()).collect();
                Ok(PreparedBatch {
                    inputs: Matrix::from_rows(&rows, dim)?,
                    class_targets: aug
                        .class_labels
                        .iter()
                        .map(|&c| index.row(c))
                        .collect::<Result<_>>()?,
                    rot_labels: Some(aug.rot_labels),
                })
            }
            PayloadKind::Embedding => {
                let payloads: Vec<_> = batch
                    .items
                    .iter()
                    .map(|&(id, _)| &dataset.item(id).payload)
                    .collect();
                Ok(PreparedBatch {
                    inputs: payload_matrix(&payloads)?,
                    class_targets: batch
                        .items
                        .iter()
                        .map(|&(_, c)| index.row(c))
                        .collect::<Result<_>>()?,
                    rot_labels: None,
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// Supplies prepared batches to the training loop. `Ok(None)` means the
/// source was stopped and no more batches will come.
pub trait BatchSource {
    fn next_batch(&mut self, stop: &StopFlag) -> Result<Option<PreparedBatch>>;
}

/// Samples `L`-way `Z`-shot batches directly from a pool.
pub struct SamplingSource<'a, R> {
    dataset: &'a LabeledDataset,
    pool: ItemPool,
    index: ClassIndex,
    way: usize,
    shot: usize,
    rng: R,
}

impl<'a, R: Rng> SamplingSource<'a, R> {
    pub fn new(
        dataset: &'a LabeledDataset,
        classes: &BTreeSet<usize>,
        way: usize,
        shot: usize,
        rng: R,
    ) -> Result<Self> {
        Ok(SamplingSource {
            dataset,
            pool: dataset.pool(classes)?,
            index: ClassIndex::new(classes),
            way,
            shot,
            rng,
        })
    }
}

impl<R: Rng> BatchSource for SamplingSource<'_, R> {
    fn next_batch(&mut self, _stop: &StopFlag) -> Result<Option<PreparedBatch>> {
        let batch = self.pool.sample_batch(self.way, self.shot, &mut self.rng)?;
        PreparedBatch::prepare(self.dataset, &batch, &self.index).map(Some)
    }
}

/// Outcome of one training round.
#[derive(Debug)]
pub struct TrainRound {
    pub params: EncoderParams<f32>,
    pub epochs_completed: usize,
    pub steps: usize,
    /// Mean total loss over the last completed epoch.
    pub last_epoch_loss: Option<f64>,
    /// Set when a numerical failure aborted the round; `params` are then the
    /// last finite parameters.
    pub failure: Option<Error>,
    pub stopped: bool,
}

/// Runs `epochs_per_round` epochs of `batches_per_epoch` SGD steps.
/// The stop flag is checked at every epoch boundary.
pub fn train_epochs_from(
    params: EncoderParams<f32>,
    source: &mut dyn BatchSource,
    hyper: &TrainHyper,
    stop: &StopFlag,
) -> Result<TrainRound> {
    hyper.validate()?;
    let mut round = TrainRound {
        params,
        epochs_completed: 0,
        steps: 0,
        last_epoch_loss: None,
        failure: None,
        stopped: false,
    };
    for _ in 0..hyper.epochs_per_round {
        if stop.is_set() {
            round.stopped = true;
            return Ok(round);
        }
        let mut loss_sum = 0.0;
        for _ in 0..hyper.batches_per_epoch {
            let Some(batch) = source.next_batch(stop)? else {
                round.stopped = true;
                return Ok(round);
            };
            let out = match forward_loss(
                &round.params,
                &batch.inputs,
                &batch.class_targets,
                batch.rot_labels.as_deref(),
                hyper.alpha,
            ) {
                Ok(out) => out,
                Err(e @ Error::Numerical(_)) => {
                    round.failure = Some(e);
                    return Ok(round);
                }
                Err(e) => return Err(e),
            };
            let next = crate::encoder::sgd_step(&round.params, &out.grads, hyper.learning_rate)?;
            if !next.all_finite() {
                round.failure = Some(Error::Numerical("parameters diverged".into()));
                return Ok(round);
            }
            round.params = next;
            round.steps += 1;
            loss_sum += f64::from(out.total);
        }
        round.epochs_completed += 1;
        round.last_epoch_loss = Some(loss_sum / hyper.batches_per_epoch as f64);
    }
    Ok(round)
}

/// Trains on batches sampled from the meta-train classes of `split`.
pub fn train_epochs<R: Rng>(
    params: EncoderParams<f32>,
    dataset: &LabeledDataset,
    meta_train: &BTreeSet<usize>,
    hyper: &TrainHyper,
    stop: &StopFlag,
    rng: R,
) -> Result<TrainRound> {
    let mut source = SamplingSource::new(dataset, meta_train, hyper.batch_way, hyper.batch_shot, rng)?;
    train_epochs_from(params, &mut source, hyper, stop)
}
