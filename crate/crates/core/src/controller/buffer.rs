//! Bounded per-worker batch buffers and the dispatcher that fills them.

use std::time::Duration;

use crossbeam_channel::{Receiver, Select, Sender, TrySendError};

use crate::controller::StopFlag;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferSpec {
    pub capacity: usize,
}

impl Default for BufferSpec {
    fn default() -> Self {
        BufferSpec { capacity: 4 }
    }
}

/// Blocking FIFO holding at most `spec.capacity` items.
pub fn bounded<T>(spec: BufferSpec) -> Result<(Sender<T>, Receiver<T>)> {
    if spec.capacity == 0 {
        return Err(Error::Argument("buffer capacity must be at least 1".into()));
    }
    Ok(crossbeam_channel::bounded(spec.capacity))
}

/// Produces the next item destined for buffer `target`.
pub trait BatchProducer {
    type Item;

    fn produce(&mut self, target: usize) -> Result<Self::Item>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DispatchStats {
    pub produced: Vec<usize>,
    pub delivered: Vec<usize>,
}

/// Keeps every buffer topped up until `stop` is set or all consumers have
/// gone away. Each buffer gets at most one produced-but-undelivered item; the
/// dispatcher only waits when every live buffer is full, and rechecks `stop`
/// every `poll`. A buffer whose receiver is dropped is retired.
pub fn dispatch_batches<P: BatchProducer>(
    producer: &mut P,
    buffers: Vec<Sender<P::Item>>,
    stop: &StopFlag,
    poll: Duration,
) -> Result<DispatchStats> {
    let n = buffers.len();
    let mut live: Vec<Option<Sender<P::Item>>> = buffers.into_iter().map(Some).collect();
    let mut pending: Vec<Option<P::Item>> = (0..n).map(|_| None).collect();
    let mut stats = DispatchStats {
        produced: vec![0; n],
        delivered: vec![0; n],
    };
    loop {
        if stop.is_set() || live.iter().all(Option::is_none) {
            return Ok(stats);
        }
        let mut progressed = false;
        for i in 0..n {
            let Some(tx) = &live[i] else { continue };
            let item = match pending[i].take() {
                Some(item) => item,
                None => {
                    stats.produced[i] += 1;
                    producer.produce(i)?
                }
            };
            match tx.try_send(item) {
                Ok(()) => {
                    stats.delivered[i] += 1;
                    progressed = true;
                }
                Err(TrySendError::Full(item)) => pending[i] = Some(item),
                Err(TrySendError::Disconnected(_)) => live[i] = None,
            }
        }
        if !progressed {
            let mut sel = Select::new();
            for tx in live.iter().flatten() {
                sel.send(tx);
            }
            // wakes when any buffer has room; the result is re-derived by
            // the next try_send pass
            let _ = sel.ready_timeout(poll);
        }
    }
}
