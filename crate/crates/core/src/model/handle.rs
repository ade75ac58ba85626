// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use ndarray::Array1;

use super::forward::{forward, ModelInput};
use super::vocab::TokenId;
use super::Model;
use crate::error::{Error, Result};
use crate::numeric::argmax;

/// FIFO admission for model execution: at most one closure runs at a time and
/// waiters are served in arrival order.
#[derive(Debug)]
pub struct RunQueue {
    state: Mutex<QueueState>,
    turn: Condvar,
    max_pending: usize,
}

#[derive(Debug, Default)]
struct QueueState {
    next_ticket: u64,
    serving: u64,
}

struct TurnGuard<'a>(&'a RunQueue);

impl Drop for TurnGuard<'_> {
    fn drop(&mut self) {
        let mut s = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        s.serving += 1;
        self.0.turn.notify_all();
    }
}

impl RunQueue {
    pub const DEFAULT_MAX_PENDING: usize = 64;

    pub fn new(max_pending: usize) -> Self {
        Self {
            state: Mutex::new(QueueState::default()),
            turn: Condvar::new(),
            max_pending: max_pending.max(1),
        }
    }

    /// Requests admitted but not yet finished (running one included).
    pub fn pending(&self) -> usize {
        let s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        (s.next_ticket - s.serving) as usize
    }

    pub fn run<R>(&self, job: impl FnOnce() -> R) -> Result<R> {
        {
            let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
            let pending = (s.next_ticket - s.serving) as usize;
            if pending >= self.max_pending {
                return Err(Error::Saturated { pending });
            }
            let t = s.next_ticket;
            s.next_ticket += 1;
            while s.serving != t {
                s = self.turn.wait(s).unwrap_or_else(|e| e.into_inner());
            }
        }
        let _turn = TurnGuard(self);
        Ok(job())
    }
}

impl Default for RunQueue {
    fn default() -> Self {
        Self::new(Self::DEFAULT_MAX_PENDING)
    }
}

#[derive(Debug, Default)]
pub struct PassCounters {
    traced: AtomicU64,
    plain: AtomicU64,
}

impl PassCounters {
    pub fn traced(&self) -> u64 {
        self.traced.load(Ordering::SeqCst)
    }

    pub fn plain(&self) -> u64 {
        self.plain.load(Ordering::SeqCst)
    }

    pub(crate) fn bump_traced(&self) {
        self.traced.fetch_add(1, Ordering::SeqCst);
    }

    pub(crate) fn bump_plain(&self) {
        self.plain.fetch_add(1, Ordering::SeqCst);
    }
}

/// Shared handle to a loaded model: weights, pass counters and run queue.
///
/// Cloning is cheap; clones share counters and the queue.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    model: Arc<Model>,
    counters: Arc<PassCounters>,
    queue: Arc<RunQueue>,
}

impl ModelHandle {
    pub fn new(model: Model) -> Self {
        Self::with_queue(model, RunQueue::default())
    }

    pub fn with_queue(model: Model, queue: RunQueue) -> Self {
        Self {
            model: Arc::new(model),
            counters: Arc::default(),
            queue: Arc::new(queue),
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn counters(&self) -> &PassCounters {
        &self.counters
    }

    pub fn queue(&self) -> &RunQueue {
        &self.queue
    }

    /// Number of instrumented passes run so far.
    pub fn traced_passes(&self) -> u64 {
        self.counters.traced()
    }

    /// Number of plain (uninstrumented) passes, e.g. generation steps.
    pub fn plain_passes(&self) -> u64 {
        self.counters.plain()
    }

    /// Uninstrumented pass returning last-position logits.
    pub fn forward(&self, input: &ModelInput) -> Result<Array1<f32>> {
        input.validate(&self.model)?;
        self.queue.run(|| {
            self.counters.bump_plain();
            forward(&self.model, input, None).0
        })
    }

    /// Greedy continuation of `input`; stops after `max_new` tokens or at any
    /// token in `stop` (included in the output).
    pub fn generate_greedy(
        &self,
        input: &ModelInput,
        max_new: usize,
        stop: &[TokenId],
    ) -> Result<Vec<TokenId>> {
        let mut input = input.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if let Some(max) = self.model.config().max_positions() {
                if input.len() >= max {
                    break;
                }
            }
            let logits = self.forward(&input)?;
            let next = argmax(logits.as_slice().expect("contiguous logits")) as TokenId;
            out.push(next);
            input.tokens.push(next);
            if stop.contains(&next) {
                break;
            }
        }
        Ok(out)
    }
}
