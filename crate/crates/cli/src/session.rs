// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bounded, expiring store of analyses for follow-up probes.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use patchlens_core::analysis::Analysis;

/// Lookup outcome that distinguishes ids that once existed.
pub enum Lookup {
    Live(Arc<Analysis>),
    Expired,
    Unknown,
}

struct Entry {
    analysis: Arc<Analysis>,
    last_used: Instant,
}

struct Inner {
    entries: HashMap<String, Entry>,
    /// Least recently used first.
    order: VecDeque<String>,
    gone: HashSet<String>,
    gone_order: VecDeque<String>,
}

/// LRU cache with a time-to-live. Evicted and expired ids are remembered
/// (up to a bound) so lookups can report them as expired.
pub struct SessionCache {
    capacity: usize,
    ttl: Duration,
    inner: Mutex<Inner>,
}

const TOMBSTONES: usize = 4096;

impl SessionCache {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        Self {
            capacity: capacity.max(1),
            ttl,
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                order: VecDeque::new(),
                gone: HashSet::new(),
                gone_order: VecDeque::new(),
            }),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, id: String, analysis: Arc<Analysis>) {
        self.insert_at(id, analysis, Instant::now());
    }

    pub fn insert_at(&self, id: String, analysis: Arc<Analysis>, now: Instant) {
        let mut g = self.lock();
        Self::expire(&mut g, self.ttl, now);
        g.order.retain(|k| k != &id);
        g.entries.insert(
            id.clone(),
            Entry {
                analysis,
                last_used: now,
            },
        );
        g.order.push_back(id);
        while g.entries.len() > self.capacity {
            let oldest = g.order.pop_front().expect("order tracks entries");
            g.entries.remove(&oldest);
            Self::bury(&mut g, oldest);
        }
    }

    pub fn get(&self, id: &str) -> Lookup {
        self.get_at(id, Instant::now())
    }

    pub fn get_at(&self, id: &str, now: Instant) -> Lookup {
        let mut g = self.lock();
        Self::expire(&mut g, self.ttl, now);
        if let Some(e) = g.entries.get_mut(id) {
            e.last_used = now;
            let a = e.analysis.clone();
            g.order.retain(|k| k != id);
            g.order.push_back(id.to_owned());
            return Lookup::Live(a);
        }
        if g.gone.contains(id) {
            Lookup::Expired
        } else {
            Lookup::Unknown
        }
    }

    fn expire(g: &mut Inner, ttl: Duration, now: Instant) {
        let stale: Vec<String> = g
            .entries
            .iter()
            .filter(|(_, e)| now.saturating_duration_since(e.last_used) > ttl)
            .map(|(k, _)| k.clone())
            .collect();
        for k in stale {
            g.entries.remove(&k);
            g.order.retain(|o| o != &k);
            Self::bury(g, k);
        }
    }

    fn bury(g: &mut Inner, id: String) {
        if g.gone.insert(id.clone()) {
            g.gone_order.push_back(id);
        }
        while g.gone_order.len() > TOMBSTONES {
            if let Some(old) = g.gone_order.pop_front() {
                g.gone.remove(&old);
            }
        }
    }
}
