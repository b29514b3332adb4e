//! Shared state between the engine and the annotation service.
//!
//! The engine publishes its progress and, when it needs human labels, opens a
//! round with the pending items. Service workers post labels concurrently; the
//! round closes (and the waiting engine wakes) when every pending id has a
//! label. Until then a repeated post for an id overwrites the earlier one.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::engine::RoundRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Training,
    AwaitingLabels,
    Finished,
}

/// One image waiting for a label. Never carries the ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingItem {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    /// 8-bit grayscale, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub status: SessionStatus,
    pub round: usize,
    pub labeled_count: usize,
    pub budget_remaining: usize,
    pub pending_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PostError {
    #[error("id {0} is not pending")]
    UnknownId(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("round is closed")]
    RoundClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum WaitError {
    #[error("session closed")]
    SessionClosed,
    #[error("timed out waiting for labels")]
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOutcome {
    Recorded,
    Overwrote { previous: usize },
    /// This post completed the round.
    RoundComplete,
}

#[derive(Debug)]
struct Inner {
    status: SessionStatus,
    round: usize,
    labeled_count: usize,
    budget_remaining: usize,
    pending: Vec<PendingItem>,
    received: BTreeMap<usize, usize>,
    completed: Option<BTreeMap<usize, usize>>,
    /// Ids labeled in earlier rounds of this session.
    closed_ids: BTreeSet<usize>,
    cancelled: bool,
    overwrites: usize,
    history: Vec<RoundRecord>,
}

#[derive(Debug)]
pub struct SessionStore {
    session_id: String,
    class_names: Vec<String>,
    inner: Mutex<Inner>,
    ready: Condvar,
}

impl SessionStore {
    pub fn new(session_id: impl Into<String>, class_names: Vec<String>) -> Self {
        Self {
            session_id: session_id.into(),
            class_names,
            inner: Mutex::new(Inner {
                status: SessionStatus::Training,
                round: 0,
                labeled_count: 0,
                budget_remaining: 0,
                pending: Vec::new(),
                received: BTreeMap::new(),
                completed: None,
                closed_ids: BTreeSet::new(),
                cancelled: false,
                overwrites: 0,
                history: Vec::new(),
            }),
            ready: Condvar::new(),
        }
    }

    /// Class names `"0"`, `"1"`, ... for `k` classes.
    pub fn numbered_classes(k: usize) -> Vec<String> {
        (0..k).map(|c| c.to_string()).collect()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panicking writer cannot leave the store half-updated, so poisoning is ignored
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Engine side: record progress and switch to training.
    pub fn set_training(&self, round: usize, labeled_count: usize, budget_remaining: usize) {
        let mut s = self.lock();
        s.status = SessionStatus::Training;
        s.round = round;
        s.labeled_count = labeled_count;
        s.budget_remaining = budget_remaining;
    }

    /// Engine side: publish a query batch and start accepting labels.
    pub fn open_round(&self, round: usize, items: Vec<PendingItem>) {
        let mut s = self.lock();
        s.round = round;
        s.status = if items.is_empty() { SessionStatus::Training } else { SessionStatus::AwaitingLabels };
        s.completed = if items.is_empty() { Some(BTreeMap::new()) } else { None };
        s.pending = items;
        s.received.clear();
        self.ready.notify_all();
    }

    /// Service side: record one label.
    pub fn post_label(&self, id: usize, label: usize) -> Result<PostOutcome, PostError> {
        let mut s = self.lock();
        if s.status != SessionStatus::AwaitingLabels || s.closed_ids.contains(&id) {
            return Err(PostError::RoundClosed);
        }
        if !s.pending.iter().any(|item| item.id == id) {
            return Err(PostError::UnknownId(id));
        }
        if label >= self.class_names.len() {
            return Err(PostError::LabelOutOfRange { label, num_classes: self.class_names.len() });
        }
        let previous = s.received.insert(id, label);
        if let Some(previous) = previous {
            s.overwrites += 1;
            return Ok(PostOutcome::Overwrote { previous });
        }
        if s.received.len() == s.pending.len() {
            let labels = std::mem::take(&mut s.received);
            s.closed_ids.extend(labels.keys().copied());
            s.completed = Some(labels);
            s.pending.clear();
            s.status = SessionStatus::Training;
            self.ready.notify_all();
            return Ok(PostOutcome::RoundComplete);
        }
        Ok(PostOutcome::Recorded)
    }

    /// Engine side: block until the open round is fully labeled.
    pub fn wait_for_labels(&self, timeout: Option<Duration>) -> Result<BTreeMap<usize, usize>, WaitError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut s = self.lock();
        loop {
            if s.cancelled {
                return Err(WaitError::SessionClosed);
            }
            if let Some(labels) = s.completed.take() {
                return Ok(labels);
            }
            s = match deadline {
                None => self.ready.wait(s).unwrap_or_else(|e| e.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(WaitError::Timeout);
                    }
                    self.ready.wait_timeout(s, d - now).unwrap_or_else(|e| e.into_inner()).0
                }
            };
        }
    }

    /// Abort the session; a waiting engine gets `SessionClosed`.
    pub fn cancel(&self) {
        let mut s = self.lock();
        s.cancelled = true;
        s.status = SessionStatus::Finished;
        s.pending.clear();
        s.received.clear();
        self.ready.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        self.lock().cancelled
    }

    pub fn finish(&self, labeled_count: usize, budget_remaining: usize) {
        let mut s = self.lock();
        s.status = SessionStatus::Finished;
        s.labeled_count = labeled_count;
        s.budget_remaining = budget_remaining;
        s.pending.clear();
    }

    pub fn push_record(&self, record: RoundRecord) {
        self.lock().history.push(record);
    }

    pub fn history(&self) -> Vec<RoundRecord> {
        self.lock().history.clone()
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let s = self.lock();
        SessionSnapshot {
            session_id: self.session_id.clone(),
            status: s.status,
            round: s.round,
            labeled_count: s.labeled_count,
            budget_remaining: s.budget_remaining,
            pending_count: s.pending.len() - s.received.len(),
        }
    }

    /// Pending items that have not received a label yet, or `None` when the
    /// session is not waiting for labels.
    pub fn open_queries(&self) -> Option<Vec<PendingItem>> {
        let s = self.lock();
        if s.status != SessionStatus::AwaitingLabels {
            return None;
        }
        Some(s.pending.iter().filter(|item| !s.received.contains_key(&item.id)).cloned().collect())
    }

    /// Number of label posts that replaced an earlier label.
    pub fn overwrite_count(&self) -> usize {
        self.lock().overwrites
    }
}
