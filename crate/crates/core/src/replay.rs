//! Two-buffer experience replay: `current` holds the task being learned,
//! `old` everything before it. Batches mix the two under a replay cap β that
//! bounds the old-data share, so at least `1 - β` of each batch comes from
//! the current task.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub episode_id: u64,
    pub step_in_episode: usize,
    /// Diagnostics only; task-agnostic agents never read it.
    pub task_index: usize,
}

#[derive(Clone, Debug)]
pub struct FifoBuffer {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
}

impl FifoBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { records: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends, evicting the oldest record when full.
    pub fn push(&mut self, rec: TransitionRecord) {
        if self.capacity == 0 {
            return;
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(rec);
    }

    pub fn get(&self, i: usize) -> Option<&TransitionRecord> {
        self.records.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    fn drain_all(&mut self) -> impl Iterator<Item = TransitionRecord> + '_ {
        self.records.drain(..)
    }
}

/// Up to `h` transitions preceding `anchor` in the same episode, oldest first.
#[derive(Clone, Debug)]
pub struct TrajectoryWindow<'a> {
    pub history: Vec<&'a TransitionRecord>,
    pub anchor: &'a TransitionRecord,
}

/// Uniformly samples `count` anchors (with replacement) and attaches their
/// in-episode history. Windows are cut at the episode start and at any gap
/// left by eviction.
pub fn sample_windows<'a, R: Rng + ?Sized>(
    buffer: &'a FifoBuffer,
    count: usize,
    h: usize,
    rng: &mut R,
) -> Result<Vec<TrajectoryWindow<'a>>> {
    if buffer.is_empty() {
        return Err(Error::InvalidState("cannot sample from an empty buffer".into()));
    }
    let n = buffer.len();
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..n);
            window_at(buffer, i, h)
        })
        .collect())
}

pub fn window_at(buffer: &FifoBuffer, i: usize, h: usize) -> TrajectoryWindow<'_> {
    let anchor = &buffer.records[i];
    let mut start = i;
    while i - start < h && start > 0 {
        let prev = &buffer.records[start - 1];
        let next = &buffer.records[start];
        if prev.episode_id != anchor.episode_id || prev.step_in_episode + 1 != next.step_in_episode {
            break;
        }
        start -= 1;
    }
    TrajectoryWindow { history: buffer.records.range(start..i).collect(), anchor }
}

/// Number of current- and old-buffer samples in a batch of `b`.
///
/// The current share is `max(1/n, 1 - β)` so that at least `1 - β` of the
/// batch is spent on the task being learned and the two shares sum to one.
/// With no old data the whole batch is current.
pub fn batch_split(n: usize, b: usize, beta: f64, old_nonempty: bool) -> (usize, usize) {
    if n <= 1 || !old_nonempty {
        return (b, 0);
    }
    let floor_share = (1.0 - beta).clamp(0.0, 1.0);
    let share = (1.0 / n as f64).max(floor_share);
    let rounded = (b as f64 * share).round() as usize;
    let floor = (b as f64 * floor_share - 1e-9).ceil().max(0.0) as usize;
    let n_cur = rounded.max(floor).min(b);
    (n_cur, b - n_cur)
}

#[derive(Clone, Debug)]
pub struct BufferPair {
    pub current: FifoBuffer,
    pub old: FifoBuffer,
    /// 1-based index of the task being learned.
    pub n: usize,
}

impl BufferPair {
    pub fn new(capacity: usize, old_capacity: usize) -> Self {
        Self { current: FifoBuffer::new(capacity), old: FifoBuffer::new(old_capacity), n: 1 }
    }

    /// Moves the current buffer into the old one at a task boundary.
    pub fn rollover(&mut self) {
        let moved: Vec<TransitionRecord> = self.current.drain_all().collect();
        for rec in moved {
            self.old.push(rec);
        }
        self.n += 1;
    }

    /// Task boundary without replay: current data is discarded.
    pub fn discard_current(&mut self) {
        self.current.clear();
        self.n += 1;
    }
}

pub fn rollover(pair: &mut BufferPair) {
    pair.rollover();
}
