//! Per-subtask FIFO replay buffers storing multi-reward transitions.
//!
//! Every environment step is recorded once, in the buffer of the subtask
//! that was active when the action was taken, and carries the full reward
//! vector over all subtasks, so that a critic can later be trained from a
//! neighbouring subtask's data by selecting its own reward channel.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("reward vector length {got} does not match subtask count {expected}")]
    RewardLength { expected: usize, got: usize },
}

/// One environment step: `(s, a, r_1..N, s', done)`.
///
/// `done` marks true task termination (goal reached); episode truncation by
/// the step limit is not terminal for bootstrapping purposes and is recorded
/// as `false`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO store with uniform minibatch sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    subtask_count: usize,
    records: VecDeque<TransitionRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, subtask_count: usize) -> ReplayBuffer {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, subtask_count, records: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn subtask_count(&self) -> usize {
        self.subtask_count
    }

    /// Appends a record, evicting the oldest one at capacity.
    pub fn push(&mut self, record: TransitionRecord) -> Result<(), ReplayError> {
        if record.rewards.len() != self.subtask_count {
            return Err(ReplayError::RewardLength {
                expected: self.subtask_count,
                got: record.rewards.len(),
            });
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }

    pub fn get(&self, index: usize) -> &TransitionRecord {
        &self.records[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    /// Draws `m` records uniformly with replacement, or `None` when fewer
    /// than `m` records are stored (the caller skips training in that case).
    pub fn sample<'a>(&'a self, m: usize, rng: &mut impl Rng) -> Option<Vec<&'a TransitionRecord>> {
        if self.records.len() < m {
            return None;
        }
        Some((0..m).map(|_| &self.records[rng.gen_range(0..self.records.len())]).collect())
    }
}

/// A minibatch assembled into tensors, one row per sample.
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    /// M x N reward matrix over all subtasks.
    pub rewards: Tensor,
    pub next_states: Tensor,
    /// Terminal mask, M x 1, 1.0 where done.
    pub dones: Tensor,
}

impl Batch {
    pub fn from_records(records: &[&TransitionRecord]) -> Batch {
        assert!(!records.is_empty(), "empty minibatch");
        let m = records.len();
        let sd = records[0].state.len();
        let ad = records[0].action.len();
        let nr = records[0].rewards.len();
        let mut states = Vec::with_capacity(m * sd);
        let mut actions = Vec::with_capacity(m * ad);
        let mut rewards = Vec::with_capacity(m * nr);
        let mut next_states = Vec::with_capacity(m * sd);
        let mut dones = Vec::with_capacity(m);
        for r in records {
            states.extend_from_slice(&r.state);
            actions.extend_from_slice(&r.action);
            rewards.extend_from_slice(&r.rewards);
            next_states.extend_from_slice(&r.next_state);
            dones.push(if r.done { 1.0 } else { 0.0 });
        }
        Batch {
            states: Tensor::new(m, sd, states),
            actions: Tensor::new(m, ad, actions),
            rewards: Tensor::new(m, nr, rewards),
            next_states: Tensor::new(m, sd, next_states),
            dones: Tensor::new(m, 1, dones),
        }
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column `j` of the reward matrix as an M x 1 tensor.
    pub fn reward_channel(&self, j: usize) -> Tensor {
        let m = self.rewards.rows();
        let data: Vec<f64> = (0..m).map(|i| self.rewards.get(i, j)).collect();
        Tensor::new(m, 1, data)
    }

    /// Row sums of the reward matrix (the combined scalar reward used by
    /// the single-agent baseline), as an M x 1 tensor.
    pub fn reward_sum(&self) -> Tensor {
        let m = self.rewards.rows();
        let data: Vec<f64> = (0..m).map(|i| self.rewards.row(i).iter().sum()).collect();
        Tensor::new(m, 1, data)
    }
}
