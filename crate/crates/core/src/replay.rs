//! Bounded FIFO transition store with per-state inclusion filtering.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_index, Error, Result};
use crate::mdp::Transition;

/// Replay buffer whose `push` keeps a transition from state `s` only with
/// probability `inclusion_prob[s]`. The filter runs at push time; sampling
/// is uniform over whatever was stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Transition>,
    inclusion_prob: Vec<f64>,
}

impl ReplayBuffer {
    /// Empty buffer for an MDP with `n_states` states, every inclusion
    /// probability 1.
    pub fn new(capacity: usize, n_states: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::ConfigInvalid("buffer capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 20)),
            inclusion_prob: vec![1.0; n_states],
        })
    }

    /// Buffer sized to hold `transitions` exactly, filled without filtering.
    pub fn from_transitions(transitions: &[Transition], n_states: usize) -> Result<Self> {
        let mut buffer = Self::new(transitions.len().max(1), n_states)?;
        for t in transitions {
            check_index("state", t.state, n_states)?;
            buffer.entries.push_back(*t);
        }
        Ok(buffer)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &Transition> {
        self.entries.iter()
    }

    pub fn inclusion_prob(&self, state: usize) -> f64 {
        self.inclusion_prob.get(state).copied().unwrap_or(1.0)
    }

    /// Sets the inclusion probability of one state.
    pub fn set_inclusion_prob(&mut self, state: usize, p: f64) -> Result<()> {
        check_index("state", state, self.inclusion_prob.len())?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::ConfigInvalid(format!("inclusion probability {p} not in [0, 1]")));
        }
        self.inclusion_prob[state] = p;
        Ok(())
    }

    /// Offers `t` to the buffer. Returns whether it was stored. A full buffer
    /// evicts its oldest entry.
    ///
    /// The random source is consulted only when the inclusion probability of
    /// `t.state` is strictly between 0 and 1.
    pub fn push<R: Rng + ?Sized>(&mut self, t: Transition, rng: &mut R) -> bool {
        let p = self.inclusion_prob(t.state);
        let accepted = if p >= 1.0 {
            true
        } else if p <= 0.0 {
            false
        } else {
            rng.random::<f64>() < p
        };
        if accepted {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(t);
        }
        accepted
    }

    /// Draws `batch_size` entries uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Transition>> {
        let mut out = Vec::with_capacity(batch_size);
        self.sample_into(batch_size, rng, &mut out)?;
        Ok(out)
    }

    /// Allocation-free variant of [`sample_batch`](Self::sample_batch).
    pub fn sample_into<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
        out: &mut Vec<Transition>,
    ) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        out.clear();
        let n = self.entries.len();
        out.extend((0..batch_size).map(|_| self.entries[rng.random_range(0..n)]));
        Ok(())
    }
}
