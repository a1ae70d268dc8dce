//! FIFO experience replay with seeded uniform sampling.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One replay record. The state is a detached copy of the fused feature the
/// diagnostic agent saw; the next state equals the state within a step.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Vec<f32>,
    pub actions: Vec<u8>,
    pub rewards: Vec<i8>,
    pub next_state: Vec<f32>,
    pub episode: usize,
    pub step: usize,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    store: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            capacity,
            store: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Push one transition, evicting the oldest beyond capacity.
    pub fn push(&mut self, t: Transition) {
        if self.store.len() == self.capacity {
            self.store.pop_front();
        }
        self.store.push_back(t);
    }

    /// Uniform sample of `batch` distinct transitions. `None` signals the
    /// caller to skip the update when the buffer is still too small.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Option<Vec<&Transition>> {
        if self.store.len() < batch || batch == 0 {
            return None;
        }
        // Partial Fisher-Yates over the index range: first `batch` entries
        // are a uniform draw without replacement.
        let n = self.store.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..batch {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        Some(idx[..batch].iter().map(|&i| &self.store[i]).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.store.iter()
    }
}
