//! Task-balanced reservoir buffer for the experience-replay baseline.
//!
//! Capacity is split evenly over the tasks seen so far (remainder to the
//! earliest tasks); each task keeps a uniform reservoir sample of its stream
//! within its quota. Starting a task immediately down-samples older
//! reservoirs to their new quota.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReservoir<T> {
    pub task_id: usize,
    pub reservoir: Vec<T>,
    pub seen_count: u64,
    pub quota: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    per_task: Vec<TaskReservoir<T>>,
    rng_seed: u64,
    #[serde(skip, default = "placeholder_rng")]
    rng: ChaCha8Rng,
}

fn placeholder_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize, rng_seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Argument("replay capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            per_task: Vec::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_task.iter().map(|t| t.reservoir.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tasks(&self) -> &[TaskReservoir<T>] {
        &self.per_task
    }

    /// Registers a new task, recomputes quotas and shrinks older reservoirs.
    pub fn start_task(&mut self, task_id: usize) -> Result<()> {
        if self.per_task.iter().any(|t| t.task_id == task_id) {
            return Err(Error::Argument(format!("task {task_id} already started")));
        }
        self.per_task.push(TaskReservoir {
            task_id,
            reservoir: Vec::new(),
            seen_count: 0,
            quota: 0,
        });
        let n = self.per_task.len();
        let (base, rem) = (self.capacity / n, self.capacity % n);
        for (i, t) in self.per_task.iter_mut().enumerate() {
            t.quota = base + usize::from(i < rem);
            if t.reservoir.len() > t.quota {
                let mut keep = sample(&mut self.rng, t.reservoir.len(), t.quota).into_vec();
                keep.sort_unstable();
                t.reservoir = keep.into_iter().map(|j| t.reservoir[j].clone()).collect();
            }
        }
        Ok(())
    }

    /// Reservoir update within the task's quota. An unseen task is started
    /// first.
    pub fn observe(&mut self, sample: T, task_id: usize) {
        if !self.per_task.iter().any(|t| t.task_id == task_id) {
            self.start_task(task_id).expect("task is new");
        }
        let t = self
            .per_task
            .iter_mut()
            .find(|t| t.task_id == task_id)
            .expect("registered above");
        t.seen_count += 1;
        if t.reservoir.len() < t.quota {
            t.reservoir.push(sample);
        } else if t.quota > 0 {
            let j = self.rng.gen_range(0..t.seen_count);
            if (j as usize) < t.quota {
                t.reservoir[j as usize] = sample;
            }
        }
    }

    /// `n` draws, uniform with replacement over all stored samples.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Result<Vec<T>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let total = self.len();
        if total == 0 {
            return Err(Error::State("cannot sample from an empty replay buffer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let mut k = rng.gen_range(0..total);
                for t in &self.per_task {
                    if k < t.reservoir.len() {
                        return t.reservoir[k].clone();
                    }
                    k -= t.reservoir.len();
                }
                unreachable!("index within pooled length")
            })
            .collect())
    }

    /// Capacity never exceeded, every reservoir within its quota, and, for
    /// tasks that have seen at least their quota, sizes within one of each
    /// other.
    pub fn check_invariants(&self) -> Result<()> {
        if self.len() > self.capacity {
            return Err(Error::State("replay buffer over capacity".into()));
        }
        for t in &self.per_task {
            if t.reservoir.len() > t.quota {
                return Err(Error::State(format!("task {} over quota", t.task_id)));
            }
            let expect = (t.seen_count as usize).min(t.quota);
            if t.reservoir.len() < expect {
                return Err(Error::State(format!("task {} under-filled", t.task_id)));
            }
        }
        let full: Vec<usize> = self
            .per_task
            .iter()
            .filter(|t| t.seen_count as usize >= t.quota)
            .map(|t| t.reservoir.len())
            .collect();
        if let (Some(lo), Some(hi)) = (full.iter().min(), full.iter().max()) {
            if hi - lo > 1 {
                return Err(Error::State("task reservoirs unbalanced".into()));
            }
        }
        Ok(())
    }

    /// Restores the RNG after deserialization.
    pub fn reseed(&mut self) {
        let seen: u64 = self.per_task.iter().map(|t| t.seen_count).sum();
        self.rng = ChaCha8Rng::seed_from_u64(self.rng_seed ^ seen);
    }
}
