//! Episodic dual replay: a small store of recent trajectories (on-policy
//! proxy) beside a large replay store, plus the per-transition λ cache.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One joint step of experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub terminated: bool,
    pub available_actions: Vec<Vec<bool>>,
    /// Per-agent probability the behaviour policy gave the taken action.
    pub behavior_probs: Vec<f64>,
}

/// A stored episode. `final_*` hold the observation after the last step,
/// which bootstraps truncated (non-terminated) episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub episode_id: u64,
    pub birth_step: u64,
    pub final_state: Vec<f64>,
    pub final_observations: Vec<Vec<f64>>,
    pub final_available: Vec<Vec<bool>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn terminated(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.terminated)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    /// Check the structural invariants: non-empty, terminal only at the end,
    /// actions available, rewards finite.
    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::Contract("empty trajectory".into()));
        }
        let last = self.transitions.len() - 1;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.terminated && i != last {
                return Err(Error::Contract(format!(
                    "terminal transition at step {i} of {}",
                    last + 1
                )));
            }
            if !t.reward.is_finite() {
                return Err(Error::Contract(format!("non-finite reward at step {i}")));
            }
            if t.actions.len() != t.available_actions.len() {
                return Err(Error::Contract("action/mask count mismatch".into()));
            }
            for (a, mask) in t.actions.iter().zip(&t.available_actions) {
                if !mask.get(*a).copied().unwrap_or(false) {
                    return Err(Error::Contract(format!("unavailable action {a} at step {i}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertionMode {
    /// New trajectories enter both stores.
    DualInsert,
    /// New trajectories enter the small store; its evictions move to the large one.
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CacheMode {
    /// `clear_cache` removes entries, forcing recomputation.
    Clear,
    /// `clear_cache` overwrites entries with a literal λ = 0.
    ResetToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoreKind {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CacheSlot {
    Empty,
    Value(f64),
    Zeroed,
}

/// FIFO ring of trajectories with a fixed episode capacity.
#[derive(Debug, Clone)]
pub struct TrajectoryStore {
    capacity: usize,
    items: VecDeque<Arc<Trajectory>>,
}

impl TrajectoryStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.clamp(1, 1024)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Trajectory>> {
        self.items.iter()
    }

    fn push(&mut self, t: Arc<Trajectory>) -> Option<Arc<Trajectory>> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(t);
        evicted
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Arc<Trajectory>>> {
        if self.items.is_empty() {
            return Err(Error::NotReady("trajectory store is empty".into()));
        }
        Ok((0..batch_size)
            .map(|_| Arc::clone(&self.items[rng.random_range(0..self.items.len())]))
            .collect())
    }
}

/// Paired on/off stores with the λ cache.
#[derive(Debug, Clone)]
pub struct DualBuffer {
    on: TrajectoryStore,
    off: TrajectoryStore,
    mode: InsertionMode,
    cache_mode: CacheMode,
    resident: HashMap<u64, u8>,
    cache: HashMap<u64, Vec<CacheSlot>>,
}

impl DualBuffer {
    /// `C_on = max(1, C_off / ratio)`.
    pub fn new(off_capacity: usize, ratio: usize, mode: InsertionMode, cache_mode: CacheMode) -> Self {
        let on_capacity = (off_capacity / ratio.max(1)).max(1);
        Self::with_capacities(on_capacity, off_capacity, mode, cache_mode)
    }

    pub fn with_capacities(
        on_capacity: usize,
        off_capacity: usize,
        mode: InsertionMode,
        cache_mode: CacheMode,
    ) -> Self {
        Self {
            on: TrajectoryStore::new(on_capacity),
            off: TrajectoryStore::new(off_capacity),
            mode,
            cache_mode,
            resident: HashMap::new(),
            cache: HashMap::new(),
        }
    }

    pub fn store(&self, kind: StoreKind) -> &TrajectoryStore {
        match kind {
            StoreKind::On => &self.on,
            StoreKind::Off => &self.off,
        }
    }

    pub fn insertion_mode(&self) -> InsertionMode {
        self.mode
    }

    pub fn insert(&mut self, t: Trajectory) -> Result<()> {
        t.validate()?;
        let t = Arc::new(t);
        let mut evicted = Vec::new();
        match self.mode {
            InsertionMode::DualInsert => {
                *self.resident.entry(t.episode_id).or_default() += 2;
                evicted.extend(self.on.push(Arc::clone(&t)));
                evicted.extend(self.off.push(t));
            }
            InsertionMode::Cascade => {
                *self.resident.entry(t.episode_id).or_default() += 1;
                if let Some(old) = self.on.push(t) {
                    // moves from D_on to D_off: residency unchanged
                    *self.resident.entry(old.episode_id).or_default() += 1;
                    evicted.push(Arc::clone(&old));
                    evicted.extend(self.off.push(old));
                }
            }
        }
        for e in evicted {
            let id = e.episode_id;
            if let Some(n) = self.resident.get_mut(&id) {
                *n -= 1;
                if *n == 0 {
                    self.resident.remove(&id);
                    self.cache.remove(&id);
                }
            }
        }
        Ok(())
    }

    pub fn sample_batch(
        &self,
        kind: StoreKind,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Arc<Trajectory>>> {
        self.store(kind).sample(batch_size, rng)
    }

    pub fn is_resident(&self, episode_id: u64) -> bool {
        self.resident.contains_key(&episode_id)
    }

    pub fn lambda_cache_get(&self, episode_id: u64, step: usize) -> Option<f64> {
        match self.cache.get(&episode_id)?.get(step)? {
            CacheSlot::Empty => None,
            CacheSlot::Value(v) => Some(*v),
            CacheSlot::Zeroed => Some(0.0),
        }
    }

    pub fn lambda_cache_set(&mut self, episode_id: u64, step: usize, lambda: f64) -> Result<()> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::Contract(format!("cached λ {lambda} outside (0,1)")));
        }
        if !self.is_resident(episode_id) {
            return Err(Error::Contract(format!(
                "episode {episode_id} is not resident in the buffer"
            )));
        }
        let slots = self.cache.entry(episode_id).or_default();
        if slots.len() <= step {
            slots.resize(step + 1, CacheSlot::Empty);
        }
        slots[step] = CacheSlot::Value(lambda);
        Ok(())
    }

    /// Number of filled cache entries.
    pub fn cache_len(&self) -> usize {
        self.cache
            .values()
            .flat_map(|v| v.iter())
            .filter(|s| !matches!(s, CacheSlot::Empty))
            .count()
    }

    pub fn clear_cache(&mut self) {
        match self.cache_mode {
            CacheMode::Clear => self.cache.clear(),
            CacheMode::ResetToZero => {
                for slot in self.cache.values_mut().flat_map(|v| v.iter_mut()) {
                    if matches!(slot, CacheSlot::Value(_)) {
                        *slot = CacheSlot::Zeroed;
                    }
                }
            }
        }
    }

    /// All computed (non-reset) cached values; each lies in `(0,1)`.
    pub fn cached_values(&self) -> Vec<f64> {
        self.cache
            .values()
            .flat_map(|v| v.iter())
            .filter_map(|s| match s {
                CacheSlot::Value(v) => Some(*v),
                _ => None,
            })
            .collect()
    }

    pub fn cached_episode_ids(&self) -> Vec<u64> {
        self.cache.keys().copied().collect()
    }
}
