//! Parameter token pools, usage masks, and language-guided token selection.
//!
//! Every Pattention layer owns a key pool and a value pool with the same row
//! count, plus a global usage mask marking rows that any registered task has
//! claimed. A task selects `j` rows per layer by cosine similarity to its
//! instruction embedding. Rows already in use become *shared* (read-only for
//! the new task, capped at `⌊μ·j⌋`), the rest are *specific* and trainable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Tensor};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("cannot select {requested} tokens from a pool of {capacity}")]
    Capacity { requested: usize, capacity: usize },
    #[error("layer {layer}: pool exhausted, need {needed} unused rows but only {available} remain")]
    Exhausted {
        layer: usize,
        needed: usize,
        available: usize,
    },
    #[error("task {0} is already registered")]
    DuplicateTask(usize),
    #[error("task {0} is not registered")]
    UnknownTask(usize),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("mask contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Tokens per task, share cap, and pool capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolBudget {
    pub tokens_per_task: usize,
    pub mu: f64,
    pub capacity: usize,
}

impl PoolBudget {
    pub fn validate(&self) -> Result<(), PoolError> {
        if self.tokens_per_task == 0 {
            return Err(PoolError::Budget("tokens per task must be at least 1".into()));
        }
        if self.capacity < self.tokens_per_task {
            return Err(PoolError::Budget(format!(
                "capacity {} is below tokens per task {}",
                self.capacity, self.tokens_per_task
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(PoolError::Budget(format!("mu {} is outside [0, 1]", self.mu)));
        }
        Ok(())
    }

    /// `⌊μ·j⌋`.
    pub fn share_cap(&self) -> usize {
        share_cap(self.mu, self.tokens_per_task)
    }
}

pub fn share_cap(mu: f64, j: usize) -> usize {
    // Guards products like 0.29 * 100 = 28.999999999999996.
    (mu * j as f64 + 1e-9).floor() as usize
}

/// Key/value pools of one Pattention layer and its global usage mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPool {
    pub keys: Tensor,
    pub values: Tensor,
    used: Vec<bool>,
    key_std: f64,
    value_std: f64,
}

impl LayerPool {
    pub fn random(rows: usize, d_in: usize, d_out: usize, key_std: f64, value_std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            keys: gaussian(rows, d_in, key_std, rng),
            values: gaussian(rows, d_out, value_std, rng),
            used: vec![false; rows],
            key_std,
            value_std,
        }
    }

    pub fn capacity(&self) -> usize {
        self.used.len()
    }

    pub fn used(&self) -> &[bool] {
        &self.used
    }

    pub fn used_count(&self) -> usize {
        self.used.iter().filter(|&&u| u).count()
    }

    pub fn d_in(&self) -> usize {
        self.keys.cols()
    }

    pub fn d_out(&self) -> usize {
        self.values.cols()
    }

    fn validate(&self) -> Result<(), PoolError> {
        let n = self.used.len();
        if self.keys.rows() != n || self.values.rows() != n || !self.keys.is_matrix() || !self.values.is_matrix() {
            return Err(PoolError::Contract(format!(
                "pool has {} key rows, {} value rows and {n} mask entries",
                self.keys.rows(),
                self.values.rows()
            )));
        }
        Ok(())
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Selection for one layer; index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub selected: Vec<usize>,
    pub shared: Vec<usize>,
    pub specific: Vec<usize>,
}

impl LayerMask {
    /// Every selected row is trainable.
    pub fn all_specific(mut rows: Vec<usize>) -> Self {
        rows.sort_unstable();
        Self {
            selected: rows.clone(),
            shared: Vec::new(),
            specific: rows,
        }
    }

    pub fn to_bools(&self, n: usize) -> Vec<bool> {
        let mut out = vec![false; n];
        for &r in &self.selected {
            if r < n {
                out[r] = true;
            }
        }
        out
    }

    fn validate(&self, j: usize, n: usize) -> Result<(), PoolError> {
        if self.selected.len() != j {
            return Err(PoolError::Contract(format!(
                "mask selects {} rows, expected {j}",
                self.selected.len()
            )));
        }
        for list in [&self.selected, &self.shared, &self.specific] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(PoolError::Contract("row lists must be strictly increasing".into()));
            }
            if let Some(&r) = list.iter().find(|&&r| r >= n) {
                return Err(PoolError::Contract(format!("row {r} is outside a pool of {n}")));
            }
        }
        let mut union: Vec<usize> = self.shared.iter().chain(&self.specific).copied().collect();
        union.sort_unstable();
        if union.windows(2).any(|w| w[0] == w[1]) {
            return Err(PoolError::Contract("shared and specific rows overlap".into()));
        }
        if union != self.selected {
            return Err(PoolError::Contract(
                "shared ∪ specific differs from the selection".into(),
            ));
        }
        Ok(())
    }
}

/// One task's selection across every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask {
    pub task: usize,
    pub layers: Vec<LayerMask>,
}

impl TaskMask {
    pub fn shared_total(&self) -> usize {
        self.layers.iter().map(|l| l.shared.len()).sum()
    }

    pub fn specific_total(&self) -> usize {
        self.layers.iter().map(|l| l.specific.len()).sum()
    }
}

/// Result of a Top-K similarity query.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    /// Selected rows, ascending.
    pub rows: Vec<usize>,
    /// Cosine similarity of every pool row to the query.
    pub similarities: Vec<f64>,
}

/// Rows ordered by decreasing similarity, ties by lower index.
fn ranked(similarities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..similarities.len()).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    order
}

pub fn cosine_similarities(query: &[f64], keys: &Tensor) -> Result<Vec<f64>, PoolError> {
    if query.len() != keys.cols() {
        return Err(GradError::Shape(format!(
            "query of width {} against keys of width {}",
            query.len(),
            keys.cols()
        ))
        .into());
    }
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((0..keys.rows())
        .map(|r| {
            let row = keys.row(r);
            let kn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if kn == 0.0 || qn == 0.0 {
                0.0
            } else {
                row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (kn * qn)
            }
        })
        .collect())
}

/// The `j` rows of `keys` most similar to `query`.
pub fn select_tokens(query: &[f64], keys: &Tensor, j: usize) -> Result<TopK, PoolError> {
    if j > keys.rows() {
        return Err(PoolError::Capacity {
            requested: j,
            capacity: keys.rows(),
        });
    }
    let similarities = cosine_similarities(query, keys)?;
    let mut rows: Vec<usize> = ranked(&similarities).into_iter().take(j).collect();
    rows.sort_unstable();
    Ok(TopK { rows, similarities })
}

/// Splits a selection into shared (already used) and specific (fresh) rows.
///
/// Shared rows above the cap are dropped lowest-similarity first. With
/// `refill`, each dropped slot is replaced by the most similar unused row not
/// yet selected, keeping the mask at `j` rows.
pub fn split_shared_specific(
    selected: &[usize],
    used: &[bool],
    mu: f64,
    j: usize,
    similarities: &[f64],
    refill: bool,
    layer: usize,
) -> Result<LayerMask, PoolError> {
    let n = used.len();
    if similarities.len() != n {
        return Err(PoolError::Contract(format!(
            "{} similarities for a pool of {n}",
            similarities.len()
        )));
    }
    if let Some(&r) = selected.iter().find(|&&r| r >= n) {
        return Err(PoolError::Contract(format!("row {r} is outside a pool of {n}")));
    }
    let cap = share_cap(mu, j);
    let by_sim =
        |rows: &mut Vec<usize>| rows.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    let mut shared: Vec<usize> = selected.iter().copied().filter(|&r| used[r]).collect();
    let mut specific: Vec<usize> = selected.iter().copied().filter(|&r| !used[r]).collect();
    by_sim(&mut shared);
    let dropped = shared.len().saturating_sub(cap);
    shared.truncate(cap);
    if refill && dropped > 0 {
        let candidates: Vec<usize> = ranked(similarities)
            .into_iter()
            .filter(|&r| !used[r] && !selected.contains(&r))
            .take(dropped)
            .collect();
        if candidates.len() < dropped {
            return Err(PoolError::Exhausted {
                layer,
                needed: dropped,
                available: candidates.len(),
            });
        }
        specific.extend(candidates);
    }
    shared.sort_unstable();
    specific.sort_unstable();
    let mut selected: Vec<usize> = shared.iter().chain(&specific).copied().collect();
    selected.sort_unstable();
    Ok(LayerMask {
        selected,
        shared,
        specific,
    })
}

/// Deterministic pseudo-random `j`-subset keyed by task id and seed.
pub fn mask_by_task_id(task: usize, j: usize, n: usize, seed: u64) -> Result<Vec<usize>, PoolError> {
    if j > n {
        return Err(PoolError::Capacity {
            requested: j,
            capacity: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"task-id", &(task as u64).to_le_bytes()]));
    let mut rows: Vec<usize> = (0..n).collect();
    for i in 0..j {
        let k = rng.random_range(i..n);
        rows.swap(i, k);
    }
    rows.truncate(j);
    rows.sort_unstable();
    Ok(rows)
}

/// Pools for every layer, plus the registry of task masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPool {
    layers: Vec<LayerPool>,
    tokens_per_task: usize,
    registry: BTreeMap<usize, TaskMask>,
    projection_seed: u64,
}

/// Shape and init scale of one layer's pools.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub key_std: f64,
    pub value_std: f64,
}

impl TokenPool {
    pub fn new(specs: &[LayerSpec], budget: PoolBudget, seed: u64, rng: &mut ChaCha8Rng) -> Result<Self, PoolError> {
        budget.validate()?;
        let layers = specs
            .iter()
            .map(|s| LayerPool::random(budget.capacity, s.d_in, s.d_out, s.key_std, s.value_std, rng))
            .collect();
        Ok(Self {
            layers,
            tokens_per_task: budget.tokens_per_task,
            registry: BTreeMap::new(),
            projection_seed: derive_seed(seed, &[b"language-projection"]),
        })
    }

    pub fn layers(&self) -> &[LayerPool] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerPool {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerPool {
        &mut self.layers[i]
    }

    /// Mutable key and value pools of every layer.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &mut Tensor)> {
        self.layers.iter_mut().map(|l| (&mut l.keys, &mut l.values))
    }

    pub fn tokens_per_task(&self) -> usize {
        self.tokens_per_task
    }

    pub fn capacity(&self) -> usize {
        self.layers.first().map_or(0, |l| l.capacity())
    }

    pub fn registry(&self) -> &BTreeMap<usize, TaskMask> {
        &self.registry
    }

    pub fn mask(&self, task: usize) -> Option<&TaskMask> {
        self.registry.get(&task)
    }

    /// Instruction embedding as seen by `layer`: the embedding itself when the
    /// widths agree, otherwise a fixed seeded projection, renormalized.
    pub fn layer_query(&self, embedding: &[f64], layer: usize) -> Vec<f64> {
        let d_in = self.layers[layer].d_in();
        if embedding.len() == d_in {
            return embedding.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.projection_seed, &[&(layer as u64).to_le_bytes()]));
        let proj = gaussian(embedding.len(), d_in, 1.0, &mut rng);
        let q = Tensor::matrix(1, embedding.len(), embedding.to_vec())
            .and_then(|e| e.matmul(&proj))
            .expect("projection shapes agree");
        let norm = q.norm().max(f64::MIN_POSITIVE);
        q.data().iter().map(|v| v / norm).collect()
    }

    /// Language-guided selection and shared/specific split for every layer.
    pub fn select_for_task(
        &self,
        task: usize,
        embedding: &[f64],
        mu: f64,
        refill: bool,
    ) -> Result<TaskMask, PoolError> {
        let j = self.tokens_per_task;
        let layers = (0..self.layers.len())
            .map(|l| {
                let pool = &self.layers[l];
                let top = select_tokens(&self.layer_query(embedding, l), &pool.keys, j)?;
                split_shared_specific(&top.rows, &pool.used, mu, j, &top.similarities, refill, l)
            })
            .collect::<Result<_, _>>()?;
        Ok(TaskMask { task, layers })
    }

    /// Task-id keyed selection (no language), split with the same cap.
    pub fn select_by_task_id(
        &self,
        task: usize,
        embedding: &[f64],
        mu: f64,
        refill: bool,
        seed: u64,
    ) -> Result<TaskMask, PoolError> {
        let j = self.tokens_per_task;
        let layers = (0..self.layers.len())
            .map(|l| {
                let pool = &self.layers[l];
                let rows = mask_by_task_id(
                    task,
                    j,
                    pool.capacity(),
                    derive_seed(seed, &[&(l as u64).to_le_bytes()]),
                )?;
                // Refill candidates are still ranked by similarity to the instruction.
                let sims = cosine_similarities(&self.layer_query(embedding, l), &pool.keys)?;
                split_shared_specific(&rows, &pool.used, mu, j, &sims, refill, l)
            })
            .collect::<Result<_, _>>()?;
        Ok(TaskMask { task, layers })
    }

    /// The first `j` unused rows of every layer, all specific.
    pub fn select_fresh_block(&self, task: usize) -> Result<TaskMask, PoolError> {
        let j = self.tokens_per_task;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, pool)| {
                let rows: Vec<usize> = (0..pool.capacity()).filter(|&r| !pool.used[r]).take(j).collect();
                if rows.len() < j {
                    return Err(PoolError::Exhausted {
                        layer: l,
                        needed: j,
                        available: rows.len(),
                    });
                }
                Ok(LayerMask::all_specific(rows))
            })
            .collect::<Result<_, _>>()?;
        Ok(TaskMask { task, layers })
    }

    /// Stores `mask` and ORs it into the usage masks.
    pub fn register_task(&mut self, mask: TaskMask) -> Result<(), PoolError> {
        if self.registry.contains_key(&mask.task) {
            return Err(PoolError::DuplicateTask(mask.task));
        }
        self.check_mask(&mask)?;
        for (pool, layer) in self.layers.iter_mut().zip(&mask.layers) {
            for &r in &layer.selected {
                pool.used[r] = true;
            }
        }
        self.registry.insert(mask.task, mask);
        Ok(())
    }

    /// Structural validity of `mask` against the current pools.
    pub fn check_mask(&self, mask: &TaskMask) -> Result<(), PoolError> {
        if mask.layers.len() != self.layers.len() {
            return Err(PoolError::Contract(format!(
                "mask covers {} layers, pool has {}",
                mask.layers.len(),
                self.layers.len()
            )));
        }
        for (pool, layer) in self.layers.iter().zip(&mask.layers) {
            layer.validate(self.tokens_per_task, pool.capacity())?;
        }
        Ok(())
    }

    /// Appends `extra` randomly initialized, unused rows to every layer.
    pub fn extend_pool(&mut self, extra: usize, rng: &mut ChaCha8Rng) -> Result<(), PoolError> {
        if extra == 0 {
            return Err(PoolError::Budget("extend_pool needs at least one row".into()));
        }
        for pool in &mut self.layers {
            let fresh = LayerPool::random(extra, pool.d_in(), pool.d_out(), pool.key_std, pool.value_std, rng);
            pool.keys.append_rows(&fresh.keys)?;
            pool.values.append_rows(&fresh.values)?;
            pool.used.extend(std::iter::repeat_n(false, extra));
        }
        Ok(())
    }

    /// Cross-checks pools, usage masks and registry (used after decoding).
    pub fn validate(&self) -> Result<(), PoolError> {
        let n = self.capacity();
        for pool in &self.layers {
            pool.validate()?;
            if pool.capacity() != n {
                return Err(PoolError::Contract("layers disagree on capacity".into()));
            }
        }
        if self.tokens_per_task == 0 || self.tokens_per_task > n {
            return Err(PoolError::Budget(format!(
                "{} tokens per task in a pool of {n}",
                self.tokens_per_task
            )));
        }
        let mut union = vec![vec![false; n]; self.layers.len()];
        for (&id, mask) in &self.registry {
            if mask.task != id {
                return Err(PoolError::Contract(format!(
                    "registry key {id} holds task {}",
                    mask.task
                )));
            }
            self.check_mask(mask)?;
            for (u, layer) in union.iter_mut().zip(&mask.layers) {
                for &r in &layer.selected {
                    u[r] = true;
                }
            }
        }
        for (u, pool) in union.iter().zip(&self.layers) {
            if u != &pool.used {
                return Err(PoolError::Contract(
                    "usage mask differs from the registered union".into(),
                ));
            }
        }
        Ok(())
    }

    /// Number of trainable floats across all pools.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.keys.numel() + l.values.numel()).sum()
    }
}
