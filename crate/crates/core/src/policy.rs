//! Behavior-cloning policy whose trainable state is entirely parameter tokens.
//!
//! The instruction and observation encoders are frozen and regenerated from
//! the seed; a stack of [`TpstBlock`]s and a Pattention action head read their
//! weights from a [`TokenPool`] through a per-task mask.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcore::{GradError, Graph, Tensor, Var};
use crate::pattention::{pattention_pooled, PattentionError, PoolVars, Selection, Sublayer, TpstBlock};
use crate::seeds::derive_seed;
use crate::tasksuite::{Action, ObservationWindow, RolloutPolicy, SuiteError, ACTION_DIM, OBS_DIM};
use crate::tokenpool::{LayerMask, LayerSpec, PoolBudget, PoolError, TaskMask, TokenPool};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("policy contract: {0}")]
    Contract(String),
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Pattention(#[from] PattentionError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Vocabulary size of the word codebook behind [`embed_instruction`].
/// Ceiling on every size in a config, so decoded configs cannot request
/// absurd allocations.
pub const MAX_DIM: usize = 1 << 14;
pub const CODEBOOK_SIZE: usize = 4096;
const CODEBOOK_SEED: u64 = 0x5eed_c0de_b00c;

/// Unit-norm vector standing in for a frozen language model's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionEmbedding {
    pub text: String,
    pub vector: Vec<f64>,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn codebook_row(word: &str, dim: usize) -> Vec<f64> {
    let index = derive_seed(CODEBOOK_SEED, &[b"word", word.as_bytes()]) % CODEBOOK_SIZE as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        CODEBOOK_SEED,
        &[b"row", &index.to_le_bytes(), &(dim as u64).to_le_bytes()],
    ));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Mean of per-word codebook vectors, L2-normalized.
pub fn embed_instruction(text: &str, dim: usize) -> Result<InstructionEmbedding, PolicyError> {
    let words = words(text);
    if words.is_empty() {
        return Err(PolicyError::Contract("instruction has no words".into()));
    }
    if dim == 0 {
        return Err(PolicyError::Contract("embedding width must be positive".into()));
    }
    let mut sum = vec![0.0; dim];
    for w in &words {
        for (s, v) in sum.iter_mut().zip(codebook_row(w, dim)) {
            *s += v;
        }
    }
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(PolicyError::Contract("instruction embedding vanished".into()));
    }
    Ok(InstructionEmbedding {
        text: text.to_string(),
        vector: sum.into_iter().map(|v| v / norm).collect(),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Number of TPST blocks.
    pub blocks: usize,
    pub width: usize,
    pub tokens_per_task: usize,
    pub mu: f64,
    pub window: usize,
    pub action_dim: usize,
    pub heads: usize,
    pub seed: u64,
    /// Rows per pool.
    pub pool_size: usize,
    pub obs_dim: usize,
    /// Instruction embedding width.
    pub language_dim: usize,
    pub token_attention: bool,
    /// Refill slots freed by the share cap with fresh rows.
    pub refill: bool,
    pub value_std: f64,
    pub head_value_std: f64,
    /// Key init std is `key_gain / sqrt(width)`.
    pub key_gain: f64,
    /// Std of the frozen observation projection.
    pub observation_gain: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 32,
            tokens_per_task: 16,
            mu: 0.5,
            window: 4,
            action_dim: ACTION_DIM,
            heads: 1,
            seed: 0,
            pool_size: 160,
            obs_dim: OBS_DIM,
            language_dim: 32,
            token_attention: true,
            refill: true,
            value_std: 1.0,
            head_value_std: 1.0,
            key_gain: 1.0,
            observation_gain: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let positive = [
            ("blocks", self.blocks),
            ("width", self.width),
            ("tokens_per_task", self.tokens_per_task),
            ("window", self.window),
            ("action_dim", self.action_dim),
            ("heads", self.heads),
            ("pool_size", self.pool_size),
            ("obs_dim", self.obs_dim),
            ("language_dim", self.language_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(PolicyError::Config(format!("{name} must be positive")));
        }
        if let Some((name, v)) = positive.iter().find(|(_, v)| *v > MAX_DIM) {
            return Err(PolicyError::Config(format!("{name} = {v} exceeds {MAX_DIM}")));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(PolicyError::Config(format!("mu {} is outside [0, 1]", self.mu)));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(PolicyError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.pool_size < self.tokens_per_task {
            return Err(PolicyError::Config(format!(
                "pool_size {} is below tokens_per_task {}",
                self.pool_size, self.tokens_per_task
            )));
        }
        for (name, v) in [
            ("value_std", self.value_std),
            ("head_value_std", self.head_value_std),
            ("key_gain", self.key_gain),
            ("observation_gain", self.observation_gain),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PolicyError::Config(format!("{name} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// Pattention layers: five per block plus the action head.
    pub fn layer_count(&self) -> usize {
        self.blocks * Sublayer::COUNT + 1
    }

    pub fn head_layer(&self) -> usize {
        self.blocks * Sublayer::COUNT
    }

    pub fn seq_len(&self) -> usize {
        1 + self.window
    }

    pub fn budget(&self) -> PoolBudget {
        PoolBudget {
            tokens_per_task: self.tokens_per_task,
            mu: self.mu,
            capacity: self.pool_size,
        }
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let key_std = self.key_gain / (self.width as f64).sqrt();
        let mut specs = vec![
            LayerSpec {
                d_in: self.width,
                d_out: self.width,
                key_std,
                value_std: self.value_std,
            };
            self.blocks * Sublayer::COUNT
        ];
        specs.push(LayerSpec {
            d_in: self.width,
            d_out: self.action_dim,
            key_std,
            value_std: self.head_value_std,
        });
        specs
    }
}

/// How a forward pass exposes a task's rows to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Every selected row is differentiable.
    Unified,
    /// Shared rows are detached; only specific rows are differentiable.
    Split,
}

/// Seeded projections that are never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoders {
    /// `language_dim × width`.
    pub instruction: Tensor,
    /// `obs_dim × width`.
    pub observation: Tensor,
    /// `(1 + window) × width` sinusoidal offsets.
    pub positions: Tensor,
}

impl FrozenEncoders {
    pub fn new(config: &PolicyConfig) -> Self {
        let gaussian = |tag: &[u8], rows: usize, cols: usize, std: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[b"encoder", tag]));
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            Tensor::matrix(rows, cols, data).expect("consistent shape")
        };
        let d = config.width;
        let t = config.seq_len();
        let mut pos = Vec::with_capacity(t * d);
        for p in 0..t {
            for i in 0..d {
                let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = p as f64 * rate;
                pos.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
        Self {
            instruction: gaussian(b"instruction", config.language_dim, d, 1.0),
            observation: gaussian(b"observation", config.obs_dim, d, config.observation_gain),
            positions: Tensor::matrix(t, d, pos).expect("consistent shape"),
        }
    }

    /// Projects one observation to a single width-`d` token (no offsets).
    pub fn encode_observation(&self, obs: &[f64]) -> Result<Tensor, PolicyError> {
        if obs.len() != self.observation.rows() {
            return Err(GradError::Shape(format!(
                "observation has {} entries, encoder expects {}",
                obs.len(),
                self.observation.rows()
            ))
            .into());
        }
        Ok(Tensor::matrix(1, obs.len(), obs.to_vec())?.matmul(&self.observation)?)
    }

    pub fn encode_instruction(&self, e: &[f64]) -> Result<Tensor, PolicyError> {
        if e.len() != self.instruction.rows() {
            return Err(GradError::Shape(format!(
                "instruction embedding has {} entries, encoder expects {}",
                e.len(),
                self.instruction.rows()
            ))
            .into());
        }
        Ok(Tensor::matrix(1, e.len(), e.to_vec())?.matmul(&self.instruction)?)
    }
}

/// Mean squared error over batch and action dimensions.
pub fn bc_loss(pred: &Tensor, expert: &Tensor) -> Result<f64, PolicyError> {
    let mut g = Graph::new();
    let (p, e) = (g.constant(pred.clone()), g.constant(expert.clone()));
    let loss = g.mse(p, e)?;
    Ok(g.value(loss).data()[0])
}

/// Gradients of one Pattention layer's key and value pools.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    /// Floats in every key and value pool.
    pub pool_floats: usize,
    /// Floats in the frozen encoders; never handed to an optimizer.
    pub frozen_floats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyState", into = "PolicyState")]
pub struct Policy {
    config: PolicyConfig,
    pool: TokenPool,
    encoders: FrozenEncoders,
}

#[derive(Serialize, Deserialize)]
struct PolicyState {
    config: PolicyConfig,
    pool: TokenPool,
}

impl TryFrom<PolicyState> for Policy {
    type Error = PolicyError;

    fn try_from(state: PolicyState) -> Result<Self, PolicyError> {
        Policy::from_parts(state.config, state.pool)
    }
}

impl From<Policy> for PolicyState {
    fn from(p: Policy) -> Self {
        PolicyState {
            config: p.config,
            pool: p.pool,
        }
    }
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[b"pool-init"]));
        let pool = TokenPool::new(&config.layer_specs(), config.budget(), config.seed, &mut rng)?;
        Self::from_parts(config, pool)
    }

    /// Reassembles a policy from a stored pool, checking they agree.
    pub fn from_parts(config: PolicyConfig, pool: TokenPool) -> Result<Self, PolicyError> {
        config.validate()?;
        pool.validate()?;
        let specs = config.layer_specs();
        if pool.layers().len() != specs.len() {
            return Err(PolicyError::Contract(format!(
                "pool has {} layers, config needs {}",
                pool.layers().len(),
                specs.len()
            )));
        }
        for (i, (layer, spec)) in pool.layers().iter().zip(&specs).enumerate() {
            if layer.d_in() != spec.d_in || layer.d_out() != spec.d_out {
                return Err(PolicyError::Contract(format!(
                    "layer {i} is {}→{}, config needs {}→{}",
                    layer.d_in(),
                    layer.d_out(),
                    spec.d_in,
                    spec.d_out
                )));
            }
        }
        if pool.tokens_per_task() != config.tokens_per_task {
            return Err(PolicyError::Contract(
                "pool and config disagree on tokens per task".into(),
            ));
        }
        let encoders = FrozenEncoders::new(&config);
        Ok(Self { config, pool, encoders })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn pool(&self) -> &TokenPool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut TokenPool {
        &mut self.pool
    }

    pub fn encoders(&self) -> &FrozenEncoders {
        &self.encoders
    }

    pub fn embed(&self, text: &str) -> Result<InstructionEmbedding, PolicyError> {
        embed_instruction(text, self.config.language_dim)
    }

    pub fn census(&self) -> Census {
        Census {
            pool_floats: self.pool.parameter_count(),
            frozen_floats: self.encoders.instruction.numel()
                + self.encoders.observation.numel()
                + self.encoders.positions.numel(),
        }
    }

    /// Input tokens for a batch: per sequence, the instruction token followed
    /// by one token per window frame, plus positional offsets.
    fn input_tokens(&self, windows: &[ObservationWindow], e: &[f64]) -> Result<Tensor, PolicyError> {
        let d = self.config.width;
        let t = self.config.seq_len();
        let instr = self.encoders.encode_instruction(e)?;
        let mut data = Vec::with_capacity(windows.len() * t * d);
        for w in windows {
            if w.capacity() != self.config.window {
                return Err(GradError::Shape(format!(
                    "window holds {} frames, policy expects {}",
                    w.capacity(),
                    self.config.window
                ))
                .into());
            }
            let frames = w.padded();
            if frames.is_empty() {
                return Err(PolicyError::Contract("empty observation window".into()));
            }
            for p in 0..t {
                let tok = if p == 0 {
                    instr.clone()
                } else {
                    self.encoders.encode_observation(&frames[p - 1])?
                };
                data.extend(
                    tok.data()
                        .iter()
                        .zip(self.encoders.positions.row(p))
                        .map(|(a, b)| a + b),
                );
            }
        }
        Ok(Tensor::matrix(windows.len() * t, d, data)?)
    }

    /// Builds the forward graph; returns the `batch × action_dim` output and
    /// the pool leaves (differentiable only in training).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        windows: &[ObservationWindow],
        e: &[f64],
        mask: &TaskMask,
        mode: MaskMode,
        trainable: bool,
    ) -> Result<(Var, Vec<PoolVars>), PolicyError> {
        if windows.is_empty() {
            return Err(PolicyError::Contract("empty batch".into()));
        }
        self.pool.check_mask(mask)?;
        let pools: Vec<PoolVars> = self
            .pool
            .layers()
            .iter()
            .map(|l| PoolVars {
                keys: g.leaf(l.keys.clone(), trainable),
                values: g.leaf(l.values.clone(), trainable),
            })
            .collect();
        fn selection(m: &LayerMask, mode: MaskMode) -> Selection<'_> {
            match mode {
                MaskMode::Unified => Selection::Unified(&m.selected),
                MaskMode::Split => Selection::Split {
                    shared: &m.shared,
                    specific: &m.specific,
                },
            }
        }
        let t = self.config.seq_len();
        let mut x = g.constant(self.input_tokens(windows, e)?);
        let mut block = TpstBlock::new(self.config.width, self.config.heads);
        block.token_attention = self.config.token_attention;
        for b in 0..self.config.blocks {
            let base = b * Sublayer::COUNT;
            let layer_pools: [PoolVars; Sublayer::COUNT] = std::array::from_fn(|s| pools[base + s]);
            let selections: [Selection<'_>; Sublayer::COUNT] =
                std::array::from_fn(|s| selection(&mask.layers[base + s], mode));
            x = block.forward(g, x, t, &layer_pools, &selections)?;
        }
        let last: Vec<usize> = (0..windows.len()).map(|b| b * t + t - 1).collect();
        let h = g.gather_rows(x, &last)?;
        let h = g.rms_norm_rows(h, block.norm_eps);
        let head = self.config.head_layer();
        let out = pattention_pooled(g, h, pools[head], selection(&mask.layers[head], mode))?;
        Ok((out, pools))
    }

    /// Normalized actions for a batch under `mask`.
    pub fn act_batch(
        &self,
        windows: &[ObservationWindow],
        e: &[f64],
        mask: &TaskMask,
        mode: MaskMode,
    ) -> Result<Tensor, PolicyError> {
        let mut g = Graph::new();
        let (out, _) = self.forward_graph(&mut g, windows, e, mask, mode, false)?;
        Ok(g.value(out).clone())
    }

    /// Action for a registered task.
    pub fn policy_forward(
        &self,
        window: &ObservationWindow,
        e: &InstructionEmbedding,
        task: usize,
        mode: MaskMode,
    ) -> Result<Vec<f64>, PolicyError> {
        let mask = self
            .pool
            .mask(task)
            .ok_or_else(|| PolicyError::Contract(format!("task {task} has no registered mask")))?;
        Ok(self
            .act_batch(std::slice::from_ref(window), &e.vector, mask, mode)?
            .into_data())
    }

    /// Behavior-cloning loss on a batch and gradients for every pool layer.
    pub fn loss_and_gradients(
        &self,
        windows: &[ObservationWindow],
        targets: &Tensor,
        e: &[f64],
        mask: &TaskMask,
        mode: MaskMode,
    ) -> Result<(f64, Vec<LayerGrads>), PolicyError> {
        let mut g = Graph::new();
        let (out, pools) = self.forward_graph(&mut g, windows, e, mask, mode, true)?;
        let target = g.constant(targets.clone());
        let loss = g.mse(out, target)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let layers = pools
            .iter()
            .map(|p| LayerGrads {
                keys: grads.take(p.keys),
                values: grads.take(p.values),
            })
            .collect();
        Ok((value, layers))
    }

    /// Pool tensors in optimizer order: layer `l` keys get id `2l`, values `2l+1`.
    pub fn parameters_mut(&mut self) -> Vec<(usize, &mut Tensor)> {
        self.pool
            .tensors_mut()
            .enumerate()
            .flat_map(|(l, (k, v))| [(2 * l, k), (2 * l + 1, v)])
            .collect()
    }

    /// Gradients keyed by optimizer id.
    pub fn gradient_map(grads: Vec<LayerGrads>) -> BTreeMap<usize, Tensor> {
        grads
            .into_iter()
            .enumerate()
            .flat_map(|(l, g)| [(2 * l, g.keys), (2 * l + 1, g.values)])
            .collect()
    }
}

/// A policy bound to one task, usable for rollouts. Outputs are scaled from
/// normalized units back to simulator units.
pub struct BoundPolicy<'a> {
    pub policy: &'a Policy,
    pub embedding: &'a [f64],
    pub mask: &'a TaskMask,
    pub max_action: f64,
}

impl RolloutPolicy for BoundPolicy<'_> {
    fn act(&self, windows: &[ObservationWindow]) -> Result<Vec<Action>, SuiteError> {
        let out = self
            .policy
            .act_batch(windows, self.embedding, self.mask, MaskMode::Unified)
            .map_err(|e| SuiteError::Policy(e.to_string()))?;
        if out.cols() != ACTION_DIM {
            return Err(SuiteError::Policy(format!(
                "policy emits {} action dims, simulator needs {ACTION_DIM}",
                out.cols()
            )));
        }
        Ok((0..out.rows())
            .map(|r| [out.get(r, 0) * self.max_action, out.get(r, 1) * self.max_action])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{central_difference, relative_error};

    fn small_config() -> PolicyConfig {
        PolicyConfig {
            blocks: 2,
            width: 8,
            tokens_per_task: 4,
            window: 3,
            heads: 2,
            pool_size: 16,
            language_dim: 8,
            seed: 11,
            ..PolicyConfig::default()
        }
    }

    fn window(seed: u64, capacity: usize, frames: usize) -> ObservationWindow {
        let mut w = ObservationWindow::new(capacity);
        for f in 0..frames {
            let obs = std::array::from_fn(|i| ((seed as f64 + 1.3 * f as f64 + 0.7 * i as f64).sin() + 1.0) / 2.0);
            w.push(obs);
        }
        w
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let a = embed_instruction("push the red block", 64).unwrap();
        let b = embed_instruction("push the red block", 64).unwrap();
        assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| x.to_bits() == y.to_bits()));
        let norm = a.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(embed_instruction("  ", 64).is_err());
        assert_eq!(embed_instruction("Push THE red block", 64).unwrap().vector, a.vector);
    }

    #[test]
    fn related_instructions_are_closer_than_unrelated() {
        let red = embed_instruction("push the red block", 64).unwrap();
        let blue = embed_instruction("push the blue block", 64).unwrap();
        let other = embed_instruction("reach yellow marker quickly", 64).unwrap();
        let related = cosine(&red.vector, &blue.vector);
        let disjoint = cosine(&red.vector, &other.vector);
        assert!((cosine(&red.vector, &red.vector) - 1.0).abs() < 1e-12);
        assert!(related < 1.0 && related > disjoint, "{related} vs {disjoint}");
        // Three of four words shared: expected overlap is about 3/4.
        assert!(related > 0.5);
    }

    #[test]
    fn observation_encoder_reads_matrix_rows() {
        let enc = FrozenEncoders::new(&small_config());
        assert!(enc
            .encode_observation(&[0.0; OBS_DIM])
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut basis = [0.0; OBS_DIM];
        basis[3] = 1.0;
        assert_eq!(enc.encode_observation(&basis).unwrap().data(), enc.observation.row(3));
        assert!(enc.encode_observation(&[0.0; 3]).is_err());
        assert_eq!(FrozenEncoders::new(&small_config()), enc);
    }

    #[test]
    fn bc_loss_examples() {
        let pred = Tensor::from_rows(&[[1.0, 1.0]]).unwrap();
        let expert = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(bc_loss(&pred, &expert).unwrap(), 1.0);
        assert_eq!(bc_loss(&pred, &pred).unwrap(), 0.0);
        assert!(bc_loss(&pred, &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn bc_loss_gradient_matches_finite_differences() {
        let pred = Tensor::from_rows(&[[0.3, -0.2], [1.1, 0.4], [-0.7, 0.05]]).unwrap();
        let expert = Tensor::from_rows(&[[0.1, 0.0], [0.9, 0.9], [-1.0, 0.3]]).unwrap();
        let mut g = Graph::new();
        let p = g.param(pred.clone());
        let e = g.constant(expert.clone());
        let loss = g.mse(p, e).unwrap();
        let analytic = g.backward(loss).unwrap().get(p);
        let numeric = central_difference(&pred, 1e-5, |x| {
            bc_loss(x, &expert).map_err(|_| GradError::Contract("loss".into()))
        })
        .unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    fn registered_policy() -> (Policy, InstructionEmbedding) {
        let mut policy = Policy::new(small_config()).unwrap();
        let e = policy.embed("push the red block to the left").unwrap();
        let mask = policy.pool().select_for_task(0, &e.vector, 0.5, true).unwrap();
        policy.pool_mut().register_task(mask).unwrap();
        (policy, e)
    }

    #[test]
    fn forward_shape_and_determinism() {
        let (policy, e) = registered_policy();
        let w = window(1, 3, 2);
        let a = policy.policy_forward(&w, &e, 0, MaskMode::Unified).unwrap();
        let b = policy.policy_forward(&w, &e, 0, MaskMode::Unified).unwrap();
        assert_eq!(a.len(), ACTION_DIM);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(policy.policy_forward(&w, &e, 7, MaskMode::Unified).is_err());
    }

    #[test]
    fn action_shape_holds_for_any_window() {
        for width in [1, 2, 5] {
            let config = PolicyConfig {
                window: width,
                ..small_config()
            };
            let mut policy = Policy::new(config).unwrap();
            let e = policy.embed("reach the top marker").unwrap();
            let mask = policy.pool().select_fresh_block(0).unwrap();
            policy.pool_mut().register_task(mask).unwrap();
            let w = window(2, width, 7);
            assert_eq!(
                policy.policy_forward(&w, &e, 0, MaskMode::Unified).unwrap().len(),
                ACTION_DIM
            );
        }
    }

    #[test]
    fn split_and_unified_agree() {
        let (mut policy, e0) = registered_policy();
        let e1 = policy.embed("push the blue block to the left").unwrap();
        let mask = policy.pool().select_for_task(1, &e1.vector, 0.5, true).unwrap();
        assert!(mask.shared_total() > 0, "related task should share rows");
        policy.pool_mut().register_task(mask).unwrap();
        let _ = e0;
        let w = window(3, 3, 3);
        let u = policy.policy_forward(&w, &e1, 1, MaskMode::Unified).unwrap();
        let s = policy.policy_forward(&w, &e1, 1, MaskMode::Split).unwrap();
        for (a, b) in u.iter().zip(&s) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn split_gradients_skip_shared_rows() {
        let (mut policy, _) = registered_policy();
        let e1 = policy.embed("push the blue block to the left").unwrap();
        let mask = policy.pool().select_for_task(1, &e1.vector, 0.5, true).unwrap();
        let windows: Vec<_> = (0..4).map(|i| window(i, 3, 3)).collect();
        let targets = Tensor::filled(4, ACTION_DIM, 0.5);
        let (_, grads) = policy
            .loss_and_gradients(&windows, &targets, &e1.vector, &mask, MaskMode::Split)
            .unwrap();
        for (l, (layer, g)) in mask.layers.iter().zip(&grads).enumerate() {
            let n = policy.pool().capacity();
            for r in 0..n {
                let norm: f64 = g.keys.row(r).iter().chain(g.values.row(r)).map(|v| v * v).sum();
                if !layer.specific.contains(&r) {
                    assert_eq!(norm, 0.0, "layer {l} row {r}");
                }
            }
            assert!(layer
                .specific
                .iter()
                .any(|&r| g.values.row(r).iter().any(|&v| v != 0.0)));
        }
        let _ = policy.pool_mut();
    }

    #[test]
    fn census_counts_only_pools() {
        let policy = Policy::new(small_config()).unwrap();
        let c = policy.census();
        let cfg = small_config();
        let block_layers = cfg.blocks * Sublayer::COUNT;
        let expected = block_layers * cfg.pool_size * 2 * cfg.width + cfg.pool_size * (cfg.width + cfg.action_dim);
        assert_eq!(c.pool_floats, expected);
        let mut p = policy.clone();
        let total: usize = p.parameters_mut().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(total, c.pool_floats);
    }

    #[test]
    fn serde_round_trip_rebuilds_encoders() {
        let (policy, _) = registered_policy();
        let json = serde_json::to_string(&policy).unwrap();
        let back: Policy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, policy);
    }

    #[test]
    fn config_validation() {
        assert!(PolicyConfig {
            mu: 1.5,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(PolicyConfig {
            heads: 3,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(PolicyConfig {
            blocks: 0,
            ..small_config()
        }
        .validate()
        .is_err());
        assert!(PolicyConfig::default().validate().is_ok());
    }
}
