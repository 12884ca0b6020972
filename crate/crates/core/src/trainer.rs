//! Lifelong behavior-cloning over a task sequence.
//!
//! Each task selects pool rows, trains only the rows it may own, registers its
//! mask, and then every task seen so far is re-evaluated to fill one row of
//! the success matrix. All randomness is derived from the run seed and the
//! position in the run, so a run resumed from a checkpoint replays exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gradcore::{GradError, Optimizer, OptimizerConfig, Tensor};
use crate::metrics::{MetricTriple, MetricsError, NbtConvention, SuccessMatrix};
use crate::policy::{BoundPolicy, InstructionEmbedding, MaskMode, Policy, PolicyConfig, PolicyError};
use crate::seeds::derive_seed;
use crate::tasksuite::{
    evaluate_policy, hex_prefix, make_suite, scripted_expert, Demonstration, ObservationWindow, SuiteError, SuiteSpec,
    Task,
};
use crate::tokenpool::{LayerMask, PoolError, TaskMask};

pub const CHECKPOINT_VERSION: u32 = 1;
/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Suite(#[from] SuiteError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training diverged on task {task} (epoch {epoch}, step {step}): loss {loss}\n{dump}")]
    Divergence {
        task: usize,
        epoch: usize,
        step: usize,
        loss: f64,
        dump: String,
    },
    #[error("run is already complete")]
    Finished,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint belongs to config {found}, current config is {expected}")]
    ConfigMismatch { found: String, expected: String },
}

/// How task masks are chosen and trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Language-guided selection; shared rows frozen, specific rows trained.
    T2s,
    /// A fresh block of rows per task, nothing shared.
    NaiveIndependent,
    /// Rows keyed by task id instead of the instruction, then split as in t2s.
    TaskId,
    /// One set of rows fine-tuned on every task in turn.
    Sequential,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::T2s, Mode::NaiveIndependent, Mode::TaskId, Mode::Sequential];

    pub fn name(self) -> &'static str {
        match self {
            Mode::T2s => "t2s",
            Mode::NaiveIndependent => "naive-independent",
            Mode::TaskId => "task-id",
            Mode::Sequential => "sequential",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected t2s, naive-independent, task-id or sequential)"))
    }
}

/// Step-size schedule within one task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the task's steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifelongRunConfig {
    pub suite: SuiteSpec,
    pub suite_seed: u64,
    /// Seeds demonstrations, minibatches, task-id masks and evaluation.
    pub seed: u64,
    pub policy: PolicyConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub mode: Mode,
    pub eval_episodes: usize,
    pub demos_per_task: usize,
    /// Training order as suite task ids; `None` trains in id order.
    pub order: Option<Vec<usize>>,
    pub nbt_convention: NbtConvention,
}

impl Default for LifelongRunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteSpec::default_suite(),
            suite_seed: 0,
            seed: 0,
            policy: PolicyConfig::default(),
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerConfig {
                learning_rate: 5e-3,
                ..OptimizerConfig::default()
            },
            lr_schedule: LrSchedule::default(),
            mode: Mode::T2s,
            eval_episodes: 20,
            demos_per_task: 50,
            order: None,
            nbt_convention: NbtConvention::default(),
        }
    }
}

impl LifelongRunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.policy.validate()?;
        let k = self.suite.num_tasks;
        if k == 0 || k > crate::policy::MAX_DIM {
            return Err(TrainError::Config(format!(
                "suite size {k} is outside 1..={}",
                crate::policy::MAX_DIM
            )));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("eval_episodes", self.eval_episodes),
            ("demos_per_task", self.demos_per_task),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.optimizer.learning_rate.is_finite() && self.optimizer.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if let Some(order) = &self.order {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted.len() != k || sorted.iter().enumerate().any(|(i, &t)| i != t) {
                return Err(TrainError::Config(format!(
                    "order {order:?} is not a permutation of 0..{k}"
                )));
            }
        }
        Ok(())
    }

    /// Same config with both the run seed and the model seed set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.policy.seed = seed;
        self
    }

    pub fn order(&self) -> Vec<usize> {
        self.order
            .clone()
            .unwrap_or_else(|| (0..self.suite.num_tasks).collect())
    }

    /// Content hash of the full configuration (16 hex digits).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_prefix(&Sha256::digest(&json), 16)
    }
}

/// Per-task bookkeeping, one row of the token-usage ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub position: usize,
    pub task: usize,
    pub instruction: String,
    /// Rows summed over every Pattention layer.
    pub selected_tokens: usize,
    pub shared_tokens: usize,
    pub specific_tokens: usize,
    /// Rows the optimizer may change for this task.
    pub trainable_tokens: usize,
    /// Used rows across all layers after registering this task.
    pub cumulative_used: usize,
    /// Most shared rows in any single layer.
    pub max_layer_shared: usize,
    pub fwt_one_epoch: f64,
    pub diagonal: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Largest gradient magnitude observed on a frozen selected row.
    pub frozen_grad_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub policy: Policy,
    pub matrix: SuccessMatrix,
    /// Number of tasks trained so far (next position in the order).
    pub completed: usize,
    pub reports: Vec<TaskReport>,
    /// Rows reused by every task in sequential mode.
    pub sequential_rows: Option<Vec<LayerMask>>,
    /// Optimizer of the most recently trained task.
    pub last_optimizer: Option<Optimizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    /// All randomness is a pure function of this seed and `state.completed`.
    pub seed: u64,
    pub state: RunState,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }
}

/// Writes `checkpoint` through a temporary file and an atomic rename.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = checkpoint.encode();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Parses checkpoint bytes, checking the format version first.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    #[derive(Deserialize)]
    struct Header {
        version: u32,
    }
    let header: Header = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cp: Checkpoint = serde_json::from_slice(bytes).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if cp.state.completed != cp.state.reports.len() {
        return Err(CheckpointError::Corrupt(format!(
            "state.completed = {} but {} task reports",
            cp.state.completed,
            cp.state.reports.len()
        )));
    }
    if cp.state.completed > cp.state.matrix.size() {
        return Err(CheckpointError::Corrupt(format!(
            "state.completed = {} exceeds matrix size {}",
            cp.state.completed,
            cp.state.matrix.size()
        )));
    }
    Ok(cp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub config_hash: String,
    pub order: Vec<usize>,
    pub matrix: SuccessMatrix,
    pub metrics: MetricTriple,
    pub reports: Vec<TaskReport>,
    pub policy: Policy,
}

/// Expert demonstrations for `task`, seeded by the run seed.
pub fn demonstrations(config: &LifelongRunConfig, task: &Task) -> Result<Vec<Demonstration>, TrainError> {
    Ok(scripted_expert(
        task,
        &config.suite.sim,
        derive_seed(config.seed, &[b"demonstrations"]),
        config.demos_per_task,
    )?)
}

/// (window, normalized action) pairs for every step of every demonstration.
pub fn training_pairs(
    demos: &[Demonstration],
    window: usize,
    max_action: f64,
) -> (Vec<ObservationWindow>, Vec<[f64; 2]>) {
    let mut windows = Vec::new();
    let mut targets = Vec::new();
    for d in demos {
        for t in 0..d.len() {
            windows.push(ObservationWindow::from_history(&d.observations, t, window));
            targets.push([d.actions[t][0] / max_action, d.actions[t][1] / max_action]);
        }
    }
    (windows, targets)
}

/// Drives a lifelong run one task at a time.
pub struct Runner {
    config: LifelongRunConfig,
    hash: String,
    tasks: Vec<Task>,
    order: Vec<usize>,
    embeddings: BTreeMap<usize, InstructionEmbedding>,
    state: RunState,
}

impl Runner {
    pub fn new(config: LifelongRunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let policy = Policy::new(config.policy.clone())?;
        let state = RunState {
            policy,
            matrix: SuccessMatrix::new(config.suite.num_tasks),
            completed: 0,
            reports: Vec::new(),
            sequential_rows: None,
            last_optimizer: None,
        };
        Self::with_state(config, state)
    }

    /// Continues a run from `checkpoint`, refusing one made under another config.
    pub fn resume(config: LifelongRunConfig, checkpoint: Checkpoint) -> Result<Self, TrainError> {
        config.validate()?;
        let expected = config.hash();
        if checkpoint.config_hash != expected {
            return Err(CheckpointError::ConfigMismatch {
                found: checkpoint.config_hash,
                expected,
            }
            .into());
        }
        if checkpoint.state.policy.config() != &config.policy
            || checkpoint.state.matrix.size() != config.suite.num_tasks
        {
            return Err(CheckpointError::Corrupt("state does not match the config".into()).into());
        }
        Self::with_state(config, checkpoint.state)
    }

    fn with_state(config: LifelongRunConfig, state: RunState) -> Result<Self, TrainError> {
        let tasks = make_suite(&config.suite, config.suite_seed)?;
        let embeddings = tasks
            .iter()
            .map(|t| Ok((t.id, state.policy.embed(&t.instruction)?)))
            .collect::<Result<_, PolicyError>>()?;
        Ok(Self {
            hash: config.hash(),
            order: config.order(),
            config,
            tasks,
            embeddings,
            state,
        })
    }

    pub fn config(&self) -> &LifelongRunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.completed == self.order.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            state: self.state.clone(),
        }
    }

    fn choose_mask(&self, task: &Task) -> Result<TaskMask, TrainError> {
        let pool = self.state.policy.pool();
        let e = &self.embeddings[&task.id].vector;
        let mu = self.config.policy.mu;
        let refill = self.config.policy.refill;
        Ok(match self.config.mode {
            Mode::T2s => pool.select_for_task(task.id, e, mu, refill)?,
            Mode::TaskId => {
                pool.select_by_task_id(task.id, e, mu, refill, derive_seed(self.config.seed, &[b"task-id"]))?
            }
            Mode::NaiveIndependent => pool.select_fresh_block(task.id)?,
            Mode::Sequential => match &self.state.sequential_rows {
                Some(layers) => TaskMask {
                    task: task.id,
                    layers: layers.clone(),
                },
                None => {
                    let first = pool.select_for_task(task.id, e, 0.0, refill)?;
                    TaskMask {
                        task: task.id,
                        layers: first
                            .layers
                            .into_iter()
                            .map(|l| LayerMask::all_specific(l.selected))
                            .collect(),
                    }
                }
            },
        })
    }

    fn evaluate(&self, task: &Task, mask: &TaskMask) -> Result<f64, TrainError> {
        let bound = BoundPolicy {
            policy: &self.state.policy,
            embedding: &self.embeddings[&task.id].vector,
            mask,
            max_action: self.config.suite.sim.max_action,
        };
        Ok(evaluate_policy(
            &bound,
            task,
            &self.config.suite.sim,
            self.config.policy.window,
            self.config.eval_episodes,
            derive_seed(self.config.seed, &[b"evaluation"]),
        )?)
    }

    /// Trains the next task in the order and records its evaluation row.
    pub fn step(&mut self) -> Result<&TaskReport, TrainError> {
        if self.is_done() {
            return Err(TrainError::Finished);
        }
        let position = self.state.completed;
        let task = self.tasks[self.order[position]].clone();
        let mask = self.choose_mask(&task)?;
        let demos = demonstrations(&self.config, &task)?;
        let outcome = self.train_task(position, &task, &mask, &demos)?;

        if self.config.mode == Mode::Sequential && self.state.sequential_rows.is_none() {
            self.state.sequential_rows = Some(mask.layers.clone());
        }
        self.state.policy.pool_mut().register_task(mask.clone())?;

        for q in 0..=position {
            let earlier = &self.tasks[self.order[q]];
            let m = self
                .state
                .policy
                .pool()
                .mask(earlier.id)
                .expect("registered above")
                .clone();
            let rate = self.evaluate(earlier, &m)?;
            self.state.matrix.set(position, q, rate)?;
        }
        let pool = self.state.policy.pool();
        let sequential = self.config.mode == Mode::Sequential;
        let report = TaskReport {
            position,
            task: task.id,
            instruction: task.instruction.clone(),
            selected_tokens: mask.layers.iter().map(|l| l.selected.len()).sum(),
            shared_tokens: mask.shared_total(),
            specific_tokens: mask.specific_total(),
            trainable_tokens: if sequential {
                mask.layers.iter().map(|l| l.selected.len()).sum()
            } else {
                mask.specific_total()
            },
            cumulative_used: pool.layers().iter().map(|l| l.used_count()).sum(),
            max_layer_shared: mask.layers.iter().map(|l| l.shared.len()).max().unwrap_or(0),
            fwt_one_epoch: outcome.fwt_one_epoch,
            diagonal: self.state.matrix.get(position, position).expect("set above"),
            final_loss: outcome.final_loss,
            steps: outcome.steps,
            frozen_grad_max: outcome.frozen_grad_max,
        };
        self.state.last_optimizer = Some(outcome.optimizer);
        self.state.reports.push(report);
        self.state.completed += 1;
        Ok(self.state.reports.last().expect("just pushed"))
    }

    fn train_task(
        &mut self,
        position: usize,
        task: &Task,
        mask: &TaskMask,
        demos: &[Demonstration],
    ) -> Result<TrainOutcome, TrainError> {
        let sequential = self.config.mode == Mode::Sequential;
        let n = self.state.policy.pool().capacity();
        // Trainable rows per layer; everything else stays bit-identical.
        let trainable: Vec<&[usize]> = mask
            .layers
            .iter()
            .map(|l| if sequential { &l.selected[..] } else { &l.specific[..] })
            .collect();
        let frozen: Vec<Vec<usize>> = mask
            .layers
            .iter()
            .zip(&trainable)
            .map(|(l, t)| l.selected.iter().copied().filter(|r| !t.contains(r)).collect())
            .collect();
        let forward_mode = if sequential { MaskMode::Unified } else { MaskMode::Split };

        let mut optimizer = Optimizer::new(self.config.optimizer);
        for (l, rows) in trainable.iter().enumerate() {
            let layer = self.state.policy.pool().layer(l);
            let mut row_mask = vec![false; n];
            for &r in *rows {
                row_mask[r] = true;
            }
            optimizer.register(2 * l, n, layer.d_in(), row_mask.clone())?;
            optimizer.register(2 * l + 1, n, layer.d_out(), row_mask)?;
        }

        let (windows, targets) = training_pairs(demos, self.config.policy.window, self.config.suite.sim.max_action);
        let e = self.embeddings[&task.id].vector.clone();
        let mut indices: Vec<usize> = (0..windows.len()).collect();
        let total_steps = self.config.epochs * windows.len().div_ceil(self.config.batch_size);
        let base_lr = self.config.optimizer.learning_rate;
        let mut steps = 0;
        let mut final_loss = f64::NAN;
        let mut frozen_grad_max: f64 = 0.0;
        let mut fwt_one_epoch = f64::NAN;
        for epoch in 0..self.config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                self.config.seed,
                &[
                    b"minibatch",
                    &(position as u64).to_le_bytes(),
                    &(epoch as u64).to_le_bytes(),
                ],
            ));
            indices.sort_unstable();
            indices.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in indices.chunks(self.config.batch_size) {
                let batch: Vec<ObservationWindow> = chunk.iter().map(|&i| windows[i].clone()).collect();
                let target = Tensor::matrix(chunk.len(), 2, chunk.iter().flat_map(|&i| targets[i]).collect())?;
                let (loss, grads) = self
                    .state
                    .policy
                    .loss_and_gradients(&batch, &target, &e, mask, forward_mode)?;
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                    return Err(TrainError::Divergence {
                        task: task.id,
                        epoch,
                        step: steps,
                        loss,
                        dump: divergence_dump(&self.state.policy, mask, &grads),
                    });
                }
                for (g, rows) in grads.iter().zip(&frozen) {
                    for &r in rows {
                        for v in g.keys.row(r).iter().chain(g.values.row(r)) {
                            frozen_grad_max = frozen_grad_max.max(v.abs());
                        }
                    }
                }
                let grads = Policy::gradient_map(grads);
                optimizer.set_learning_rate(self.config.lr_schedule.rate(base_lr, steps, total_steps));
                optimizer.step(&mut self.state.policy.parameters_mut(), &grads)?;
                epoch_loss += loss;
                batches += 1;
                steps += 1;
            }
            final_loss = epoch_loss / batches as f64;
            if epoch == 0 {
                fwt_one_epoch = self.evaluate(task, mask)?;
            }
        }
        Ok(TrainOutcome {
            optimizer,
            steps,
            final_loss,
            frozen_grad_max: if sequential { 0.0 } else { frozen_grad_max },
            fwt_one_epoch,
        })
    }

    pub fn run_to_end(mut self) -> Result<RunOutcome, TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        self.finish()
    }

    /// Metrics of a completed run.
    pub fn finish(self) -> Result<RunOutcome, TrainError> {
        if !self.is_done() {
            return Err(TrainError::Config("run has tasks left to train".into()));
        }
        let metrics = MetricTriple::compute(&self.state.matrix, self.config.nbt_convention)?;
        Ok(RunOutcome {
            config_hash: self.hash,
            order: self.order,
            matrix: self.state.matrix,
            metrics,
            reports: self.state.reports,
            policy: self.state.policy,
        })
    }
}

struct TrainOutcome {
    optimizer: Optimizer,
    steps: usize,
    final_loss: f64,
    frozen_grad_max: f64,
    fwt_one_epoch: f64,
}

fn divergence_dump(policy: &Policy, mask: &TaskMask, grads: &[crate::policy::LayerGrads]) -> String {
    let mut out = String::new();
    for (l, (layer, g)) in mask.layers.iter().zip(grads).enumerate() {
        let pool = policy.pool().layer(l);
        let max_param = layer
            .selected
            .iter()
            .flat_map(|&r| pool.keys.row(r).iter().chain(pool.values.row(r)))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        out.push_str(&format!(
            "layer {l}: max |param| {max_param:.3e}, grad norm keys {:.3e} values {:.3e}\n",
            g.keys.norm(),
            g.values.norm()
        ));
    }
    out
}

pub fn run_lifelong(config: LifelongRunConfig) -> Result<RunOutcome, TrainError> {
    Runner::new(config)?.run_to_end()
}

/// The forgetting control: one token set fine-tuned on every task.
pub fn run_mode_sequential(mut config: LifelongRunConfig) -> Result<RunOutcome, TrainError> {
    config.mode = Mode::Sequential;
    run_lifelong(config)
}

/// Rows whose keys or values differ between two pools, per layer.
pub fn changed_rows(before: &Policy, after: &Policy) -> Vec<Vec<usize>> {
    before
        .pool()
        .layers()
        .iter()
        .zip(after.pool().layers())
        .map(|(a, b)| {
            (0..a.capacity())
                .filter(|&r| {
                    let differs = |x: &[f64], y: &[f64]| x.iter().zip(y).any(|(p, q)| p.to_bits() != q.to_bits());
                    differs(a.keys.row(r), b.keys.row(r)) || differs(a.values.row(r), b.values.row(r))
                })
                .collect()
        })
        .collect()
}
