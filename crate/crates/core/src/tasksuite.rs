//! Synthetic lifelong manipulation suites in a 2-D kinematic world.
//!
//! Tasks are either "reach the {region} marker" (move the agent into the goal
//! ball) or "push the {color} block to the {region}" (drag the block into the
//! goal ball; the block follows the agent while they are in contact).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seeds::derive_seed;

/// Length of an observation vector:
/// `[agent x, agent y, object x, object y, goal x, goal y, kind, contact]`.
pub const OBS_DIM: usize = 8;
pub const ACTION_DIM: usize = 2;

pub type Observation = [f64; OBS_DIM];
pub type Action = [f64; ACTION_DIM];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuiteError {
    #[error("suite spec: {0}")]
    Spec(String),
    #[error("episode is over at step {0}")]
    EpisodeOver(usize),
    #[error("scripted expert failed task {task} episode {episode}")]
    ExpertFailure { task: usize, episode: usize },
    #[error("observation has {got} entries, expected {expected}")]
    ObservationShape { got: usize, expected: usize },
    #[error("policy error: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Reach,
    Push,
}

impl TaskKind {
    fn flag(self) -> f64 {
        match self {
            TaskKind::Reach => 0.0,
            TaskKind::Push => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Color {
    pub name: String,
    /// Center of the block's start box.
    pub home: [f64; 2],
}

/// Axis-aligned box used as an initial-state distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartBox {
    pub center: [f64; 2],
    pub half_width: f64,
}

impl StartBox {
    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let h = self.half_width;
        [
            self.center[0] + rng.random_range(-h..=h),
            self.center[1] + rng.random_range(-h..=h),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub horizon: usize,
    pub goal_radius: f64,
    pub max_action: f64,
    pub contact_radius: f64,
    /// Gain of the scripted proportional controller.
    pub expert_gain: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            horizon: 60,
            goal_radius: 0.05,
            max_action: 0.05,
            contact_radius: 0.06,
            expert_gain: 0.5,
        }
    }
}

/// Vocabulary and size of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub num_tasks: usize,
    pub kinds: Vec<TaskKind>,
    pub colors: Vec<Color>,
    pub regions: Vec<Region>,
    pub agent_start: StartBox,
    pub object_half_width: f64,
    pub sim: SimParams,
}

impl SuiteSpec {
    /// Ten tasks over five block colors and four goal regions.
    pub fn default_suite() -> Self {
        Self::with_tasks(10)
    }

    pub fn with_tasks(num_tasks: usize) -> Self {
        let colors = [
            ("red", [0.3, 0.3]),
            ("blue", [0.7, 0.3]),
            ("green", [0.3, 0.7]),
            ("yellow", [0.7, 0.7]),
            ("purple", [0.5, 0.3]),
        ];
        let regions = [
            ("left", [0.12, 0.5]),
            ("right", [0.88, 0.5]),
            ("top", [0.5, 0.88]),
            ("bottom", [0.5, 0.12]),
        ];
        Self {
            num_tasks,
            kinds: vec![TaskKind::Reach, TaskKind::Push],
            colors: colors
                .iter()
                .map(|(n, h)| Color {
                    name: n.to_string(),
                    home: *h,
                })
                .collect(),
            regions: regions
                .iter()
                .map(|(n, c)| Region {
                    name: n.to_string(),
                    center: *c,
                })
                .collect(),
            agent_start: StartBox {
                center: [0.5, 0.55],
                half_width: 0.06,
            },
            object_half_width: 0.04,
            sim: SimParams::default(),
        }
    }

    /// Stable digest of the spec, used to tag demonstration files.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("suite spec serializes");
        hex_prefix(&Sha256::digest(&json), 16)
    }

    fn combinations(&self) -> Vec<(TaskKind, Option<usize>, usize)> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            match kind {
                TaskKind::Reach => {
                    out.extend((0..self.regions.len()).map(|r| (kind, None, r)));
                }
                TaskKind::Push => {
                    for c in 0..self.colors.len() {
                        out.extend((0..self.regions.len()).map(|r| (kind, Some(c), r)));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
    s.truncate(chars);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub kind: TaskKind,
    pub instruction: String,
    pub color: Option<String>,
    pub region: String,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub agent_start: StartBox,
    pub object_start: Option<StartBox>,
}

impl Task {
    pub fn instruction_for(kind: TaskKind, color: Option<&str>, region: &str) -> String {
        match (kind, color) {
            (TaskKind::Push, Some(c)) => format!("push the {c} block to the {region}"),
            _ => format!("reach the {region} marker"),
        }
    }
}

/// Builds `num_tasks` distinct tasks, chosen by a seeded shuffle of every
/// (kind, color, region) combination.
pub fn make_suite(spec: &SuiteSpec, seed: u64) -> Result<Vec<Task>, SuiteError> {
    if spec.num_tasks == 0 {
        return Err(SuiteError::Spec("a suite needs at least one task".into()));
    }
    if spec.regions.is_empty() || spec.kinds.is_empty() {
        return Err(SuiteError::Spec("suite needs regions and task kinds".into()));
    }
    if spec.kinds.contains(&TaskKind::Push) && spec.colors.is_empty() {
        return Err(SuiteError::Spec("push tasks need at least one color".into()));
    }
    let mut combos = spec.combinations();
    if spec.num_tasks > combos.len() {
        return Err(SuiteError::Spec(format!(
            "{} tasks requested but the vocabulary only allows {}",
            spec.num_tasks,
            combos.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"suite"]));
    for i in (1..combos.len()).rev() {
        let j = rng.random_range(0..=i);
        combos.swap(i, j);
    }
    combos.truncate(spec.num_tasks);
    Ok(combos
        .into_iter()
        .enumerate()
        .map(|(id, (kind, color, region))| {
            let region = &spec.regions[region];
            let color = color.map(|c| &spec.colors[c]);
            Task {
                id,
                kind,
                instruction: Task::instruction_for(kind, color.map(|c| c.name.as_str()), &region.name),
                color: color.map(|c| c.name.clone()),
                region: region.name.clone(),
                goal: region.center,
                goal_radius: spec.sim.goal_radius,
                agent_start: spec.agent_start,
                object_start: color.map(|c| StartBox {
                    center: c.home,
                    half_width: spec.object_half_width,
                }),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub agent: [f64; 2],
    pub object: Option<[f64; 2]>,
    pub t: usize,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

impl SimState {
    pub fn initial(task: &Task, rng: &mut ChaCha8Rng) -> Self {
        let agent = clip_unit(task.agent_start.sample(rng));
        let object = task.object_start.map(|b| clip_unit(b.sample(rng)));
        Self { agent, object, t: 0 }
    }

    pub fn in_contact(&self, sim: &SimParams) -> bool {
        self.object
            .is_some_and(|o| distance(self.agent, o) < sim.contact_radius)
    }

    pub fn observe(&self, task: &Task, sim: &SimParams) -> Observation {
        let object = self.object.unwrap_or([0.0, 0.0]);
        [
            self.agent[0],
            self.agent[1],
            object[0],
            object[1],
            task.goal[0],
            task.goal[1],
            task.kind.flag(),
            if self.in_contact(sim) { 1.0 } else { 0.0 },
        ]
    }
}

/// Advances the world by one step under a velocity command.
pub fn simulate_step(state: &SimState, action: Action, sim: &SimParams) -> Result<SimState, SuiteError> {
    if state.t >= sim.horizon {
        return Err(SuiteError::EpisodeOver(state.t));
    }
    let a = sim.max_action;
    let cmd = [action[0].clamp(-a, a), action[1].clamp(-a, a)];
    let contact = state.in_contact(sim);
    let agent = clip_unit([state.agent[0] + cmd[0], state.agent[1] + cmd[1]]);
    let moved = [agent[0] - state.agent[0], agent[1] - state.agent[1]];
    let object = match state.object {
        Some(o) if contact => Some(clip_unit([o[0] + moved[0], o[1] + moved[1]])),
        other => other,
    };
    Ok(SimState {
        agent,
        object,
        t: state.t + 1,
    })
}

/// Closed-ball goal test on the task's target entity.
pub fn goal_predicate(state: &SimState, task: &Task) -> bool {
    let entity = match task.kind {
        TaskKind::Reach => state.agent,
        TaskKind::Push => match state.object {
            Some(o) => o,
            None => return false,
        },
    };
    distance(entity, task.goal) <= task.goal_radius
}

/// Proportional controller: approach the block, then drag it to the goal.
pub fn expert_action(obs: &Observation, sim: &SimParams) -> Action {
    let agent = [obs[0], obs[1]];
    let object = [obs[2], obs[3]];
    let goal = [obs[4], obs[5]];
    let push = obs[6] > 0.5;
    let contact = obs[7] > 0.5;
    let (from, to) = match (push, contact) {
        (false, _) => (agent, goal),
        (true, false) => (agent, object),
        (true, true) => (object, goal),
    };
    let a = sim.max_action;
    let k = sim.expert_gain;
    [
        (k * (to[0] - from[0])).clamp(-a, a),
        (k * (to[1] - from[1])).clamp(-a, a),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: usize,
    pub initial: SimState,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Replays the recorded actions from the initial state; returns the final
    /// state if every recorded observation is reproduced bit-exactly.
    pub fn replay(&self, task: &Task, sim: &SimParams) -> Option<SimState> {
        if self.observations.len() != self.actions.len() {
            return None;
        }
        let mut state = self.initial;
        for (obs, act) in self.observations.iter().zip(&self.actions) {
            let now = state.observe(task, sim);
            if now.iter().zip(obs).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return None;
            }
            state = simulate_step(&state, *act, sim).ok()?;
        }
        Some(state)
    }
}

/// `n` successful expert episodes from seeded initial states.
pub fn scripted_expert(task: &Task, sim: &SimParams, seed: u64, n: usize) -> Result<Vec<Demonstration>, SuiteError> {
    if n == 0 {
        return Err(SuiteError::Spec("at least one demonstration is required".into()));
    }
    (0..n)
        .map(|episode| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[
                    b"demo",
                    &(task.id as u64).to_le_bytes(),
                    &(episode as u64).to_le_bytes(),
                ],
            ));
            let initial = SimState::initial(task, &mut rng);
            let mut state = initial;
            let mut observations = Vec::new();
            let mut actions = Vec::new();
            while !goal_predicate(&state, task) {
                if state.t >= sim.horizon {
                    return Err(SuiteError::ExpertFailure { task: task.id, episode });
                }
                let obs = state.observe(task, sim);
                let act = expert_action(&obs, sim);
                observations.push(obs);
                actions.push(act);
                state = simulate_step(&state, act, sim)?;
            }
            Ok(Demonstration {
                task: task.id,
                initial,
                observations,
                actions,
            })
        })
        .collect()
}

/// The most recent `capacity` observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    capacity: usize,
    frames: std::collections::VecDeque<Observation>,
}

impl ObservationWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            frames: std::collections::VecDeque::with_capacity(capacity.max(1)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, obs: Observation) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(obs);
    }

    pub fn latest(&self) -> Option<&Observation> {
        self.frames.back()
    }

    /// Exactly `capacity` frames, front-padded with the earliest one.
    pub fn padded(&self) -> Vec<Observation> {
        let Some(first) = self.frames.front() else {
            return Vec::new();
        };
        let mut out = vec![*first; self.capacity - self.frames.len()];
        out.extend(self.frames.iter().copied());
        out
    }

    /// Window ending at step `t` of a recorded observation sequence.
    pub fn from_history(history: &[Observation], t: usize, capacity: usize) -> Self {
        let mut w = Self::new(capacity);
        let start = (t + 1).saturating_sub(w.capacity);
        for obs in &history[start..=t] {
            w.push(*obs);
        }
        w
    }
}

/// Anything that maps a batch of observation windows to actions.
pub trait RolloutPolicy {
    fn act(&self, windows: &[ObservationWindow]) -> Result<Vec<Action>, SuiteError>;
}

/// The scripted expert, usable as a rollout policy.
pub struct ExpertPolicy {
    pub sim: SimParams,
}

impl RolloutPolicy for ExpertPolicy {
    fn act(&self, windows: &[ObservationWindow]) -> Result<Vec<Action>, SuiteError> {
        Ok(windows
            .iter()
            .map(|w| w.latest().map_or([0.0, 0.0], |o| expert_action(o, &self.sim)))
            .collect())
    }
}

/// Policy that never moves.
pub struct ZeroPolicy;

impl RolloutPolicy for ZeroPolicy {
    fn act(&self, windows: &[ObservationWindow]) -> Result<Vec<Action>, SuiteError> {
        Ok(vec![[0.0, 0.0]; windows.len()])
    }
}

/// Success rate over `episodes` seeded rollouts; an episode succeeds if the
/// goal predicate holds at any step. Episodes run in lockstep so the policy
/// sees one batch per step.
pub fn evaluate_policy(
    policy: &dyn RolloutPolicy,
    task: &Task,
    sim: &SimParams,
    window: usize,
    episodes: usize,
    seed: u64,
) -> Result<f64, SuiteError> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut states: Vec<SimState> = (0..episodes)
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[b"eval", &(task.id as u64).to_le_bytes(), &(e as u64).to_le_bytes()],
            ));
            SimState::initial(task, &mut rng)
        })
        .collect();
    let mut windows: Vec<ObservationWindow> = states
        .iter()
        .map(|s| {
            let mut w = ObservationWindow::new(window);
            w.push(s.observe(task, sim));
            w
        })
        .collect();
    let mut success: Vec<bool> = states.iter().map(|s| goal_predicate(s, task)).collect();
    for _ in 0..sim.horizon {
        let live: Vec<usize> = (0..episodes).filter(|&e| !success[e]).collect();
        if live.is_empty() {
            break;
        }
        let batch: Vec<ObservationWindow> = live.iter().map(|&e| windows[e].clone()).collect();
        let actions = policy.act(&batch)?;
        if actions.len() != live.len() {
            return Err(SuiteError::Policy(format!(
                "{} actions for {} windows",
                actions.len(),
                live.len()
            )));
        }
        for (&e, act) in live.iter().zip(actions) {
            states[e] = simulate_step(&states[e], act, sim)?;
            windows[e].push(states[e].observe(task, sim));
            success[e] = goal_predicate(&states[e], task);
        }
    }
    Ok(success.iter().filter(|&&s| s).count() as f64 / episodes as f64)
}
