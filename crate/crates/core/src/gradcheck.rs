//! Finite-difference audit of every differentiable component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{central_difference, relative_error, GradError, Graph, Tensor, Var};
use crate::pattention::{pattention, pattention_pooled, PattentionError, PoolVars, Selection, Sublayer, TpstBlock};

/// Components pass when their relative error stays below this.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub name: String,
    /// Largest relative error over the component's inputs.
    pub max_rel_err: f64,
    /// Largest gradient magnitude on a shared (detached) row, where relevant.
    pub shared_grad_max: Option<f64>,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.shared_grad_max.is_none_or(|g| g == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentCheck::passed)
    }
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var, PattentionError> + 'a;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("consistent shape")
}

fn loss_value(inputs: &[Tensor], build: &Build<'_>) -> Result<f64, GradError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars).map_err(|e| GradError::Contract(e.to_string()))?;
    Ok(g.value(loss).data()[0])
}

/// Analytic gradients of every input.
fn analytic(inputs: &[Tensor], build: &Build<'_>) -> Result<Vec<Tensor>, PattentionError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Max relative error between analytic and central-difference gradients
/// over the inputs listed in `checked`.
fn compare(inputs: &[Tensor], checked: &[usize], build: &Build<'_>) -> Result<f64, PattentionError> {
    let grads = analytic(inputs, build)?;
    let mut worst: f64 = 0.0;
    for &i in checked {
        let numeric = central_difference(&inputs[i], STEP, |probe| {
            let mut probed = inputs.to_vec();
            probed[i] = probe.clone();
            loss_value(&probed, build)
        })?;
        worst = worst.max(relative_error(&grads[i], &numeric));
    }
    Ok(worst)
}

fn mse_to(g: &mut Graph, out: Var, target: &Tensor) -> Result<Var, PattentionError> {
    let t = g.constant(target.clone());
    Ok(g.mse(out, t)?)
}

fn check_pattention(rng: &mut ChaCha8Rng) -> Result<ComponentCheck, PattentionError> {
    let inputs = vec![random(rng, 3, 4), random(rng, 5, 4), random(rng, 5, 3)];
    let target = random(rng, 3, 3);
    let build = |g: &mut Graph, v: &[Var]| {
        let out = pattention(g, v[0], v[1], v[2])?;
        mse_to(g, out, &target)
    };
    Ok(ComponentCheck {
        name: "pattention".into(),
        max_rel_err: compare(&inputs, &[0, 1, 2], &build)?,
        shared_grad_max: None,
    })
}

fn max_abs_rows(t: &Tensor, rows: &[usize]) -> f64 {
    rows.iter()
        .flat_map(|&r| t.row(r).iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

fn check_split(rng: &mut ChaCha8Rng) -> Result<ComponentCheck, PattentionError> {
    let shared = [0usize, 2];
    let specific = [1usize, 4, 5];
    let x = random(rng, 3, 4);
    let keys = random(rng, 6, 4);
    let values = random(rng, 6, 3);
    let target = random(rng, 3, 3);
    let pooled = |g: &mut Graph, v: &[Var]| {
        let pool = PoolVars {
            keys: v[1],
            values: v[2],
        };
        let out = pattention_pooled(
            g,
            v[0],
            pool,
            Selection::Split {
                shared: &shared,
                specific: &specific,
            },
        )?;
        mse_to(g, out, &target)
    };
    let grads = analytic(&[x.clone(), keys.clone(), values.clone()], &pooled)?;
    let shared_grad_max = max_abs_rows(&grads[1], &shared).max(max_abs_rows(&grads[2], &shared));

    // Finite differences over the trainable inputs only: the shared rows are
    // held fixed as constants, the specific rows vary.
    let ksh = keys.gather_rows(&shared)?;
    let vsh = values.gather_rows(&shared)?;
    let inputs = vec![x, keys.gather_rows(&specific)?, values.gather_rows(&specific)?];
    let split = |g: &mut Graph, v: &[Var]| {
        let (k, val) = (g.constant(ksh.clone()), g.constant(vsh.clone()));
        let out = crate::pattention::pattention_split(g, v[0], Some((k, val)), Some((v[1], v[2])))?;
        mse_to(g, out, &target)
    };
    let mut max_rel_err = compare(&inputs, &[0, 1, 2], &split)?;
    // The pooled gradients on specific rows must agree with the direct split.
    let direct = analytic(&inputs, &split)?;
    max_rel_err = max_rel_err
        .max(relative_error(&grads[1].gather_rows(&specific)?, &direct[1]))
        .max(relative_error(&grads[2].gather_rows(&specific)?, &direct[2]));
    Ok(ComponentCheck {
        name: "split-pattention".into(),
        max_rel_err,
        shared_grad_max: Some(shared_grad_max),
    })
}

fn check_block(rng: &mut ChaCha8Rng) -> Result<ComponentCheck, PattentionError> {
    let (width, rows, seq_len, seqs) = (4, 6, 3, 2);
    let block = TpstBlock::new(width, 2);
    let mut inputs = vec![random(rng, seq_len * seqs, width)];
    for _ in 0..Sublayer::COUNT {
        inputs.push(random(rng, rows, width));
        inputs.push(random(rng, rows, width));
    }
    let target = random(rng, seq_len * seqs, width);
    let selected: Vec<Vec<usize>> = (0..Sublayer::COUNT)
        .map(|s| (0..rows).filter(|r| (r + s) % 3 != 0).collect())
        .collect();
    let shared: Vec<Vec<usize>> = selected.iter().map(|s| s[..1].to_vec()).collect();
    let specific: Vec<Vec<usize>> = selected.iter().map(|s| s[1..].to_vec()).collect();

    let forward = |g: &mut Graph, v: &[Var], split: bool| {
        let pools: [PoolVars; Sublayer::COUNT] = std::array::from_fn(|s| PoolVars {
            keys: v[1 + 2 * s],
            values: v[2 + 2 * s],
        });
        let sels: [Selection<'_>; Sublayer::COUNT] = std::array::from_fn(|s| {
            if split {
                Selection::Split {
                    shared: &shared[s],
                    specific: &specific[s],
                }
            } else {
                Selection::Unified(&selected[s])
            }
        });
        let out = block.forward(g, v[0], seq_len, &pools, &sels)?;
        mse_to(g, out, &target)
    };
    let unified = |g: &mut Graph, v: &[Var]| forward(g, v, false);
    let all: Vec<usize> = (0..inputs.len()).collect();
    let max_rel_err = compare(&inputs, &all, &unified)?;

    let split = |g: &mut Graph, v: &[Var]| forward(g, v, true);
    let grads = analytic(&inputs, &split)?;
    let shared_grad_max = (0..Sublayer::COUNT)
        .map(|s| max_abs_rows(&grads[1 + 2 * s], &shared[s]).max(max_abs_rows(&grads[2 + 2 * s], &shared[s])))
        .fold(0.0, f64::max);
    Ok(ComponentCheck {
        name: "tpst-block".into(),
        max_rel_err,
        shared_grad_max: Some(shared_grad_max),
    })
}

fn check_bc_loss(rng: &mut ChaCha8Rng) -> Result<ComponentCheck, PattentionError> {
    let inputs = vec![random(rng, 4, 2)];
    let expert = random(rng, 4, 2);
    let build = |g: &mut Graph, v: &[Var]| mse_to(g, v[0], &expert);
    Ok(ComponentCheck {
        name: "bc-loss".into(),
        max_rel_err: compare(&inputs, &[0], &build)?,
        shared_grad_max: None,
    })
}

/// Runs every component check on instances drawn from `seed`.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport, PattentionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(GradcheckReport {
        seed,
        components: vec![
            check_pattention(&mut rng)?,
            check_split(&mut rng)?,
            check_block(&mut rng)?,
            check_bc_loss(&mut rng)?,
        ],
    })
}
