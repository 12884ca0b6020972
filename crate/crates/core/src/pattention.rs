//! Token-parameter attention and the transformer block built from it.
//!
//! A Pattention layer maps input tokens `X: T×d₁` to `softmax(X·Kᵀ)·V`, where
//! the rows of `K: m×d₁` and `V: m×d₂` are learnable parameter tokens. Every
//! learnable projection of [`TpstBlock`] is such a layer; normalization has no
//! gain, so the pools hold all trainable state.

use thiserror::Error;

use crate::gradcore::{GradError, Graph, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PattentionError {
    #[error("pattention over an empty set of parameter tokens")]
    EmptyPool,
    #[error("shared and specific token sets overlap at row {0}")]
    Overlap(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Graph handles to one layer's full key and value pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolVars {
    pub keys: Var,
    pub values: Var,
}

/// Which pool rows a layer attends to.
#[derive(Debug, Clone, Copy)]
pub enum Selection<'a> {
    /// One token set, every row differentiable.
    Unified(&'a [usize]),
    /// Shared rows enter through detach; only specific rows receive gradient.
    Split { shared: &'a [usize], specific: &'a [usize] },
}

impl Selection<'_> {
    pub fn len(&self) -> usize {
        match self {
            Selection::Unified(rows) => rows.len(),
            Selection::Split { shared, specific } => shared.len() + specific.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `softmax(x·kᵀ)·v`.
pub fn pattention(g: &mut Graph, x: Var, k: Var, v: Var) -> Result<Var, PattentionError> {
    if g.value(k).rows() == 0 {
        return Err(PattentionError::EmptyPool);
    }
    if g.value(k).rows() != g.value(v).rows() {
        return Err(GradError::Shape(format!(
            "{} key tokens vs {} value tokens",
            g.value(k).rows(),
            g.value(v).rows()
        ))
        .into());
    }
    let scores = g.matmul_bt(x, k)?;
    let weights = g.softmax_rows(scores);
    Ok(g.matmul(weights, v)?)
}

/// Pattention over shared (read-only) and specific (trainable) tokens.
///
/// Scores against both sets are concatenated and normalized by one softmax,
/// so the value equals [`pattention`] over the union of the two sets.
pub fn pattention_split(
    g: &mut Graph,
    x: Var,
    shared: Option<(Var, Var)>,
    specific: Option<(Var, Var)>,
) -> Result<Var, PattentionError> {
    let nonempty = |g: &Graph, kv: Option<(Var, Var)>| kv.filter(|(k, _)| g.value(*k).rows() > 0);
    let shared = nonempty(g, shared);
    let specific = nonempty(g, specific);
    match (shared, specific) {
        (None, None) => Err(PattentionError::EmptyPool),
        (None, Some((k, v))) => pattention(g, x, k, v),
        (Some((k, v)), None) => {
            let (k, v) = (g.detach(k), g.detach(v));
            pattention(g, x, k, v)
        }
        (Some((ksh, vsh)), Some((ksp, vsp))) => {
            let (ksh, vsh) = (g.detach(ksh), g.detach(vsh));
            let n_sh = g.value(ksh).rows();
            let n_all = n_sh + g.value(ksp).rows();
            let s_sh = g.matmul_bt(x, ksh)?;
            let s_sp = g.matmul_bt(x, ksp)?;
            let scores = g.concat_cols(&[s_sh, s_sp])?;
            let weights = g.softmax_rows(scores);
            let w_sh = g.slice_cols(weights, 0, n_sh)?;
            let w_sp = g.slice_cols(weights, n_sh, n_all)?;
            let o_sh = g.matmul(w_sh, vsh)?;
            let o_sp = g.matmul(w_sp, vsp)?;
            Ok(g.add(o_sh, o_sp)?)
        }
    }
}

/// Pattention against a subset of pool rows.
pub fn pattention_pooled(
    g: &mut Graph,
    x: Var,
    pool: PoolVars,
    selection: Selection<'_>,
) -> Result<Var, PattentionError> {
    match selection {
        Selection::Unified(rows) => {
            if rows.is_empty() {
                return Err(PattentionError::EmptyPool);
            }
            let k = g.gather_rows(pool.keys, rows)?;
            let v = g.gather_rows(pool.values, rows)?;
            pattention(g, x, k, v)
        }
        Selection::Split { shared, specific } => {
            if let Some(&row) = shared.iter().find(|r| specific.contains(r)) {
                return Err(PattentionError::Overlap(row));
            }
            let mut gather = |rows: &[usize]| -> Result<Option<(Var, Var)>, PattentionError> {
                if rows.is_empty() {
                    return Ok(None);
                }
                Ok(Some((
                    g.gather_rows(pool.keys, rows)?,
                    g.gather_rows(pool.values, rows)?,
                )))
            };
            let sh = gather(shared)?;
            let sp = gather(specific)?;
            pattention_split(g, x, sh, sp)
        }
    }
}

/// Position of each Pattention sublayer inside a [`TpstBlock`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Query = 0,
    Key = 1,
    Value = 2,
    Output = 3,
    Ffn = 4,
}

impl Sublayer {
    pub const COUNT: usize = 5;
    pub const ALL: [Sublayer; 5] = [
        Sublayer::Query,
        Sublayer::Key,
        Sublayer::Value,
        Sublayer::Output,
        Sublayer::Ffn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Sublayer::Query => "query",
            Sublayer::Key => "key",
            Sublayer::Value => "value",
            Sublayer::Output => "output",
            Sublayer::Ffn => "ffn",
        }
    }
}

/// Transformer block whose projections and feed-forward path are Pattention
/// layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpstBlock {
    pub width: usize,
    pub heads: usize,
    /// Keep token-token attention over the sequence. When off, the attention
    /// sublayer reduces to `output(value(norm(x)))`.
    pub token_attention: bool,
    pub norm_eps: f64,
}

impl TpstBlock {
    pub fn new(width: usize, heads: usize) -> Self {
        Self {
            width,
            heads: heads.max(1),
            token_attention: true,
            norm_eps: 1e-6,
        }
    }

    /// Applies the block to `tokens`, a stack of sequences of `seq_len` rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: Var,
        seq_len: usize,
        pools: &[PoolVars; Sublayer::COUNT],
        selections: &[Selection<'_>; Sublayer::COUNT],
    ) -> Result<Var, PattentionError> {
        if selections.iter().any(|s| s.is_empty()) {
            return Err(PattentionError::EmptyPool);
        }
        let sub = |g: &mut Graph, x: Var, which: Sublayer| {
            pattention_pooled(g, x, pools[which as usize], selections[which as usize])
        };
        let h = g.rms_norm_rows(tokens, self.norm_eps);
        let mixed = if self.token_attention {
            let q = sub(g, h, Sublayer::Query)?;
            let k = sub(g, h, Sublayer::Key)?;
            let v = sub(g, h, Sublayer::Value)?;
            self.attend(g, q, k, v, seq_len)?
        } else {
            sub(g, h, Sublayer::Value)?
        };
        let o = sub(g, mixed, Sublayer::Output)?;
        let x1 = g.add(tokens, o)?;
        let h2 = g.rms_norm_rows(x1, self.norm_eps);
        let f = sub(g, h2, Sublayer::Ffn)?;
        Ok(g.add(x1, f)?)
    }

    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, seq_len: usize) -> Result<Var, PattentionError> {
        let width = g.value(q).cols();
        if self.heads == 1 || !width.is_multiple_of(self.heads) {
            let scale = 1.0 / (width as f64).sqrt();
            return Ok(g.segment_attention(q, k, v, seq_len, scale)?);
        }
        let hw = width / self.heads;
        let scale = 1.0 / (hw as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * hw, (h + 1) * hw);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            outs.push(g.segment_attention(qh, kh, vh, seq_len, scale)?);
        }
        Ok(g.concat_cols(&outs)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{central_difference, relative_error, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn forward_value(x: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (x, k, v) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = pattention(&mut g, x, k, v).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn single_token_returns_its_value_row() {
        let x = Tensor::from_rows(&[[0.3, -2.0], [5.0, 1.0], [0.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[[0.7, 0.1]]).unwrap();
        let v = Tensor::from_rows(&[[4.0, -1.0, 2.5]]).unwrap();
        let out = forward_value(&x, &k, &v);
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn two_token_hand_example() {
        let x = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let k = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap();
        let out = forward_value(&x, &k, &v);
        let e = std::f64::consts::E;
        assert!((out.get(0, 0) - 2.0 * e / (e + 1.0)).abs() < 1e-14);
        assert!((out.get(0, 0) - 1.46212).abs() < 1e-5);
        assert!((out.get(0, 1) - 0.53788).abs() < 1e-5);
    }

    #[test]
    fn output_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = forward_value(
            &random(&mut rng, 2, 4),
            &random(&mut rng, 3, 4),
            &random(&mut rng, 3, 5),
        );
        assert_eq!(out.shape(), &[2, 5]);
    }

    #[test]
    fn empty_pool_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 3));
        let k = g.constant(Tensor::zeros(0, 3));
        let v = g.constant(Tensor::zeros(0, 2));
        assert_eq!(pattention(&mut g, x, k, v), Err(PattentionError::EmptyPool));
        assert_eq!(pattention_split(&mut g, x, None, None), Err(PattentionError::EmptyPool));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(1, 2));
        let pool = PoolVars {
            keys: g.param(Tensor::zeros(4, 2)),
            values: g.param(Tensor::zeros(4, 2)),
        };
        let sel = Selection::Split {
            shared: &[0, 2],
            specific: &[2, 3],
        };
        assert_eq!(
            pattention_pooled(&mut g, x, pool, sel),
            Err(PattentionError::Overlap(2))
        );
    }

    #[test]
    fn empty_shared_is_bit_identical_to_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 5, 2));
        let mut g = Graph::new();
        let (xv, kv, vv) = (g.constant(x.clone()), g.param(k.clone()), g.param(v.clone()));
        let out = pattention_split(&mut g, xv, None, Some((kv, vv))).unwrap();
        assert!(g.value(out).bit_eq(&forward_value(&x, &k, &v)));
    }

    #[test]
    fn empty_specific_matches_plain_and_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 5, 2));
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let (kv, vv) = (g.param(k.clone()), g.param(v.clone()));
        let out = pattention_split(&mut g, xv, Some((kv, vv)), None).unwrap();
        assert_eq!(g.value(out), &forward_value(&x, &k, &v));
        let loss = g.sum(out);
        let sq = g.mse(loss, loss).unwrap();
        let total = g.add(loss, sq).unwrap();
        let grads = g.backward(total).unwrap();
        assert!(grads.get(kv).data().iter().all(|v| v.to_bits() == 0));
        assert!(grads.get(vv).data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn one_shared_one_specific_reproduces_two_token_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0]]).unwrap());
        let pool = PoolVars {
            keys: g.param(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()),
            values: g.param(Tensor::from_rows(&[[2.0, 0.0], [0.0, 2.0]]).unwrap()),
        };
        let split = pattention_pooled(
            &mut g,
            x,
            pool,
            Selection::Split {
                shared: &[0],
                specific: &[1],
            },
        )
        .unwrap();
        let unified = pattention_pooled(&mut g, x, pool, Selection::Unified(&[0, 1])).unwrap();
        assert!(g.value(split).max_abs_diff(g.value(unified)) == 0.0);
    }

    fn random_partition(rng: &mut ChaCha8Rng, n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut all = Vec::new();
        let (mut sh, mut sp) = (Vec::new(), Vec::new());
        for r in 0..n {
            match rng.random_range(0..3) {
                0 => {}
                1 => {
                    sh.push(r);
                    all.push(r);
                }
                _ => {
                    sp.push(r);
                    all.push(r);
                }
            }
        }
        if all.is_empty() {
            sp.push(0);
            all.push(0);
        }
        (all, sh, sp)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_equals_unified_and_isolates_shared(seed in 0u64..100_000, n in 1usize..9, t in 1usize..5, d1 in 1usize..6, d2 in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (all, sh, sp) = random_partition(&mut rng, n);
            let mut g = Graph::new();
            let x = g.constant(random(&mut rng, t, d1));
            let pool = PoolVars { keys: g.param(random(&mut rng, n, d1)), values: g.param(random(&mut rng, n, d2)) };
            let unified = pattention_pooled(&mut g, x, pool, Selection::Unified(&all)).unwrap();
            let split = pattention_pooled(&mut g, x, pool, Selection::Split { shared: &sh, specific: &sp }).unwrap();
            prop_assert!(g.value(split).max_abs_diff(g.value(unified)) <= 1e-12);
            let target = g.constant(random(&mut rng, t, d2));
            let loss = g.mse(split, target).unwrap();
            let grads = g.backward(loss).unwrap();
            let (gk, gv) = (grads.get(pool.keys), grads.get(pool.values));
            for &r in &sh {
                prop_assert!(gk.row(r).iter().chain(gv.row(r)).all(|v| v.to_bits() == 0));
            }
            let live = sp.iter().any(|&r| gv.row(r).iter().any(|&v| v != 0.0));
            prop_assert!(sp.is_empty() || live);
        }

        #[test]
        fn appended_rows_are_inert(seed in 0u64..100_000, n in 1usize..6, extra in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 3, 4);
            let mut k = random(&mut rng, n, 4);
            let mut v = random(&mut rng, n, 3);
            let rows: Vec<usize> = (0..n).collect();
            let run = |k: &Tensor, v: &Tensor| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let pool = PoolVars { keys: g.constant(k.clone()), values: g.constant(v.clone()) };
                let out = pattention_pooled(&mut g, xv, pool, Selection::Unified(&rows)).unwrap();
                g.value(out).clone()
            };
            let before = run(&k, &v);
            k.append_rows(&random(&mut rng, extra, 4)).unwrap();
            v.append_rows(&random(&mut rng, extra, 3)).unwrap();
            prop_assert!(run(&k, &v).bit_eq(&before));
        }

        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 4, 3);
            let k = random(&mut rng, 6, 3);
            let w = crate::gradcore::softmax_rows(&x.matmul_bt(&k).unwrap());
            for i in 0..4 {
                prop_assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(w.row(i).iter().all(|&p| p >= 0.0));
            }
        }
    }

    struct BlockFixture {
        tokens: Tensor,
        keys: Vec<Tensor>,
        values: Vec<Tensor>,
        shared: Vec<Vec<usize>>,
        specific: Vec<Vec<usize>>,
        unified: Vec<Vec<usize>>,
    }

    fn fixture(seed: u64) -> BlockFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (width, n) = (4, 6);
        let mut f = BlockFixture {
            tokens: random(&mut rng, 6, width),
            keys: vec![],
            values: vec![],
            shared: vec![],
            specific: vec![],
            unified: vec![],
        };
        for _ in 0..Sublayer::COUNT {
            f.keys.push(random(&mut rng, n, width));
            f.values.push(random(&mut rng, n, width));
            let (all, sh, sp) = random_partition(&mut rng, n);
            f.unified.push(all);
            f.shared.push(sh);
            f.specific.push(sp);
        }
        f
    }

    fn run_block(f: &BlockFixture, split: bool) -> (Tensor, Vec<Tensor>) {
        let block = TpstBlock::new(4, 2);
        let mut g = Graph::new();
        let x = g.constant(f.tokens.clone());
        let pools: [PoolVars; 5] = std::array::from_fn(|i| PoolVars {
            keys: g.param(f.keys[i].clone()),
            values: g.param(f.values[i].clone()),
        });
        let sels: [Selection<'_>; 5] = std::array::from_fn(|i| {
            if split {
                Selection::Split {
                    shared: &f.shared[i],
                    specific: &f.specific[i],
                }
            } else {
                Selection::Unified(&f.unified[i])
            }
        });
        let out = block.forward(&mut g, x, 3, &pools, &sels).unwrap();
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        let gk = pools.iter().map(|p| grads.get(p.keys)).collect();
        (g.value(out).clone(), gk)
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let f = fixture(11);
        let (a, _) = run_block(&f, false);
        let (b, _) = run_block(&f, false);
        assert_eq!(a.shape(), f.tokens.shape());
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn block_split_matches_unified() {
        for seed in 0..20 {
            let f = fixture(seed);
            let (u, _) = run_block(&f, false);
            let (s, gk) = run_block(&f, true);
            assert!(u.max_abs_diff(&s) <= 1e-12, "seed {seed}");
            for (i, grad) in gk.iter().enumerate() {
                for &r in &f.shared[i] {
                    assert!(grad.row(r).iter().all(|v| v.to_bits() == 0));
                }
            }
        }
    }

    #[test]
    fn block_rejects_empty_selection() {
        let f = fixture(1);
        let block = TpstBlock::new(4, 1);
        let mut g = Graph::new();
        let x = g.constant(f.tokens.clone());
        let pools: [PoolVars; 5] = std::array::from_fn(|i| PoolVars {
            keys: g.param(f.keys[i].clone()),
            values: g.param(f.values[i].clone()),
        });
        let empty: [usize; 0] = [];
        let mut sels: [Selection<'_>; 5] = std::array::from_fn(|i| Selection::Unified(&f.unified[i]));
        sels[4] = Selection::Unified(&empty);
        assert_eq!(
            block.forward(&mut g, x, 3, &pools, &sels),
            Err(PattentionError::EmptyPool)
        );
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let f = fixture(21);
        let block = TpstBlock::new(4, 1);
        let loss_of = |tokens: &Tensor, keys: &[Tensor]| -> (f64, Tensor) {
            let mut g = Graph::new();
            let x = g.param(tokens.clone());
            let pools: [PoolVars; 5] = std::array::from_fn(|i| PoolVars {
                keys: g.param(keys[i].clone()),
                values: g.param(f.values[i].clone()),
            });
            let sels: [Selection<'_>; 5] = std::array::from_fn(|i| Selection::Unified(&f.unified[i]));
            let out = block.forward(&mut g, x, 3, &pools, &sels).unwrap();
            let target = g.constant(Tensor::filled(6, 4, 0.25));
            let loss = g.mse(out, target).unwrap();
            let value = g.value(loss).data()[0];
            (value, g.backward(loss).unwrap().get(x))
        };
        let (_, analytic) = loss_of(&f.tokens, &f.keys);
        let fd = central_difference(&f.tokens, 1e-6, |t| Ok(loss_of(t, &f.keys).0)).unwrap();
        assert!(relative_error(&analytic, &fd) < 1e-4);
    }
}
