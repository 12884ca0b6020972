use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

/// Identity of a parameter tensor within one optimizer.
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::adam(),
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot {
    rows: usize,
    cols: usize,
    /// `true` rows may change; `false` rows are frozen together with their moments.
    row_mask: Vec<bool>,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// First-order optimizer whose state and updates are gated per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    slots: BTreeMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Overrides the step size for subsequent updates (for schedules).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Registers a `rows × cols` parameter with its update mask.
    pub fn register(&mut self, id: ParamId, rows: usize, cols: usize, row_mask: Vec<bool>) -> Result<(), GradError> {
        if row_mask.len() != rows {
            return Err(GradError::Contract(format!(
                "mask for param {id} has {} entries, tensor has {rows} rows",
                row_mask.len()
            )));
        }
        self.slots.insert(
            id,
            Slot {
                rows,
                cols,
                row_mask,
                first: vec![0.0; rows * cols],
                second: vec![0.0; rows * cols],
            },
        );
        Ok(())
    }

    pub fn row_mask(&self, id: ParamId) -> Option<&[bool]> {
        self.slots.get(&id).map(|s| s.row_mask.as_slice())
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(&id).map(|s| s.first.as_slice())
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(&id).map(|s| s.second.as_slice())
    }

    /// Applies one update to every registered parameter in `params`.
    ///
    /// A parameter with at least one unmasked row must have a gradient in
    /// `grads`; fully frozen parameters may omit it.
    pub fn step(
        &mut self,
        params: &mut [(ParamId, &mut Tensor)],
        grads: &BTreeMap<ParamId, Tensor>,
    ) -> Result<(), GradError> {
        for (id, param) in params.iter() {
            let slot = self
                .slots
                .get(id)
                .ok_or_else(|| GradError::Contract(format!("param {id} was never registered")))?;
            if param.rows() != slot.rows || param.cols() != slot.cols {
                return Err(GradError::Shape(format!(
                    "param {id} is {}x{}, registered as {}x{}",
                    param.rows(),
                    param.cols(),
                    slot.rows,
                    slot.cols
                )));
            }
            let active = slot.row_mask.iter().any(|&m| m);
            match grads.get(id) {
                Some(g) if g.shape() != param.shape() => {
                    return Err(GradError::Shape(format!(
                        "gradient for param {id} has shape {:?}, param {:?}",
                        g.shape(),
                        param.shape()
                    )))
                }
                None if active => return Err(GradError::Contract(format!("missing gradient for param {id}"))),
                _ => {}
            }
        }
        self.steps += 1;
        let t = self.steps as f64;
        let lr = self.config.learning_rate;
        for (id, param) in params.iter_mut() {
            let Some(grad) = grads.get(id) else { continue };
            let slot = self.slots.get_mut(id).expect("checked above");
            let cols = slot.cols;
            for (r, _) in slot.row_mask.iter().enumerate().filter(|(_, &m)| m) {
                let range = r * cols..(r + 1) * cols;
                let p = &mut param.data_mut()[range.clone()];
                let g = &grad.data()[range.clone()];
                let m1 = &mut slot.first[range.clone()];
                let m2 = &mut slot.second[range];
                match self.config.kind {
                    OptimizerKind::SgdMomentum { momentum } => {
                        for i in 0..cols {
                            m1[i] = momentum * m1[i] + g[i];
                            p[i] -= lr * m1[i];
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powf(t);
                        let c2 = 1.0 - beta2.powf(t);
                        for i in 0..cols {
                            m1[i] = beta1 * m1[i] + (1.0 - beta1) * g[i];
                            m2[i] = beta2 * m2[i] + (1.0 - beta2) * g[i] * g[i];
                            let mh = m1[i] / c1;
                            let vh = m2[i] / c2;
                            p[i] -= lr * mh / (vh.sqrt() + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64) -> Tensor {
        Tensor::scalar(value)
    }

    fn sgd(lr: f64) -> Optimizer {
        Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::SgdMomentum { momentum: 0.0 },
            learning_rate: lr,
        })
    }

    #[test]
    fn sgd_step_hand_arithmetic() {
        let mut opt = sgd(0.1);
        opt.register(0, 1, 1, vec![true]).unwrap();
        let mut p = one(1.0);
        let grads = BTreeMap::from([(0, one(2.0))]);
        opt.step(&mut [(0, &mut p)], &grads).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn denied_row_is_bit_identical() {
        let mut opt = sgd(0.1);
        opt.register(0, 1, 1, vec![false]).unwrap();
        let mut p = one(1.0);
        let before = p.clone();
        let grads = BTreeMap::from([(0, one(2.0))]);
        opt.step(&mut [(0, &mut p)], &grads).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::adam(),
            learning_rate: 0.01,
        });
        opt.register(0, 1, 1, vec![true]).unwrap();
        let mut p = one(0.5);
        let grads = BTreeMap::from([(0, one(1.0))]);
        opt.step(&mut [(0, &mut p)], &grads).unwrap();
        // 1 / (1 + 1e-8) ~ 1
        assert!((p.data()[0] - (0.5 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut opt = sgd(0.1);
        opt.register(3, 1, 1, vec![true]).unwrap();
        let mut p = one(1.0);
        let err = opt.step(&mut [(3, &mut p)], &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, GradError::Contract(_)));
    }

    #[test]
    fn unregistered_param_is_rejected() {
        let mut opt = sgd(0.1);
        let mut p = one(1.0);
        assert!(opt.step(&mut [(9, &mut p)], &BTreeMap::new()).is_err());
    }
}
