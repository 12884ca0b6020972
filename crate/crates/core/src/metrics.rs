//! Lifelong-learning metrics over a lower-triangular success matrix.
//!
//! Entry `(i, j)` (zero-based, `j ≤ i`) is the success rate on the `j`-th
//! task after training on the `i`-th task, both indexed by training order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("matrix entry ({row}, {col}) is missing")]
    Missing { row: usize, col: usize },
    #[error("entry ({row}, {col}) = {value} is outside [0, 1]")]
    Range { row: usize, col: usize, value: f64 },
    #[error("entry ({row}, {col}) lies above the diagonal")]
    AboveDiagonal { row: usize, col: usize },
    #[error("negative backward transfer needs at least two tasks")]
    Undefined,
}

/// How the final task, which has no later rows, enters the NBT average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NbtConvention {
    /// Average over the first `M − 1` tasks.
    #[default]
    ExcludeLast,
    /// Count the last task as 0 and divide by `M`.
    ZeroLast,
}

impl NbtConvention {
    pub fn describe(self) -> &'static str {
        match self {
            NbtConvention::ExcludeLast => "nbt averages tasks 1..M-1",
            NbtConvention::ZeroLast => "nbt sets the last task to 0 and averages over M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl SuccessMatrix {
    pub fn new(m: usize) -> Self {
        Self {
            rows: (0..m).map(|i| vec![None; i + 1]).collect(),
        }
    }

    /// Builds a complete matrix from lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let mut m = Self::new(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() > i + 1 {
                return Err(MetricsError::AboveDiagonal { row: i, col: i + 1 });
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        m.check_complete()?;
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) -> Result<(), MetricsError> {
        if col > row || row >= self.rows.len() {
            return Err(MetricsError::AboveDiagonal { row, col });
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::Range { row, col, value });
        }
        self.rows[row][col] = Some(value);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.rows.get(row).and_then(|r| r.get(col)).copied().flatten()
    }

    fn at(&self, row: usize, col: usize) -> Result<f64, MetricsError> {
        self.get(row, col).ok_or(MetricsError::Missing { row, col })
    }

    pub fn check_complete(&self) -> Result<(), MetricsError> {
        for i in 0..self.size() {
            for j in 0..=i {
                self.at(i, j)?;
            }
        }
        Ok(())
    }

    /// Rows as stored; `None` marks entries not yet evaluated.
    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }
}

pub fn fwt(m: &SuccessMatrix) -> Result<f64, MetricsError> {
    let n = m.size();
    if n == 0 {
        return Err(MetricsError::Missing { row: 0, col: 0 });
    }
    let mut sum = 0.0;
    for k in 0..n {
        sum += m.at(k, k)?;
    }
    Ok(sum / n as f64)
}

/// `NBT_m` for every task but the last.
pub fn nbt_per_task(m: &SuccessMatrix) -> Result<Vec<f64>, MetricsError> {
    let n = m.size();
    (0..n.saturating_sub(1))
        .map(|t| {
            let diag = m.at(t, t)?;
            let mut drop = 0.0;
            for q in t + 1..n {
                drop += diag - m.at(q, t)?;
            }
            Ok(drop / (n - t - 1) as f64)
        })
        .collect()
}

pub fn nbt(m: &SuccessMatrix, convention: NbtConvention) -> Result<f64, MetricsError> {
    let n = m.size();
    if n < 2 {
        return Err(MetricsError::Undefined);
    }
    let sum: f64 = nbt_per_task(m)?.iter().sum();
    Ok(match convention {
        NbtConvention::ExcludeLast => sum / (n - 1) as f64,
        NbtConvention::ZeroLast => sum / n as f64,
    })
}

pub fn auc_per_task(m: &SuccessMatrix) -> Result<Vec<f64>, MetricsError> {
    let n = m.size();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for q in t..n {
                sum += m.at(q, t)?;
            }
            Ok(sum / (n - t) as f64)
        })
        .collect()
}

pub fn auc(m: &SuccessMatrix) -> Result<f64, MetricsError> {
    let per = auc_per_task(m)?;
    if per.is_empty() {
        return Err(MetricsError::Missing { row: 0, col: 0 });
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub fwt: f64,
    /// `None` for a single-task run.
    pub nbt: Option<f64>,
    pub auc: f64,
    pub nbt_per_task: Vec<f64>,
    pub auc_per_task: Vec<f64>,
    pub convention: NbtConvention,
}

impl MetricTriple {
    pub fn compute(m: &SuccessMatrix, convention: NbtConvention) -> Result<Self, MetricsError> {
        m.check_complete()?;
        Ok(Self {
            fwt: fwt(m)?,
            nbt: if m.size() >= 2 { Some(nbt(m, convention)?) } else { None },
            auc: auc(m)?,
            nbt_per_task: nbt_per_task(m)?,
            auc_per_task: auc_per_task(m)?,
            convention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hand_matrix() -> SuccessMatrix {
        SuccessMatrix::from_rows(&[vec![0.9], vec![0.8, 0.7], vec![0.8, 0.7, 0.6]]).unwrap()
    }

    #[test]
    fn hand_example() {
        let m = hand_matrix();
        assert!((fwt(&m).unwrap() - 0.733_333_333_333_333_3).abs() < 1e-12);
        let per = nbt_per_task(&m).unwrap();
        assert!((per[0] - 0.1).abs() < 1e-12);
        assert!(per[1].abs() < 1e-12);
        assert!((nbt(&m, NbtConvention::ExcludeLast).unwrap() - 0.05).abs() < 1e-12);
        let a = auc_per_task(&m).unwrap();
        assert!((a[0] - 0.833_333_333_333_333_4).abs() < 1e-12);
        assert!((a[1] - 0.7).abs() < 1e-12);
        assert!((a[2] - 0.6).abs() < 1e-12);
        assert!((auc(&m).unwrap() - 0.711_111_111_111_111_1).abs() < 1e-12);
        assert!((nbt(&m, NbtConvention::ZeroLast).unwrap() - 0.1 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_task() {
        let m = SuccessMatrix::from_rows(&[vec![0.4]]).unwrap();
        assert_eq!(fwt(&m).unwrap(), 0.4);
        assert_eq!(auc(&m).unwrap(), 0.4);
        assert_eq!(nbt(&m, NbtConvention::ExcludeLast), Err(MetricsError::Undefined));
        assert_eq!(MetricTriple::compute(&m, NbtConvention::default()).unwrap().nbt, None);
    }

    #[test]
    fn ones_give_one() {
        let m = SuccessMatrix::from_rows(&[vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(fwt(&m).unwrap(), 1.0);
        assert_eq!(auc(&m).unwrap(), 1.0);
    }

    #[test]
    fn improvement_is_negative() {
        let m = SuccessMatrix::from_rows(&[vec![0.5], vec![0.9, 0.7]]).unwrap();
        assert!(nbt(&m, NbtConvention::ExcludeLast).unwrap() < 0.0);
    }

    #[test]
    fn missing_and_invalid_entries() {
        let mut m = SuccessMatrix::new(2);
        m.set(0, 0, 0.5).unwrap();
        m.set(1, 1, 0.5).unwrap();
        assert_eq!(fwt(&m).unwrap(), 0.5);
        assert_eq!(auc(&m), Err(MetricsError::Missing { row: 1, col: 0 }));
        assert!(m.set(0, 1, 0.5).is_err());
        assert!(m.set(1, 0, 1.5).is_err());
        assert!(SuccessMatrix::from_rows(&[vec![0.5, 0.5]]).is_err());
    }

    proptest! {
        #[test]
        fn constant_columns_have_zero_nbt(diag in proptest::collection::vec(0.0f64..=1.0, 2..12)) {
            let rows: Vec<Vec<f64>> = (0..diag.len()).map(|i| diag[..=i].to_vec()).collect();
            let m = SuccessMatrix::from_rows(&rows).unwrap();
            prop_assert_eq!(nbt(&m, NbtConvention::ExcludeLast).unwrap(), 0.0);
            let mean = diag.iter().sum::<f64>() / diag.len() as f64;
            prop_assert!((auc(&m).unwrap() - mean).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_range(seed in proptest::collection::vec(0.0f64..=1.0, 55)) {
            let mut it = seed.into_iter();
            let rows: Vec<Vec<f64>> = (0..10).map(|i| (0..=i).map(|_| it.next().unwrap()).collect()).collect();
            let m = SuccessMatrix::from_rows(&rows).unwrap();
            let t = MetricTriple::compute(&m, NbtConvention::default()).unwrap();
            prop_assert!((0.0..=1.0).contains(&t.fwt));
            prop_assert!((0.0..=1.0).contains(&t.auc));
            prop_assert!((-1.0..=1.0).contains(&t.nbt.unwrap()));
        }
    }
}
