//! Dense tensors, a reverse-mode tape, and row-masked optimizers.

mod graph;
mod optim;
mod tensor;

pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, ParamId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn central_difference<F>(x: &Tensor, h: f64, mut f: F) -> Result<Tensor, GradError>
where
    F: FnMut(&Tensor) -> Result<f64, GradError>,
{
    let mut probe = x.clone();
    let mut out = Tensor::new(x.shape().to_vec(), vec![0.0; x.numel()])?;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
