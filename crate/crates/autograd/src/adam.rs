use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn for_params(params: &[Tensor], cfg: AdamConfig) -> Vec<Self> {
        params.iter().map(|p| Self::new(p.len(), cfg)).collect()
    }
}

/// One bias-corrected Adam update of every parameter, then clears the
/// gradients. Nothing is modified if any parameter lacks a gradient.
pub fn adam_step(params: &mut [Tensor], states: &mut [AdamState], lr: f64) -> Result<()> {
    if params.len() != states.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![states.len()],
        });
    }
    for (index, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        match &p.grad {
            None => return Err(TensorError::MissingGrad { index }),
            Some(_) if s.m.len() != p.len() || s.v.len() != p.len() => {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![s.m.len()],
                })
            }
            Some(_) => {}
        }
    }
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        let grad = p.grad.take().expect("checked above");
        s.step += 1;
        let bc1 = 1.0 - s.beta1.powi(s.step as i32);
        let bc2 = 1.0 - s.beta2.powi(s.step as i32);
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            s.m[k] = s.beta1 * s.m[k] + (1.0 - s.beta1) * g;
            s.v[k] = s.beta2 * s.v[k] + (1.0 - s.beta2) * g * g;
            let m_hat = s.m[k] / bc1;
            let v_hat = s.v[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + s.epsilon);
        }
    }
    Ok(())
}
