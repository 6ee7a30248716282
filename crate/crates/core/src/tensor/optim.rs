use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

/// SGD hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

/// Velocity buffers (one per parameter tensor) and the current learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor<T>>,
    pub learning_rate: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig, params: &[&Tensor<T>], learning_rate: f64) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            learning_rate,
        }
    }
}

/// One momentum step over every parameter:
/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(TensorError::ShapeMismatch {
            op: "sgd_step",
            expected: vec![state.velocity.len()],
            found: vec![params.len(), grads.len()],
        });
    }
    if !(state.learning_rate > 0.0) {
        return Err(TensorError::Invalid {
            op: "sgd_step",
            msg: format!("learning rate must be positive, got {}", state.learning_rate),
        });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    let mu = T::from_f64(state.config.momentum);
    let wd = T::from_f64(state.config.weight_decay);
    let lr = T::from_f64(state.learning_rate);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Learning rate as a function of the global iteration counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// `rates[i]` applies for iterations in `[boundaries[i-1], boundaries[i])`.
    Staircase { rates: Vec<f64>, boundaries: Vec<usize> },
    /// `initial · rate^(iter / steps)` with integer division.
    ExponentialDecay { initial: f64, decay_steps: usize, decay_rate: f64 },
}

impl LrSchedule {
    /// 0.1, divided by ten at 6000 and again at 12000 iterations.
    pub fn reference_staircase() -> Self {
        Self::Staircase {
            rates: vec![0.1, 0.01, 0.001],
            boundaries: vec![6000, 12000],
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            Self::Staircase { rates, boundaries } => {
                if rates.len() != boundaries.len() + 1 {
                    return Err(format!(
                        "staircase needs one more rate than boundaries ({} vs {})",
                        rates.len(),
                        boundaries.len()
                    ));
                }
                if rates.iter().any(|&r| !(r > 0.0)) {
                    return Err("learning rates must be positive".into());
                }
                if boundaries.windows(2).any(|w| w[0] >= w[1]) || boundaries.first() == Some(&0) {
                    return Err("schedule boundaries must be positive and increasing".into());
                }
            }
            Self::ExponentialDecay {
                initial,
                decay_steps,
                decay_rate,
            } => {
                if !(*initial > 0.0) || *decay_steps == 0 || !(*decay_rate > 0.0) {
                    return Err("exponential decay parameters must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, iter: usize) -> f64 {
        match self {
            Self::Staircase { rates, boundaries } => {
                let stage = boundaries.iter().take_while(|&&b| iter >= b).count();
                rates[stage]
            }
            Self::ExponentialDecay {
                initial,
                decay_steps,
                decay_rate,
            } => initial * decay_rate.powi((iter / decay_steps) as i32),
        }
    }
}
