use ndarray::{Array2, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

/// Trainable tensor with its gradient accumulator and optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f32>,
    pub grad: Array2<f32>,
    state: Vec<Array2<f32>>,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            value,
            grad,
            state: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    /// Uniform(-bound, bound) initialization.
    pub fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut Rng) -> Self {
        Self::new(Array2::from_shape_fn((rows, cols), |_| {
            rng.random_range(-bound..=bound)
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.value.nrows(), self.value.ncols()]
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }

    /// Replace the value, keeping gradient and optimizer state shapes.
    pub fn load(&mut self, data: &[f32]) {
        assert_eq!(data.len(), self.value.len(), "parameter size mismatch");
        self.value.iter_mut().zip(data).for_each(|(v, d)| *v = *d);
        self.state.clear();
    }

    pub fn values(&self) -> Vec<f32> {
        self.value.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f32,
        momentum: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
}

impl OptimizerConfig {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(crate::Error::config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, steps: 0 }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        self.steps += 1;
        match self.cfg {
            OptimizerConfig::Sgd { lr, momentum } => {
                for p in params.iter_mut() {
                    if p.state.is_empty() {
                        p.state.push(Array2::zeros(p.value.raw_dim()));
                    }
                    let Param { value, grad, state } = &mut **p;
                    Zip::from(value)
                        .and(grad)
                        .and(&mut state[0])
                        .for_each(|v, g, buf| {
                            *buf = momentum * *buf + *g;
                            *v -= lr * *buf;
                            *g = 0.0;
                        });
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for p in params.iter_mut() {
                    if p.state.is_empty() {
                        p.state.push(Array2::zeros(p.value.raw_dim()));
                        p.state.push(Array2::zeros(p.value.raw_dim()));
                    }
                    let Param { value, grad, state } = &mut **p;
                    let (m, v2) = state.split_at_mut(1);
                    Zip::from(value)
                        .and(grad)
                        .and(&mut m[0])
                        .and(&mut v2[0])
                        .for_each(|v, g, m, s| {
                            *m = beta1 * *m + (1.0 - beta1) * *g;
                            *s = beta2 * *s + (1.0 - beta2) * *g * *g;
                            *v -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                            *g = 0.0;
                        });
                }
            }
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let norm = params
        .iter()
        .map(|p| {
            p.grad
                .iter()
                .map(|g| (*g as f64) * (*g as f64))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.mapv_inplace(|g| g * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut p = Param::new(array![[1.0f32]]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9));
        p.grad[[0, 0]] = 2.0;
        opt.step(&mut [&mut p]);
        assert!((p.value[[0, 0]] - 0.8).abs() < 1e-7);
        p.grad[[0, 0]] = 2.0;
        opt.step(&mut [&mut p]);
        // buf = 0.9*2 + 2 = 3.8
        assert!((p.value[[0, 0]] - (0.8 - 0.38)).abs() < 1e-6);
        assert_eq!(p.grad[[0, 0]], 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new(array![[0.0f32, 0.0]]);
        p.grad = array![[5.0, -0.001]];
        Optimizer::new(OptimizerConfig::adam(0.01)).step(&mut [&mut p]);
        assert!((p.value[[0, 0]] + 0.01).abs() < 1e-5);
        assert!((p.value[[0, 1]] - 0.01).abs() < 1e-4);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut p = Param::new(array![[0.0f32, 0.0]]);
        p.grad = array![[3.0, 4.0]];
        let n = clip_grad_norm(&mut [&mut p], 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        assert!((p.grad[[0, 0]] - 0.6).abs() < 1e-6);
    }
}
