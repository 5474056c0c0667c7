//! SGD, SGD with momentum, and Adam over the flat parameter layout.
//!
//! The number of persistent state slots per parameter matches the memory
//! model's optimizer factors: plain SGD keeps none (factor 2 = weights +
//! gradients), momentum keeps one (factor 3), Adam keeps two (factor 4).

use super::{GradientSet, ParamSet};
use crate::memmodel::OptimizerKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..OptimizerConfig::sgd(learning_rate)
        }
    }
}

/// Persistent optimizer state; slot count depends on the optimizer kind.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    slots: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> OptimizerState {
        let n = params.num_params() as usize;
        let slot_count = match config.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::SgdMomentum => 1,
            OptimizerKind::Adam => 2,
        };
        OptimizerState {
            config,
            slots: vec![vec![0.0; n]; slot_count],
            steps: 0,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update in place. Gradients are read at full f64 precision;
    /// updated weights are re-quantized at the parameter dtype.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientSet) {
        let g = grads.to_flat();
        let mut w = params.to_flat();
        let lr = self.config.learning_rate;
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for i in 0..w.len() {
                    w[i] -= lr * g[i];
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = self.config.momentum;
                let vel = &mut self.slots[0];
                for i in 0..w.len() {
                    vel[i] = mu * vel[i] + g[i];
                    w[i] -= lr * vel[i];
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                let (m, v) = self.slots.split_at_mut(1);
                let (m, v) = (&mut m[0], &mut v[0]);
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        params.from_flat(&w);
    }
}
