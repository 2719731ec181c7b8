use serde::{Deserialize, Serialize};

use crate::engine::{Graph, Scalar};

/// SGD-with-momentum training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Huber threshold in normalized-coordinate units.
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            batch_size: 128,
            epochs: 100,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

/// One momentum step on every trainable parameter:
/// `v <- momentum * v - lr * (g + weight_decay * w)`, `w <- w + v`.
/// Weight decay is applied to weights only.
pub fn sgd_step<T: Scalar>(graph: &mut Graph<T>, cfg: &OptimConfig) {
    let mu = T::from_real(cfg.momentum);
    let lr = T::from_real(cfg.learning_rate);
    for p in graph.params_mut() {
        if !p.trainable {
            continue;
        }
        let wd = T::from_real(if p.decay { cfg.weight_decay } else { 0.0 });
        let (value, grad, vel) = (p.value.data_mut(), p.grad.data(), p.velocity.data_mut());
        for ((w, &g), v) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *v = mu * *v - lr * (g + wd * *w);
            *w = *w + *v;
        }
    }
}
