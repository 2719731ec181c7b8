use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{huber_loss_batch, sgd_step, Graph, OptimConfig, Scalar, Tensor};
use crate::error::{Error, Result};

/// In-memory supervised samples: one tensor per graph input (leading axis is
/// the sample index) and a `[N, k]` target matrix.
#[derive(Debug, Clone)]
pub struct TrainSet<T> {
    pub inputs: Vec<Tensor<T>>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> TrainSet<T> {
    pub fn new(inputs: Vec<Tensor<T>>, targets: Tensor<T>) -> Result<Self> {
        let n = targets.shape()[0];
        for (i, t) in inputs.iter().enumerate() {
            if t.shape()[0] != n {
                return Err(Error::shape("train_set", format!("sample axis of input {i}"), n, t.shape()[0]));
            }
        }
        Ok(TrainSet { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, rows: &[usize]) -> (Vec<Tensor<T>>, Tensor<T>) {
        (
            self.inputs.iter().map(|t| t.gather_rows(rows)).collect(),
            self.targets.gather_rows(rows),
        )
    }
}

/// Trains with shuffled mini-batches and returns the per-epoch mean Huber
/// loss (the data term, measured on each batch before its update).
pub fn train_epochs<T: Scalar>(graph: &mut Graph<T>, data: &TrainSet<T>, cfg: &OptimConfig) -> Result<Vec<f64>> {
    train_epochs_with(graph, data, cfg, |_, _| {})
}

/// Like [`train_epochs`], calling `on_epoch(epoch, mean_loss)` after each epoch.
pub fn train_epochs_with<T: Scalar>(
    graph: &mut Graph<T>,
    data: &TrainSet<T>,
    cfg: &OptimConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train_epochs", "batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let (inputs, targets) = data.batch(rows);
            let refs: Vec<&Tensor<T>> = inputs.iter().collect();
            let out = graph.forward(&refs)?;
            let (loss, grad) = huber_loss_batch(out, &targets, cfg.huber_delta)?;
            graph.backward(&grad)?;
            sgd_step(graph, cfg);
            total += loss * rows.len() as f64;
        }
        let mean = total / data.len() as f64;
        on_epoch(epoch, mean);
        trace.push(mean);
    }
    Ok(trace)
}
