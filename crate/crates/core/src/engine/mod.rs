//! Deterministic tensor engine: layer kernels, a batched feed-forward graph
//! with reverse-mode gradients, Huber loss, SGD with momentum and the
//! checkpoint container.

mod checkpoint;
mod exec;
mod graph;
mod loss;
pub mod ops;
mod optim;
mod scalar;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, CHECKPOINT_MAGIC};
pub use exec::ExecMode;
pub(crate) use exec::map_samples;
pub use graph::{Graph, GraphBuilder, Node, NodeId, Op, Param, ParamId};
pub use loss::{huber_loss, huber_loss_batch};
pub use ops::{conv2d, fully_connected, maxpool2d, relu};
pub use optim::{sgd_step, OptimConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{train_epochs, train_epochs_with, TrainSet};
