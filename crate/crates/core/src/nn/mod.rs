//! Minimal differentiable-network engine: tensors, a recording tape, dense
//! and batch-norm layers, Adam, Polyak averaging and checkpoints.

pub mod activation;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use activation::{activation, Activation};
pub use checkpoint::Checkpoint;
pub use layers::{dense_forward, BatchNorm, BatchNormConfig, Dense, Mode};
pub use loss::huber_loss;
pub use optim::{polyak_update, Adam, AdamConfig};
pub use params::{ParamSet, Parameter};
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;
