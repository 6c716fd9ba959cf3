//! Layers, models, the optimizer and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod layers;
pub mod model;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use layers::{argmax_classes, softmax_ce};
pub use model::{LayerSpec, Model, Pass, PoolVariant, Tapes};
pub use optim::{Adadelta, AdadeltaConfig};
