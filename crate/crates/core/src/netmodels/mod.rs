//! Classifier architectures, supervised training, and checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod container;
pub mod network;
pub mod train;

pub use arch::{ArchSpec, Layer};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use container::{Container, Record};
pub use network::{build_lenet, build_resnet, InputNorm, Network, StatsSource, TrainingMeta};
pub use train::{accuracy, train_supervised, TrainConfig, TrainReport};
