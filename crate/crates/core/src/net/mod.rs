//! Small CNN engine: SimpleNet backbones, min/avg/max fusion, binary
//! cross-entropy, hand-written backward passes and Adam.

mod adam;
mod checkpoint;
mod fusion;
pub mod layers;
mod scalar;
mod simplenet;
mod tensor;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FUSN_MAGIC, FUSN_VERSION};
pub use fusion::{bce_loss, fuse, sigmoid, Forward, FusionNet, Tape};
pub use layers::Mode;
pub use scalar::Scalar;
pub use simplenet::{BatchStats, Block, NetShape, SimpleNet};
pub use tensor::Tensor;
pub use train::*;
