//! CPU implementation of the Extended-2D U-Net and its training primitives.

pub mod checkpoint;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod vgg;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{BlockParams, NetworkConfig, NetworkParams};
pub use tensor::{Tensor, Tensor4};
pub use vgg::{transfer_vgg11, Vgg11Weights};
