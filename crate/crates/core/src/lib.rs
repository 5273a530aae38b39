//! XYScanNet in plain Rust: a slice-and-scan state-space deblurring network
//! with its own tensor/autodiff core, desk-scale training, and an analysis
//! suite for scan-strategy cost and spatial-misalignment metrics.

pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod kvconfig;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod s6;
pub mod scan;
pub mod scanner;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{ConvMode, NodeId, Tape};
pub use tensor::{Scalar, Tensor};
