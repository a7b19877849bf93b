//! Volumetric segmentation with holistic decomposition convolution (HDC) and
//! dense upsampling convolution (DUC).
//!
//! HDC periodically down-shuffles a large input patch into channels and runs
//! a convolution at the reduced resolution; DUC does the inverse at the
//! output. Wrapped around a U-net, every backbone activation shrinks by the
//! product of the shuffle factors.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod inference;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod shuffle;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use graph::{Activation, Graph, NodeId};
pub use rng::Rng;
pub use shuffle::{pds, pds_oracle, pus, ShuffleFactors};
pub use tensor::{Shape4, Tensor4};
