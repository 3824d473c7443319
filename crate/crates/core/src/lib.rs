//! FishNet on a small CPU tensor/autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`] and [`graph`]: dense tensors, forward/backward
//!   kernels and the computational graph that doubles as the autodiff tape.
//! * [`fishnet`]: configuration, block builders (residual, transfer,
//!   UR/DR, SE bridge), whole-network assembly, and parameter/FLOP counts.
//! * [`analysis`]: gradient-transparency analysis of a graph (which
//!   features receive the loss gradient without passing through a
//!   convolution) plus its numerical check, and DOT export.
//! * [`data`], [`checkpoint`], [`train`]: datasets, binary checkpoints and
//!   the training/evaluation loop.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fishnet;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fishnet::{build, FishNetConfig, Model};
pub use graph::{Graph, Node, NodeId, Op, OpKind, Region, Tag};
pub use tensor::{Scalar, Tensor};
