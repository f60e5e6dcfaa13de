//! Frame-parallel point cloud sequence classification.
//!
//! A point cloud sequence (T frames, each an unordered set of 3-D points) is
//! classified in three stages:
//!
//! 1. each frame is flattened to a single descriptor vector (a *hyperpoint*)
//!    by two set-abstraction stages and a global PointNet layer,
//! 2. a mixer network dislocates the hyperpoints with sinusoidal displacement
//!    vectors and mixes channels per frame,
//! 3. hierarchical pyramid max pooling mixes across frames and feeds a small
//!    classifier head.
//!
//! Nothing before the frame-mixing pooling ever looks at more than one frame,
//! so stages 1–2 run as independent per-frame units on a worker pool; the
//! [`runtime`] module exploits that and benchmarks it. Everything is built on
//! the dense-tensor autodiff engine in [`tensor`], so the same forward
//! builders serve training and inference.

pub mod data;
pub mod embed;
pub mod geom;
pub mod mixer;
pub mod model;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use model::{ModelConfig, PoolingMode};
pub use tensor::{ParameterStore, Tensor};
