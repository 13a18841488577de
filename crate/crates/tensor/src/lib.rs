//! Dense `f64` tensors, the kernels a small detection network needs, and a
//! reverse-mode tape over them.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod ops;
pub mod optim;
pub mod rng;
mod tensor;

use std::collections::BTreeMap;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{BatchNormConfig, BatchNormState, Mode, PoolSpec};
pub use optim::{sgd_step, MomentumState};
pub use rng::SeedStream;
pub use tensor::Tensor;

/// Named parameter tensors, ordered by name.
pub type ParamSet = BTreeMap<String, Tensor>;
