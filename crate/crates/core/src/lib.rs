//! Co-training of a nonlinear RNN with a Jacobian switching linear dynamical
//! system (JSLDS), and the analyses used to reverse-engineer the result.
//!
//! The crate is organized bottom-up:
//!
//! * [`diffcore`]: reverse-mode differentiation tape over dense matrices.
//! * [`cells`]: vanilla and GRU cells with closed-form Jacobians.
//! * [`jslds`]: expansion network, switching linear update, co-rollout and losses.
//! * [`tasks`]: 3-bit memory and context-dependent integration generators.
//! * [`train`]: Adam, schedule, clipping, training runs and checkpoints.
//! * [`analyze`]: fixed points, eigendecomposition, relative errors, selection
//!   vectors, choice subspace and PCA.
//! * [`experiment`]: the two desk-scale experiments measured end to end.

pub mod analyze;
pub mod cells;
pub mod diffcore;
pub mod experiment;
pub mod fastmath;
pub mod gradcheck;
pub mod jslds;
pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod tasks;
pub mod train;

pub use matrix::Matrix;
