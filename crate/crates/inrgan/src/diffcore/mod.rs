//! Differentiable dense-array computation.
//!
//! Forward evaluation and reverse-mode gradients for every primitive the
//! generator, hypernetwork and discriminator need, plus the Adam optimizer,
//! a finite-difference gradient checker and the checkpoint container.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod prim;

pub use adam::{Adam, AdamState};
pub use array::{Dtype, NdArray, Scalar};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use graph::{Evaluation, Gradients, Graph, GraphBuilder, NodeId};
pub use prim::{CustomOp, Prim};
