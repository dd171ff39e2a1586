//! Minimal reverse-mode differentiable-array substrate.
//!
//! A [`Graph`] records primitive applications on a tape in topological order;
//! [`Graph::backward`] replays the tape in reverse and accumulates vector-
//! Jacobian products into per-node gradient buffers. The primitive set is
//! exactly what the model needs: matrix products (plain and transposed
//! layouts), element-wise add/scale/multiply, GELU, masked row softmax, layer
//! norm, row gather/scatter, row/column slice and concat, weighted
//! cross-entropy, dropout, and `detach`.
//!
//! Everything is generic over [`Scalar`] so the same code runs at 64-bit for
//! finite-difference checks and 32-bit for training.

mod graph;
pub mod gradcheck;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{mm_nn, mm_nt, mm_tn, Tensor};

/// RNG used for every stochastic primitive (dropout) and initialization.
pub type Rng = rand_chacha::ChaCha8Rng;
