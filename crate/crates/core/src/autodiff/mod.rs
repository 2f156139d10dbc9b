//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records operations in execution order while the forward pass
//! runs, so nodes are topologically sorted by construction and every node's
//! input shapes are validated as it is added. [`Graph::backward`] walks the
//! record in reverse. Parameters live in a [`ParamStore`] and are updated by
//! [`Adam`].

mod adam;
mod graph;
mod kernels;
mod layers;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Mode, NodeId, RowMix};
pub use kernels::{col2im, conv_out_dim, conv_transpose_out_dim, im2col, matmul};
pub use layers::{Activation, Conv2d, ConvTranspose2d, Dense, Mlp};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
