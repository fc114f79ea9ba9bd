//! Dense tensors, reverse-mode differentiation, fully connected networks and
//! the Adam optimizer.

pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use mlp::{forward_mlp, Activation, MlpSpec, OutputHead};
pub use params::{decayed_lr, Adam, AdamReport, Bound, Param, ParamSet};
pub use tape::{positional_encoding, quat_matrix, Binary, Gradients, SparseMatrix, Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::{ensure, Result};

/// Fourier features of point coordinates: for each coordinate `x`,
/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(order-1) pi x), cos(2^(order-1) pi x)]`.
pub fn positional_encode(points: &Tensor, order: usize) -> Result<Tensor> {
    ensure!(order >= 1, Validation, "positional encoding order must be at least 1");
    ensure!(points.is_finite(), Validation, "non-finite coordinates");
    Ok(positional_encoding(points, order))
}

/// Width of the encoding of `dims` coordinates.
pub fn encoded_width(dims: usize, order: usize) -> usize {
    dims * (1 + 2 * order)
}
