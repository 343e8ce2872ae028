//! Minimal differentiable-network engine: parameter storage, a batched
//! reverse-mode tape, dense and MADE-masked MLPs, and Adam.

mod adam;
mod layers;
mod params;
mod tape;

pub use adam::AdamState;
pub use layers::{made_masks, Activation, DenseLayer, Mlp};
pub use params::{view as param_view, LayoutEntry, ParamRef, ParamStore};
pub use tape::{CustomOp, NodeId, Tape};

/// `a · b` into a fresh row-major array, whatever the operand layouts.
pub(crate) fn matmul(a: ndarray::ArrayView2<'_, f64>, b: ndarray::ArrayView2<'_, f64>) -> ndarray::Array2<f64> {
    let mut c = ndarray::Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    c
}
