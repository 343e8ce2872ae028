use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SCALE_CLAMP;
use crate::nn::{Mlp, NodeId, ParamStore, Tape};
use crate::Result;

/// Masked autoregressive affine flow conditioned on the target variable.
///
/// MADE output `2j` is the log-scale and `2j + 1` the shift for dimension
/// `j`; both depend on `y_{<j}` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Maf {
    dim: usize,
    net: Mlp,
}

impl Maf {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::made(store, name, dim, hidden, 2, rng)?;
        Ok(Self { dim, net })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn scale_cols(&self) -> Vec<usize> {
        (0..self.dim).map(|j| 2 * j).collect()
    }

    fn shift_cols(&self) -> Vec<usize> {
        (0..self.dim).map(|j| 2 * j + 1).collect()
    }

    /// Generative direction: `D` sequential network passes.
    pub fn forward(&self, params: &[f64], z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        super::check_width("maf forward", self.dim, z.ncols())?;
        let n = z.nrows();
        let mut y = Array2::zeros((n, self.dim));
        let mut ld = Array1::zeros(n);
        for j in 0..self.dim {
            let out = self.net.forward(params, y.view())?;
            for r in 0..n {
                let scale = out[[r, 2 * j]].clamp(-SCALE_CLAMP, SCALE_CLAMP);
                y[[r, j]] = z[[r, j]] * scale.exp() + out[[r, 2 * j + 1]];
                ld[r] += scale;
            }
        }
        Ok((y, ld))
    }

    /// Normalizing direction in one pass:
    /// `z_j = (y_j − t_j(y_{<j})) · exp(−s_j(y_{<j}))`.
    pub fn inverse_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<(NodeId, NodeId)> {
        super::check_width("maf inverse", self.dim, tape.value(y).ncols())?;
        let out = self.net.forward_tape(tape, y)?;
        let scale = tape.select_cols(out, self.scale_cols())?;
        let scale = tape.clamp(scale, -SCALE_CLAMP, SCALE_CLAMP);
        let shift = tape.select_cols(out, self.shift_cols())?;
        let centered = tape.sub(y, shift)?;
        let neg = tape.scale(scale, -1.0);
        let inv_scale = tape.exp(neg);
        let z = tape.mul(centered, inv_scale)?;
        let ld = tape.sum_rows(neg);
        Ok((z, ld))
    }
}
