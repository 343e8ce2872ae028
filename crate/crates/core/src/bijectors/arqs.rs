use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rqs::{raw_len, RqsParams, SplineOp};
use crate::nn::{Mlp, NodeId, ParamStore, Tape};
use crate::Result;

/// Autoregressive rational-quadratic spline flow.
///
/// In the normalizing direction `z_j = RQS(y_j; Θ_j(y_{<j}))`, evaluated for
/// all `j` in one MADE pass. Sampling inverts the spline one dimension at
/// a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arqs {
    dim: usize,
    bins: usize,
    bound: f64,
    net: Mlp,
}

impl Arqs {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: &[usize],
        bins: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(crate::Error::Contract(format!("spline needs at least 2 bins, got {bins}")));
        }
        let net = Mlp::made(store, name, dim, hidden, raw_len(bins), rng)?;
        Ok(Self { dim, bins, bound, net })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn op(&self) -> SplineOp {
        SplineOp {
            dim: self.dim,
            bins: self.bins,
            bound: self.bound,
        }
    }

    /// Spline for dimension `j` given one row of conditioner output.
    pub fn spline(&self, raw_row: &[f64], j: usize) -> RqsParams {
        let per = raw_len(self.bins);
        RqsParams::decode(&raw_row[j * per..(j + 1) * per], self.bins, self.bound)
    }

    /// Generative direction: `D` sequential passes, each inverting one
    /// coordinate's spline.
    pub fn forward(&self, params: &[f64], z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        super::check_width("arqs forward", self.dim, z.ncols())?;
        let n = z.nrows();
        let mut y = Array2::zeros((n, self.dim));
        let mut ld = Array1::zeros(n);
        for j in 0..self.dim {
            let out = self.net.forward(params, y.view())?;
            for r in 0..n {
                let row = out.row(r);
                let spline = self.spline(row.as_slice().expect("standard layout"), j);
                let yj = spline.invert(z[[r, j]])?;
                y[[r, j]] = yj;
                ld[r] -= spline.eval(yj).1.ln();
            }
        }
        Ok((y, ld))
    }

    pub fn inverse_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<(NodeId, NodeId)> {
        super::check_width("arqs inverse", self.dim, tape.value(y).ncols())?;
        let raw = self.net.forward_tape(tape, y)?;
        let op = self.op();
        let value = op.forward(tape.value(raw), tape.value(y))?;
        let out = tape.custom(vec![raw, y], value, Box::new(op));
        let z = tape.select_cols(out, (0..self.dim).collect())?;
        let logd = tape.select_cols(out, (self.dim..2 * self.dim).collect())?;
        let ld = tape.sum_rows(logd);
        Ok((z, ld))
    }
}
