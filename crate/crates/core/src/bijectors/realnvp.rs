use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SCALE_CLAMP;
use crate::nn::{Mlp, NodeId, ParamStore, Tape};
use crate::{Error, Result};

/// Affine coupling layer. The first `split` coordinates pass through and
/// condition a shift and log-scale for the remaining `dim − split`.
///
/// The conditioner is one MLP with two heads: outputs `0..dim−split` are the
/// log-scales `s`, the rest the shifts `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealNvp {
    dim: usize,
    split: usize,
    net: Mlp,
}

impl RealNvp {
    /// `split` must satisfy `1 ≤ split ≤ dim − 1`; for `dim = 1` the only
    /// allowed split is 0, which gives an unconditioned affine map.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        split: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let valid = if dim == 1 { split == 0 } else { (1..dim).contains(&split) };
        if !valid {
            return Err(Error::Contract(format!("coupling split {split} invalid for dimension {dim}")));
        }
        let net = Mlp::new(store, name, split, hidden, 2 * (dim - split), rng);
        Ok(Self { dim, split, net })
    }

    /// Half split, `⌊D/2⌋`.
    pub fn default_split(dim: usize) -> usize {
        dim / 2
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn heads(&self, params: &[f64], cond: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.net.forward(params, cond)?;
        let m = self.dim - self.split;
        let scale = out.slice(s![.., ..m]).mapv(|v| v.clamp(-SCALE_CLAMP, SCALE_CLAMP));
        let shift = out.slice(s![.., m..]).to_owned();
        Ok((scale, shift))
    }

    /// Generative map: `y_B = z_B ⊙ exp(s(z_A)) + t(z_A)`, log-det `Σ s`.
    pub fn forward(&self, params: &[f64], z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        super::check_width("realnvp forward", self.dim, z.ncols())?;
        let (scale, shift) = self.heads(params, z.slice(s![.., ..self.split]))?;
        let mut y = z.to_owned();
        {
            let mut tail = y.slice_mut(s![.., self.split..]);
            tail *= &scale.mapv(f64::exp);
            tail += &shift;
        }
        Ok((y, scale.sum_axis(Axis(1))))
    }

    /// Normalizing map: `z_B = (y_B − t(y_A)) ⊙ exp(−s(y_A))`, log-det `−Σ s`.
    pub fn inverse_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<(NodeId, NodeId)> {
        super::check_width("realnvp inverse", self.dim, tape.value(y).ncols())?;
        let m = self.dim - self.split;
        let head = tape.select_cols(y, (0..self.split).collect())?;
        let tail = tape.select_cols(y, (self.split..self.dim).collect())?;
        let out = self.net.forward_tape(tape, head)?;
        let scale = tape.select_cols(out, (0..m).collect())?;
        let scale = tape.clamp(scale, -SCALE_CLAMP, SCALE_CLAMP);
        let shift = tape.select_cols(out, (m..2 * m).collect())?;
        let centered = tape.sub(tail, shift)?;
        let neg = tape.scale(scale, -1.0);
        let inv_scale = tape.exp(neg);
        let z_tail = tape.mul(centered, inv_scale)?;
        let z = tape.concat_cols(&[head, z_tail])?;
        let ld = tape.sum_rows(neg);
        Ok((z, ld))
    }
}
