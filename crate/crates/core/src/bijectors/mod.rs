//! Invertible transforms and their composition.
//!
//! Conventions: `forward` is the generative map `g: z → y` and returns
//! `log|det J_g|(z)`; `inverse` is the normalizing map `f: y → z` and returns
//! `log|det J_f|(y)`. The normalizing direction is also available on a
//! [`Tape`] for training.

mod arqs;
mod maf;
mod permutation;
mod realnvp;
pub mod rqs;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use arqs::Arqs;
pub use maf::Maf;
pub use permutation::Permutation;
pub use realnvp::RealNvp;
pub use rqs::RqsParams;

use crate::nn::{NodeId, Tape};
use crate::{Error, Result};

/// Log-scales of the affine bijectors are clamped to `[-7, 7]` before `exp`.
pub const SCALE_CLAMP: f64 = 7.0;

pub(crate) fn check_width(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(context, expected, got));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Bijector {
    RealNvp(RealNvp),
    Maf(Maf),
    Arqs(Arqs),
    Permutation(Permutation),
}

impl Bijector {
    pub fn dim(&self) -> usize {
        match self {
            Bijector::RealNvp(b) => b.dim(),
            Bijector::Maf(b) => b.dim(),
            Bijector::Arqs(b) => b.dim(),
            Bijector::Permutation(b) => b.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Bijector::RealNvp(_) => "realnvp",
            Bijector::Maf(_) => "maf",
            Bijector::Arqs(_) => "arqs",
            Bijector::Permutation(_) => "permutation",
        }
    }

    pub fn forward(&self, params: &[f64], z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        match self {
            Bijector::RealNvp(b) => b.forward(params, z),
            Bijector::Maf(b) => b.forward(params, z),
            Bijector::Arqs(b) => b.forward(params, z),
            Bijector::Permutation(p) => {
                check_width("permutation forward", p.dim(), z.ncols())?;
                Ok((p.forward(z), Array1::zeros(z.nrows())))
            }
        }
    }

    /// Normalizing map on the tape. The log-det node is `n × 1`, or `None`
    /// for volume-preserving bijectors.
    pub fn inverse_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let (z, ld) = match self {
            Bijector::RealNvp(b) => b.inverse_tape(tape, y)?,
            Bijector::Maf(b) => b.inverse_tape(tape, y)?,
            Bijector::Arqs(b) => b.inverse_tape(tape, y)?,
            Bijector::Permutation(p) => {
                check_width("permutation inverse", p.dim(), tape.value(y).ncols())?;
                return Ok((tape.select_cols(y, p.inverse_indices().to_vec())?, None));
            }
        };
        Ok((z, Some(ld)))
    }

    pub fn inverse(&self, params: &[f64], y: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        Chain::from_slice(std::slice::from_ref(self)).inverse(params, y)
    }
}

/// Ordered composition `g = g_N ∘ … ∘ g_1`; `bijectors[0]` is `g_1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    bijectors: Vec<Bijector>,
}

impl Chain {
    pub fn new(bijectors: Vec<Bijector>) -> Result<Self> {
        if let Some(first) = bijectors.first() {
            let d = first.dim();
            if let Some(bad) = bijectors.iter().find(|b| b.dim() != d) {
                return Err(Error::shape("chain dimension", d, bad.dim()));
            }
        }
        Ok(Self { bijectors })
    }

    fn from_slice(b: &[Bijector]) -> ChainRef<'_> {
        ChainRef(b)
    }

    pub fn bijectors(&self) -> &[Bijector] {
        &self.bijectors
    }

    pub fn len(&self) -> usize {
        self.bijectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bijectors.is_empty()
    }

    /// `(g(z), Σ log|det J_{g_i}|)` with each term taken at its own
    /// intermediate point.
    pub fn forward(&self, params: &[f64], z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        ChainRef(&self.bijectors).forward(params, z)
    }

    pub fn inverse(&self, params: &[f64], y: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        ChainRef(&self.bijectors).inverse(params, y)
    }

    /// Normalizing pass on the tape; returns `z` and the `n × 1` total
    /// log-det, or `None` when every bijector is volume preserving.
    pub fn inverse_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        ChainRef(&self.bijectors).inverse_tape(tape, y)
    }
}

struct ChainRef<'a>(&'a [Bijector]);

impl ChainRef<'_> {
    fn forward(&self, params: &[f64], z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let mut x = z.to_owned();
        let mut total = Array1::zeros(z.nrows());
        for (index, b) in self.0.iter().enumerate() {
            let (next, ld) = b.forward(params, x.view())?;
            if next.iter().chain(ld.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { index });
            }
            total += &ld;
            x = next;
        }
        Ok((x, total))
    }

    fn inverse_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<(NodeId, Option<NodeId>)> {
        let mut x = y;
        let mut total: Option<NodeId> = None;
        for b in self.0.iter().rev() {
            let (next, ld) = b.inverse_tape(tape, x)?;
            x = next;
            total = match (total, ld) {
                (Some(t), Some(l)) => Some(tape.add(t, l)?),
                (t, l) => t.or(l),
            };
        }
        Ok((x, total))
    }

    fn inverse(&self, params: &[f64], y: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let n = y.nrows();
        let mut x = y.to_owned();
        let mut total = Array1::zeros(n);
        for (index, b) in self.0.iter().enumerate().rev() {
            let mut tape = Tape::new(params);
            let input = tape.constant(x);
            let (z, ld) = b.inverse_tape(&mut tape, input)?;
            if let Some(ld) = ld {
                total += &tape.value(ld).column(0);
            }
            x = tape.into_value(z);
            if x.iter().chain(total.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { index });
            }
        }
        Ok((x, total))
    }
}

#[cfg(test)]
mod tests;
