//! Flow models: a standard-normal base pushed through a bijector chain,
//! with maximum-likelihood training and sampling/density APIs.

mod checkpoint;
mod train;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{nll_loss, nll_loss_and_grad, train, train_on, EarlyStopping, StageReport, StopReason, TrainConfig, TrainReport};

use crate::bijectors::{Arqs, Bijector, Chain, Maf, Permutation, RealNvp};
use crate::distributions::{Provenance, SampleSet, StandardNormalBase, HALF_LN_2PI};
use crate::nn::{NodeId, ParamStore, Tape};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Rows processed per chunk when evaluating large sample sets.
const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    RealNvp,
    Maf,
    Arqs,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::RealNvp, Architecture::Maf, Architecture::Arqs];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::RealNvp => "realnvp",
            Architecture::Maf => "maf",
            Architecture::Arqs => "arqs",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "realnvp" => Ok(Architecture::RealNvp),
            "maf" => Ok(Architecture::Maf),
            "arqs" => Ok(Architecture::Arqs),
            other => Err(Error::Contract(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationKind {
    #[default]
    Random,
    Reverse,
}

/// Base distribution, bijector chain and the parameters they read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub base: StandardNormalBase,
    pub chain: Chain,
    pub params: ParamStore,
}

impl FlowModel {
    /// Flow with no bijectors: the density is the base density.
    pub fn identity(dim: usize) -> Self {
        Self {
            base: StandardNormalBase { dim },
            chain: Chain::default(),
            params: ParamStore::new(),
        }
    }

    pub fn from_parts(dim: usize, chain: Chain, params: ParamStore) -> Result<Self> {
        if let Some(b) = chain.bijectors().first() {
            if b.dim() != dim {
                return Err(Error::shape("flow dimension", dim, b.dim()));
            }
        }
        Ok(Self {
            base: StandardNormalBase { dim },
            chain,
            params,
        })
    }

    /// `n_bijectors` flow layers of `arch` with a permutation between
    /// consecutive layers. Initialization and permutations come from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        arch: Architecture,
        dim: usize,
        n_bijectors: usize,
        hidden: &[usize],
        bins: usize,
        bound: f64,
        permutation: PermutationKind,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || n_bijectors == 0 {
            return Err(Error::Contract("flow needs D >= 1 and at least one bijector".into()));
        }
        let mut rng = crate::distributions::rng_from_seed(derive_seed(seed, 0));
        let mut perm_rng = crate::distributions::rng_from_seed(derive_seed(seed, 1));
        let mut params = ParamStore::new();
        let mut bijectors = Vec::with_capacity(2 * n_bijectors - 1);
        for i in 0..n_bijectors {
            if i > 0 {
                let p = match permutation {
                    PermutationKind::Random => Permutation::random(dim, &mut perm_rng),
                    PermutationKind::Reverse => Permutation::reverse(dim),
                };
                bijectors.push(Bijector::Permutation(p));
            }
            let name = format!("{arch}{i}");
            bijectors.push(match arch {
                Architecture::RealNvp => {
                    let split = if dim == 1 { 0 } else { RealNvp::default_split(dim) };
                    Bijector::RealNvp(RealNvp::new(&mut params, &name, dim, split, hidden, &mut rng)?)
                }
                Architecture::Maf => Bijector::Maf(Maf::new(&mut params, &name, dim, hidden, &mut rng)?),
                Architecture::Arqs => Bijector::Arqs(Arqs::new(&mut params, &name, dim, hidden, bins, bound, &mut rng)?),
            });
        }
        Self::from_parts(dim, Chain::new(bijectors)?, params)
    }

    pub fn dim(&self) -> usize {
        self.base.dim
    }

    /// Per-row `log p_Z(f(y)) + log|det J_f|(y)` recorded on `tape`.
    pub(crate) fn log_prob_tape(&self, tape: &mut Tape<'_>, y: NodeId) -> Result<NodeId> {
        let (z, ld) = self.chain.inverse_tape(tape, y)?;
        let sq = tape.square(z);
        let sq = tape.sum_rows(sq);
        let base = tape.scale(sq, -0.5);
        let base = tape.add_scalar(base, -(self.dim() as f64) * HALF_LN_2PI);
        match ld {
            Some(ld) => tape.add(base, ld),
            None => Ok(base),
        }
    }

    /// Log-density of every row of `x` under the current parameters.
    pub fn log_prob_with(&self, params: &[f64], x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::shape("flow_log_prob", self.dim(), x.ncols()));
        }
        let mut out = Array1::zeros(x.nrows());
        for (i, chunk) in x.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
            let mut tape = Tape::new(params);
            let y = tape.constant_view(chunk);
            let lp = self.log_prob_tape(&mut tape, y)?;
            let start = i * EVAL_CHUNK;
            out.slice_mut(s![start..start + chunk.nrows()]).assign(&tape.value(lp).column(0));
        }
        Ok(out)
    }
}

/// Density of each row of `x`: `log p_Z(f(x)) + log|det J_f|(x)`.
pub fn flow_log_prob(model: &FlowModel, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    model.log_prob_with(model.params.values(), x)
}

/// Draw `m` base points from `seed` and push them through the chain.
pub fn flow_sample(model: &FlowModel, m: usize, seed: u64) -> Result<SampleSet> {
    let z = model.base.sample_array(m, seed);
    let mut y = Array2::zeros((m, model.dim()));
    for (i, chunk) in z.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let (out, _) = model.chain.forward(model.params.values(), chunk)?;
        let start = i * EVAL_CHUNK;
        y.slice_mut(s![start..start + chunk.nrows(), ..]).assign(&out);
    }
    SampleSet::new(y, Provenance::Flow, seed)
}
