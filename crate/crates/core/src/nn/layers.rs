use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{view, ParamRef, ParamStore};
use super::tape::{NodeId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Fully connected layer `y = act(x · (W ⊙ M)ᵀ + b)` with `W: out × in`.
///
/// `mask` is `None` for an ordinary dense layer; when present it has the
/// weight's shape and holds only zeros and ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub activation: Activation,
    #[serde(with = "mask_serde")]
    pub mask: Option<Arc<Array2<f64>>>,
}

impl DenseLayer {
    fn effective_weight(&self, params: &[f64]) -> Array2<f64> {
        let w = view(params, self.weight);
        match &self.mask {
            Some(m) => &w * &**m,
            None => w.to_owned(),
        }
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = super::matmul(x, self.effective_weight(params).t());
        y += &view(params, self.bias);
        if self.activation == Activation::Relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        y
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let h = tape.matmul_t(x, w, self.mask.clone())?;
        let h = tape.add_row(h, b)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Linear => h,
        })
    }
}

/// Multi-layer perceptron: ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub in_dim: usize,
    pub out_dim: usize,
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Allocate an unmasked network in `store` with Glorot-uniform hidden
    /// weights and a zero output layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(store, name, in_dim, hidden, out_dim, None, rng)
    }

    /// Allocate a MADE network for `dim` autoregressive inputs with
    /// `params_per_output` consecutive output units per dimension.
    pub fn made<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: &[usize],
        params_per_output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let masks = made_masks(dim, hidden, params_per_output)?;
        Ok(Self::build(store, name, dim, hidden, dim * params_per_output, Some(masks), rng))
    }

    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        masks: Option<Vec<Array2<f64>>>,
        rng: &mut R,
    ) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(in_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(out_dim);
        let n_layers = sizes.len() - 1;
        let mut masks = masks.map(|m| m.into_iter());
        let mut layers = Vec::with_capacity(n_layers);
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = l + 1 == n_layers;
            let weight = store.alloc(format!("{name}.layer{l}.weight"), fan_out, fan_in);
            let bias = store.alloc(format!("{name}.layer{l}.bias"), 1, fan_out);
            if !last && fan_in + fan_out > 0 {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in store.get_mut(weight) {
                    *w = rng.random_range(-limit..limit);
                }
            }
            layers.push(DenseLayer {
                in_dim: fan_in,
                out_dim: fan_out,
                weight,
                bias,
                activation: if last { Activation::Linear } else { Activation::Relu },
                mask: masks.as_mut().and_then(|m| m.next()).map(Arc::new),
            });
        }
        Self {
            in_dim,
            out_dim,
            layers,
        }
    }

    pub fn output_layer(&self) -> &DenseLayer {
        self.layers.last().expect("an MLP has at least one layer")
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward(&self, params: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim {
            return Err(Error::shape("mlp input", self.in_dim, x.ncols()));
        }
        let mut h = self.layers[0].forward(params, x);
        for layer in &self.layers[1..] {
            h = layer.forward(params, h.view());
        }
        Ok(h)
    }

    /// Single-vector forward pass.
    pub fn forward_vec(&self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.forward(params, x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        if tape.value(x).ncols() != self.in_dim {
            return Err(Error::shape("mlp input", self.in_dim, tape.value(x).ncols()));
        }
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward_tape(tape, h)?;
        }
        Ok(h)
    }
}

/// MADE masks with sequential degrees, one `out × in` matrix per layer.
///
/// Input `i` has degree `i + 1`; hidden unit `h` has degree
/// `h mod max(D−1, 1) + 1`; output unit `o` belongs to dimension
/// `o / params_per_output + 1` and sees only hidden units of strictly lower
/// degree. Dimension 1 therefore depends on no input at all.
pub fn made_masks(dim: usize, hidden: &[usize], params_per_output: usize) -> Result<Vec<Array2<f64>>> {
    if dim == 0 {
        return Err(Error::Contract("MADE needs at least one input dimension".into()));
    }
    if hidden.is_empty() {
        return Err(Error::Contract("MADE needs at least one hidden layer".into()));
    }
    if params_per_output == 0 {
        return Err(Error::Contract("MADE needs at least one output per dimension".into()));
    }
    let cycle = (dim - 1).max(1);
    let mut prev: Vec<usize> = (1..=dim).collect();
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    for &width in hidden {
        let degrees: Vec<usize> = (0..width).map(|h| h % cycle + 1).collect();
        masks.push(Array2::from_shape_fn((width, prev.len()), |(o, i)| {
            f64::from(u8::from(prev[i] <= degrees[o]))
        }));
        prev = degrees;
    }
    let out_degrees: Vec<usize> = (0..dim * params_per_output)
        .map(|o| o / params_per_output + 1)
        .collect();
    masks.push(Array2::from_shape_fn((out_degrees.len(), prev.len()), |(o, i)| {
        f64::from(u8::from(prev[i] < out_degrees[o]))
    }));
    Ok(masks)
}

mod mask_serde {
    use std::sync::Arc;

    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Packed {
        rows: usize,
        cols: usize,
        bits: String,
    }

    pub fn serialize<S: Serializer>(mask: &Option<Arc<Array2<f64>>>, s: S) -> Result<S::Ok, S::Error> {
        mask.as_ref()
            .map(|m| Packed {
                rows: m.nrows(),
                cols: m.ncols(),
                bits: m.iter().map(|&v| if v != 0.0 { '1' } else { '0' }).collect(),
            })
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Arc<Array2<f64>>>, D::Error> {
        let Some(p) = Option::<Packed>::deserialize(d)? else {
            return Ok(None);
        };
        let values: Vec<f64> = p.bits.chars().map(|c| if c == '1' { 1.0 } else { 0.0 }).collect();
        Array2::from_shape_vec((p.rows, p.cols), values)
            .map(|m| Some(Arc::new(m)))
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_params(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", 3, &[], 2, &mut rng);
        store.get_mut(net.layers[0].bias).copy_from_slice(&[0.5, -2.0]);
        let y = net.forward_vec(store.values(), &[7.0, -3.0, 1.0]).unwrap();
        assert_eq!(y, vec![0.5, -2.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", 3, &[], 3, &mut rng);
        store.view_mut(net.layers[0].weight).assign(&Array2::eye(3));
        let x = [0.25, -1.5, 4.0];
        assert_eq!(net.forward_vec(store.values(), &x).unwrap(), x.to_vec());
    }

    #[test]
    fn input_shape_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", 3, &[4], 2, &mut rng);
        assert!(matches!(net.forward_vec(store.values(), &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    /// Straight-line scalar re-implementation of a 3→5→2 network.
    #[test]
    fn forward_matches_scalar_reevaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&mut store, "n", 3, &[5], 2, &mut rng);
        random_params(&mut store, 2);
        let p = store.values();
        let x = [0.3, -0.8, 1.7];
        let (w0, b0) = (p[net.layers[0].weight.range()].to_vec(), p[net.layers[0].bias.range()].to_vec());
        let (w1, b1) = (p[net.layers[1].weight.range()].to_vec(), p[net.layers[1].bias.range()].to_vec());
        let mut hidden = [0.0; 5];
        for h in 0..5 {
            let mut acc = b0[h];
            for i in 0..3 {
                acc += w0[h * 3 + i] * x[i];
            }
            hidden[h] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut expected = [0.0; 2];
        for o in 0..2 {
            let mut acc = b1[o];
            for h in 0..5 {
                acc += w1[o * 5 + h] * hidden[h];
            }
            expected[o] = acc;
        }
        let got = net.forward_vec(p, &x).unwrap();
        for o in 0..2 {
            assert_relative_eq!(got[o], expected[o], epsilon = 1e-14);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::made(&mut store, "m", 4, &[16, 16], 3, &mut rng).unwrap();
        random_params(&mut store, 4);
        let x = array![[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 2.0, 0.5]];
        let plain = net.forward(store.values(), x.view()).unwrap();
        let mut tape = Tape::new(store.values());
        let xi = tape.constant(x);
        let out = net.forward_tape(&mut tape, xi).unwrap();
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn made_requires_hidden_layers() {
        assert!(made_masks(3, &[], 2).is_err());
        assert!(made_masks(0, &[4], 2).is_err());
    }

    #[test]
    fn made_single_dimension_severs_everything() {
        let masks = made_masks(1, &[4, 4], 2).unwrap();
        assert!(masks.last().unwrap().iter().all(|&m| m == 0.0));
    }

    fn numeric_jacobian(net: &Mlp, params: &[f64], x: &[f64]) -> Array2<f64> {
        let h = 1e-5;
        let mut jac = Array2::zeros((net.out_dim, net.in_dim));
        for i in 0..net.in_dim {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let yp = net.forward_vec(params, &xp).unwrap();
            let ym = net.forward_vec(params, &xm).unwrap();
            for o in 0..net.out_dim {
                jac[[o, i]] = (yp[o] - ym[o]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn made_outputs_are_autoregressive() {
        for (dim, hidden, ppo) in [(2, vec![8], 2), (4, vec![16, 16], 3), (5, vec![12, 7, 9], 1)] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
            let net = Mlp::made(&mut store, "m", dim, &hidden, ppo, &mut rng).unwrap();
            random_params(&mut store, 10 + dim as u64);
            let x: Vec<f64> = (0..dim).map(|i| 0.37 * i as f64 - 0.5).collect();
            let jac = numeric_jacobian(&net, store.values(), &x);
            let mut any_dependency = false;
            for o in 0..net.out_dim {
                let j = o / ppo; // 0-based dimension of this output
                for i in 0..dim {
                    if i >= j {
                        assert_eq!(jac[[o, i]], 0.0, "dim {dim}: output {o} depends on input {i}");
                    } else if jac[[o, i]] != 0.0 {
                        any_dependency = true;
                    }
                }
            }
            assert!(any_dependency, "masks severed every path");
        }
    }

    #[test]
    fn output_layer_starts_at_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&mut store, "n", 4, &[8, 8], 6, &mut rng);
        let out = net.output_layer();
        assert!(store.get(out.weight).iter().all(|&w| w == 0.0));
        assert!(store.get(net.layers[0].weight).iter().any(|&w| w != 0.0));
    }
}
