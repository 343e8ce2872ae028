use approx::assert_relative_eq;
use nalgebra::DMatrix;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nn::ParamStore;

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for v in store.values_mut() {
        *v = rng.random_range(-scale..scale);
    }
}

fn normal_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn build(kind: &str, dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Bijector {
    match kind {
        "realnvp" => Bijector::RealNvp(
            RealNvp::new(store, "b", dim, RealNvp::default_split(dim).max(usize::from(dim > 1)), &[16, 16], rng).unwrap(),
        ),
        "maf" => Bijector::Maf(Maf::new(store, "b", dim, &[16, 16], rng).unwrap()),
        "arqs" => Bijector::Arqs(Arqs::new(store, "b", dim, &[16, 16], 8, 12.0, rng).unwrap()),
        _ => unreachable!(),
    }
}

fn numeric_jacobian(f: impl Fn(&Array2<f64>) -> Array2<f64>, x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let h = 1e-6;
    let mut jac = DMatrix::zeros(d, d);
    for i in 0..d {
        let mut xp = Array2::from_shape_vec((1, d), x.to_vec()).unwrap();
        let mut xm = xp.clone();
        xp[[0, i]] += h;
        xm[[0, i]] -= h;
        let (yp, ym) = (f(&xp), f(&xm));
        for o in 0..d {
            jac[(o, i)] = (yp[[0, o]] - ym[[0, o]]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn empty_chain_is_identity() {
    let chain = Chain::default();
    let z = array![[1.0, -2.0], [0.5, 3.0]];
    let (y, ld) = chain.forward(&[], z.view()).unwrap();
    assert_eq!(y, z);
    assert!(ld.iter().all(|&v| v == 0.0));
}

#[test]
fn chain_rejects_mixed_dimensions() {
    let a = Bijector::Permutation(Permutation::reverse(2));
    let b = Bijector::Permutation(Permutation::reverse(3));
    assert!(Chain::new(vec![a, b]).is_err());
}

#[test]
fn two_permutations_compose() {
    let p1 = Permutation::new(vec![1, 2, 0]).unwrap();
    let p2 = Permutation::new(vec![2, 0, 1]).unwrap();
    let chain = Chain::new(vec![Bijector::Permutation(p1.clone()), Bijector::Permutation(p2.clone())]).unwrap();
    let z = array![[10.0, 20.0, 30.0]];
    let (y, ld) = chain.forward(&[], z.view()).unwrap();
    assert_eq!(y, p2.forward(p1.forward(z.view()).view()));
    assert_eq!(ld[0], 0.0);
    let (back, ld_inv) = chain.inverse(&[], y.view()).unwrap();
    assert_eq!(back, z);
    assert_eq!(ld_inv[0], 0.0);
}

/// Two one-dimensional affine scalings compose additively in log-det.
#[test]
fn chained_scalings_add_log_dets() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (1.7_f64, 0.35_f64);
    let m1 = Maf::new(&mut store, "a", 1, &[4], &mut rng).unwrap();
    let m2 = Maf::new(&mut store, "b", 1, &[4], &mut rng).unwrap();
    store.get_mut(m1.net().output_layer().bias)[0] = a.ln();
    store.get_mut(m2.net().output_layer().bias)[0] = b.ln();
    let chain = Chain::new(vec![Bijector::Maf(m1), Bijector::Maf(m2)]).unwrap();
    let (y, ld) = chain.forward(store.values(), array![[2.0]].view()).unwrap();
    assert_relative_eq!(y[[0, 0]], 2.0 * a * b, epsilon = 1e-14);
    assert_relative_eq!(ld[0], a.ln() + b.ln(), epsilon = 1e-14);
}

#[test]
fn chain_reports_failing_bijector() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = Bijector::Permutation(Permutation::reverse(1));
    let m = Maf::new(&mut store, "a", 1, &[4], &mut rng).unwrap();
    store.get_mut(m.net().output_layer().bias)[1] = f64::INFINITY;
    let chain = Chain::new(vec![p, Bijector::Maf(m)]).unwrap();
    let err = chain.forward(store.values(), array![[1.0]].view()).unwrap_err();
    assert!(matches!(err, Error::NumericOverflow { index: 1 }), "{err}");
}

#[test]
fn realnvp_zero_nets_are_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = Bijector::RealNvp(RealNvp::new(&mut store, "r", 4, 2, &[8], &mut rng).unwrap());
    let z = normal_batch(&mut rng, 5, 4, 1.0);
    let (y, ld) = b.forward(store.values(), z.view()).unwrap();
    assert_eq!(y, z);
    assert!(ld.iter().all(|&v| v == 0.0));
}

#[test]
fn realnvp_rejects_bad_split() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(RealNvp::new(&mut store, "r", 4, 0, &[8], &mut rng).is_err());
    assert!(RealNvp::new(&mut store, "r", 4, 4, &[8], &mut rng).is_err());
    assert!(RealNvp::new(&mut store, "r", 1, 0, &[8], &mut rng).is_ok());
}

/// Linear conditioner (no hidden layer): outputs are `[s, t]`.
fn linear_coupling(store: &mut ParamStore) -> RealNvp {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    RealNvp::new(store, "r", 2, 1, &[], &mut rng).unwrap()
}

#[test]
fn realnvp_shear() {
    let mut store = ParamStore::new();
    let r = linear_coupling(&mut store);
    // t(z₁) = z₁
    store.get_mut(r.net().output_layer().weight)[1] = 1.0;
    let (y, ld) = r.forward(store.values(), array![[0.8, -0.3]].view()).unwrap();
    assert_eq!(y, array![[0.8, -0.3 + 0.8]]);
    assert_eq!(ld[0], 0.0);
}

#[test]
fn realnvp_constant_scale_and_shift() {
    let mut store = ParamStore::new();
    let r = linear_coupling(&mut store);
    store.get_mut(r.net().output_layer().bias).copy_from_slice(&[2f64.ln(), 1.0]);
    let b = Bijector::RealNvp(r);
    let (y, ld) = b.forward(store.values(), array![[0.5, 1.0]].view()).unwrap();
    assert_relative_eq!(y[[0, 0]], 0.5);
    assert_relative_eq!(y[[0, 1]], 3.0, epsilon = 1e-15);
    assert_relative_eq!(ld[0], 2f64.ln());
    let (z, ld_inv) = b.inverse(store.values(), y.view()).unwrap();
    assert_relative_eq!(z[[0, 1]], 1.0, epsilon = 1e-15);
    assert_relative_eq!(ld_inv[0], -(2f64.ln()));
}

#[test]
fn realnvp_inverse_with_constant_shift() {
    let mut store = ParamStore::new();
    let r = linear_coupling(&mut store);
    store.get_mut(r.net().output_layer().bias)[1] = 0.75;
    let b = Bijector::RealNvp(r);
    let (z, _) = b.inverse(store.values(), array![[3.0, 2.0]].view()).unwrap();
    assert_eq!(z, array![[3.0, 1.25]]);
}

#[test]
fn maf_zero_net_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = Bijector::Maf(Maf::new(&mut store, "m", 3, &[8], &mut rng).unwrap());
    let y = normal_batch(&mut rng, 4, 3, 2.0);
    let (z, ld) = b.inverse(store.values(), y.view()).unwrap();
    assert_eq!(z, y);
    assert!(ld.iter().all(|&v| v == 0.0));
    let (y2, _) = b.forward(store.values(), z.view()).unwrap();
    assert_eq!(y2, y);
}

#[test]
fn maf_hand_set_constants() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Maf::new(&mut store, "m", 2, &[8], &mut rng).unwrap();
    // outputs: [s₁, t₁, s₂, t₂]
    store.get_mut(m.net().output_layer().bias).copy_from_slice(&[0.0, 0.0, 3f64.ln(), 2.0]);
    let b = Bijector::Maf(m);
    let (z, ld) = b.inverse(store.values(), array![[1.0, 5.0]].view()).unwrap();
    assert_relative_eq!(z[[0, 0]], 1.0);
    assert_relative_eq!(z[[0, 1]], 1.0, epsilon = 1e-15);
    assert_relative_eq!(ld[0], -(3f64.ln()));
}

#[test]
fn maf_single_dimension_is_plain_affine() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Maf::new(&mut store, "m", 1, &[8], &mut rng).unwrap();
    randomize(&mut store, &mut rng, 0.5);
    let bias = store.get(m.net().output_layer().bias).to_vec();
    let b = Bijector::Maf(m);
    for z in [-2.0, 0.0, 1.3] {
        let (y, ld) = b.forward(store.values(), array![[z]].view()).unwrap();
        assert_relative_eq!(y[[0, 0]], z * bias[0].exp() + bias[1], epsilon = 1e-14);
        assert_relative_eq!(ld[0], bias[0], epsilon = 1e-14);
    }
}

#[test]
fn arqs_zero_net_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = Bijector::Arqs(Arqs::new(&mut store, "a", 4, &[8], 8, 12.0, &mut rng).unwrap());
    let y = normal_batch(&mut rng, 20, 4, 3.0);
    let (z, ld) = b.inverse(store.values(), y.view()).unwrap();
    assert!(max_abs_diff(&z, &y) < 1e-10);
    assert!(ld.iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn round_trips_and_antisymmetry() {
    for (kind, dim, tol) in [("realnvp", 8, 1e-8), ("maf", 16, 1e-8), ("arqs", 4, 1e-6)] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = build(kind, dim, &mut store, &mut rng);
        randomize(&mut store, &mut rng, 0.3);
        let z = normal_batch(&mut rng, 1000, dim, 2.0);
        let (y, ld_g) = b.forward(store.values(), z.view()).unwrap();
        let (back, ld_f) = b.inverse(store.values(), y.view()).unwrap();
        let err = max_abs_diff(&back, &z);
        assert!(err < tol, "{kind}: round trip error {err}");
        let anti = (&ld_g + &ld_f).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(anti < 1e-8, "{kind}: log-det antisymmetry {anti}");
        assert!(ld_g.iter().any(|v| v.abs() > 1e-3), "{kind}: parameters had no effect");
    }
}

#[test]
fn log_det_matches_numeric_jacobian() {
    for kind in ["realnvp", "maf", "arqs"] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = build(kind, 3, &mut store, &mut rng);
        randomize(&mut store, &mut rng, 0.4);
        let params = store.values().to_vec();
        for _ in 0..5 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let jac = numeric_jacobian(|x| b.forward(&params, x.view()).unwrap().0, &z);
            let brute = jac.determinant().abs().ln();
            let (_, ld) = b.forward(&params, Array2::from_shape_vec((1, 3), z.clone()).unwrap().view()).unwrap();
            assert_relative_eq!(ld[0], brute, max_relative = 1e-4, epsilon = 1e-8);
        }
    }
}

#[test]
fn autoregressive_jacobians_are_triangular() {
    for kind in ["maf", "arqs"] {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = build(kind, 4, &mut store, &mut rng);
        randomize(&mut store, &mut rng, 0.4);
        let params = store.values().to_vec();
        let y: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        for jac in [
            numeric_jacobian(|x| b.forward(&params, x.view()).unwrap().0, &y),
            numeric_jacobian(|x| b.inverse(&params, x.view()).unwrap().0, &y),
        ] {
            for r in 0..4 {
                for c in r + 1..4 {
                    assert!(jac[(r, c)].abs() < 1e-10, "{kind}: J[{r},{c}] = {}", jac[(r, c)]);
                }
            }
        }
    }
}

#[test]
fn coupling_passes_head_through() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let b = build("realnvp", 6, &mut store, &mut rng);
    randomize(&mut store, &mut rng, 0.5);
    let z = normal_batch(&mut rng, 50, 6, 1.0);
    let (y, _) = b.forward(store.values(), z.view()).unwrap();
    let (back, _) = b.inverse(store.values(), z.view()).unwrap();
    for r in 0..50 {
        for c in 0..3 {
            assert_eq!(y[[r, c]], z[[r, c]]);
            assert_eq!(back[[r, c]], z[[r, c]]);
        }
    }
}

#[test]
fn extreme_scales_are_clamped() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = Maf::new(&mut store, "m", 1, &[4], &mut rng).unwrap();
    store.get_mut(m.net().output_layer().bias)[0] = 500.0;
    let b = Bijector::Maf(m);
    let (y, ld) = b.forward(store.values(), array![[1.0]].view()).unwrap();
    assert_relative_eq!(y[[0, 0]], SCALE_CLAMP.exp());
    assert_eq!(ld[0], SCALE_CLAMP);
}

#[test]
fn serde_round_trip_preserves_masks() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let b = build("arqs", 3, &mut store, &mut rng);
    let json = serde_json::to_string(&b).unwrap();
    let back: Bijector = serde_json::from_str(&json).unwrap();
    assert_eq!(back, b);
}
