//! Base and toy target distributions.
//!
//! Every sampler is a pure function of `(spec, M, seed)`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `½ ln 2π`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Target,
    Flow,
}

/// `M × D` matrix of draws with the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub data: Array2<f64>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl SampleSet {
    pub fn new(data: Array2<f64>, provenance: Provenance, seed: u64) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Contract("a sample set needs at least one row".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite sample at row {}, column {}",
                pos / data.ncols(),
                pos % data.ncols()
            )));
        }
        Ok(Self { data, provenance, seed })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }
}

/// Standard normal on `R^D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StandardNormalBase {
    pub dim: usize,
}

impl StandardNormalBase {
    pub fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.iter().map(|v| -0.5 * v * v).sum::<f64>() - self.dim as f64 * HALF_LN_2PI
    }

    pub fn sample_array(&self, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_simple_fn((m, self.dim), || rng.sample(StandardNormal))
    }
}

/// Per-dimension mixture of three Gaussians; dimensions are independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MogSpec {
    pub means: Vec<[f64; 3]>,
    pub variances: Vec<[f64; 3]>,
    pub weights: Vec<[f64; 3]>,
    /// Seed the parameters were generated from, if any.
    pub generator_seed: Option<u64>,
}

impl MogSpec {
    pub fn new(means: Vec<[f64; 3]>, variances: Vec<[f64; 3]>, weights: Vec<[f64; 3]>) -> Result<Self> {
        let d = means.len();
        if d == 0 || variances.len() != d || weights.len() != d {
            return Err(Error::Contract(format!(
                "mixture needs matching non-empty per-dimension arrays, got {d}/{}/{}",
                variances.len(),
                weights.len()
            )));
        }
        for (j, (v, w)) in variances.iter().zip(&weights).enumerate() {
            if v.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Contract(format!("dimension {j}: variances must be positive")));
            }
            if w.iter().any(|&p| !(p > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("dimension {j}: weights must be positive and sum to 1")));
            }
        }
        Ok(Self {
            means,
            variances,
            weights,
            generator_seed: None,
        })
    }

    /// Random mixture: means uniform in `[-8, 8]`, standard deviations
    /// log-uniform in `[0.3, 1.5]`, Dirichlet(1, 1, 1) weights.
    pub fn generate(dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let (lo, hi) = (0.3f64.ln(), 1.5f64.ln());
        let mut means = Vec::with_capacity(dim);
        let mut variances = Vec::with_capacity(dim);
        let mut weights = Vec::with_capacity(dim);
        for _ in 0..dim {
            means.push(std::array::from_fn(|_| rng.random_range(-8.0..8.0)));
            variances.push(std::array::from_fn(|_| rng.random_range(lo..hi).exp().powi(2)));
            let e: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(Exp1).max(1e-12));
            let total: f64 = e.iter().sum();
            weights.push(e.map(|v| v / total));
        }
        Self {
            means,
            variances,
            weights,
            generator_seed: Some(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    pub fn sample(&self, m: usize, seed: u64) -> Result<SampleSet> {
        let mut rng = rng_from_seed(seed);
        let d = self.dim();
        let mut data = Array2::zeros((m, d));
        for r in 0..m {
            for j in 0..d {
                let u: f64 = rng.random();
                let w = &self.weights[j];
                let c = if u < w[0] {
                    0
                } else if u < w[0] + w[1] {
                    1
                } else {
                    2
                };
                let z: f64 = rng.sample(StandardNormal);
                data[[r, j]] = self.means[j][c] + self.variances[j][c].sqrt() * z;
            }
        }
        SampleSet::new(data, Provenance::Target, seed)
    }

    /// `Σ_d log Σ_c w_{d,c} N(x_d; μ_{d,c}, σ²_{d,c})` via log-sum-exp.
    pub fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut total = 0.0;
        for (j, &xj) in x.iter().enumerate() {
            let terms: [f64; 3] = std::array::from_fn(|c| {
                let var = self.variances[j][c];
                let diff = xj - self.means[j][c];
                self.weights[j][c].ln() - 0.5 * diff * diff / var - 0.5 * var.ln() - HALF_LN_2PI
            });
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            total += max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        }
        total
    }

    pub fn marginal_std(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let (w, mu, var) = (&self.weights[j], &self.means[j], &self.variances[j]);
                let mean: f64 = (0..3).map(|c| w[c] * mu[c]).sum();
                let second: f64 = (0..3).map(|c| w[c] * (var[c] + mu[c] * mu[c])).sum();
                (second - mean * mean).sqrt()
            })
            .collect()
    }
}

/// Correlation matrix from a rescaled random Gram matrix `AAᵀ`.
///
/// Retries with a fresh draw until the smallest eigenvalue exceeds `1e-6`.
pub fn random_correlation_matrix(dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    const ATTEMPTS: usize = 100;
    if dim < 2 {
        return Err(Error::Contract(format!("a random correlation matrix needs D >= 2, got {dim}")));
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..ATTEMPTS {
        let a = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        let gram = &a * a.transpose();
        let scale: Vec<f64> = (0..dim).map(|i| gram[(i, i)].sqrt()).collect();
        let mut c = DMatrix::from_fn(dim, dim, |i, j| gram[(i, j)] / (scale[i] * scale[j]));
        for i in 0..dim {
            c[(i, i)] = 1.0;
            for j in 0..i {
                let avg = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = avg;
                c[(j, i)] = avg;
            }
        }
        let min_eig = SymmetricEigen::new(c.clone()).eigenvalues.min();
        if min_eig > 1e-6 {
            return Ok(c);
        }
    }
    Err(Error::Generation { attempts: ATTEMPTS })
}

/// Correlated Gaussian with unit marginal variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgSpec {
    pub mean: Vec<f64>,
    /// Row-major `D × D` correlation matrix.
    pub corr: Vec<Vec<f64>>,
    /// Lower Cholesky factor of `corr`, row-major.
    pub chol: Vec<Vec<f64>>,
    pub generator_seed: Option<u64>,
}

impl CgSpec {
    pub fn new(mean: Vec<f64>, corr: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if corr.nrows() != d || corr.ncols() != d {
            return Err(Error::shape("correlation matrix", format!("{d} x {d}"), format!("{} x {}", corr.nrows(), corr.ncols())));
        }
        for i in 0..d {
            if (corr[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("correlation diagonal entry {i} is {}", corr[(i, i)])));
            }
            for j in 0..i {
                if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-12 {
                    return Err(Error::Contract(format!("correlation matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        let chol = nalgebra::Cholesky::new(corr.clone())
            .ok_or_else(|| Error::Contract("correlation matrix is not positive definite".into()))?
            .l();
        let rows = |m: &DMatrix<f64>| (0..d).map(|i| m.row(i).iter().copied().collect()).collect();
        Ok(Self {
            mean,
            corr: rows(corr),
            chol: rows(&chol),
            generator_seed: None,
        })
    }

    /// Means uniform in `[-3, 3]`, correlation from
    /// [`random_correlation_matrix`], both drawn from `seed`.
    pub fn generate(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mean = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let corr = random_correlation_matrix(dim, rng.random())?;
        let mut spec = Self::new(mean, &corr)?;
        spec.generator_seed = Some(seed);
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn corr_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.corr[i][j])
    }

    pub fn sample(&self, m: usize, seed: u64) -> Result<SampleSet> {
        let d = self.dim();
        let eps = StandardNormalBase { dim: d }.sample_array(m, seed);
        let mut data = Array2::zeros((m, d));
        for r in 0..m {
            for i in 0..d {
                let mut acc = self.mean[i];
                for k in 0..=i {
                    acc += self.chol[i][k] * eps[[r, k]];
                }
                data[[r, i]] = acc;
            }
        }
        SampleSet::new(data, Provenance::Target, seed)
    }

    /// Multivariate normal log-density through the Cholesky factor.
    pub fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64 {
        let d = self.dim();
        // forward substitution: L u = x − μ
        let mut u = vec![0.0; d];
        let mut quad = 0.0;
        let mut log_det_half = 0.0;
        for i in 0..d {
            let mut acc = x[i] - self.mean[i];
            for k in 0..i {
                acc -= self.chol[i][k] * u[k];
            }
            u[i] = acc / self.chol[i][i];
            quad += u[i] * u[i];
            log_det_half += self.chol[i][i].ln();
        }
        -0.5 * quad - log_det_half - d as f64 * HALF_LN_2PI
    }
}

/// Any analytic distribution a flow can be trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TargetSpec {
    Mog(MogSpec),
    Cg(CgSpec),
    /// The base distribution itself; nothing to learn.
    Normal { dim: usize },
}

impl TargetSpec {
    pub fn dim(&self) -> usize {
        match self {
            TargetSpec::Mog(s) => s.dim(),
            TargetSpec::Cg(s) => s.dim(),
            TargetSpec::Normal { dim } => *dim,
        }
    }

    pub fn sample(&self, m: usize, seed: u64) -> Result<SampleSet> {
        match self {
            TargetSpec::Mog(s) => s.sample(m, seed),
            TargetSpec::Cg(s) => s.sample(m, seed),
            TargetSpec::Normal { dim } => {
                SampleSet::new(StandardNormalBase { dim: *dim }.sample_array(m, seed), Provenance::Target, seed)
            }
        }
    }

    pub fn log_prob(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self {
            TargetSpec::Mog(s) => s.log_prob(x),
            TargetSpec::Cg(s) => s.log_prob(x),
            TargetSpec::Normal { dim } => StandardNormalBase { dim: *dim }.log_prob(x),
        }
    }

    /// Analytic per-dimension standard deviation.
    pub fn marginal_std(&self) -> Vec<f64> {
        match self {
            TargetSpec::Mog(s) => s.marginal_std(),
            TargetSpec::Cg(s) => vec![1.0; s.dim()],
            TargetSpec::Normal { dim } => vec![1.0; *dim],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}


#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    use super::*;

    fn column_mean_var(data: &Array2<f64>, j: usize) -> (f64, f64) {
        let col = data.column(j);
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    fn pearson(data: &Array2<f64>, a: usize, b: usize) -> f64 {
        let (ma, va) = column_mean_var(data, a);
        let (mb, vb) = column_mean_var(data, b);
        let n = data.nrows() as f64;
        let cov = data
            .rows()
            .into_iter()
            .map(|r| (r[a] - ma) * (r[b] - mb))
            .sum::<f64>()
            / (n - 1.0);
        cov / (va * vb).sqrt()
    }

    #[test]
    fn degenerate_mixture_is_one_gaussian() {
        let spec = MogSpec::new(vec![[1.5; 3]], vec![[4.0; 3]], vec![[0.2, 0.3, 0.5]]).unwrap();
        let m = 1_000_000;
        let s = spec.sample(m, 3).unwrap();
        let (mean, var) = column_mean_var(&s.data, 0);
        let n = m as f64;
        assert!((mean - 1.5).abs() < 4.0 * (4.0 / n).sqrt());
        // Var of the sample variance for a Gaussian is 2σ⁴/(n−1).
        assert!((var - 4.0).abs() < 4.0 * (2.0 * 16.0 / n).sqrt());
    }

    #[test]
    fn separated_modes_get_their_weights() {
        let w = [0.2, 0.5, 0.3];
        let spec = MogSpec::new(vec![[-5.0, 0.0, 5.0]], vec![[0.01; 3]], vec![w]).unwrap();
        let m = 100_000;
        let s = spec.sample(m, 4).unwrap();
        let mut counts = [0usize; 3];
        for &v in s.data.column(0) {
            let c = if v < -2.5 {
                0
            } else if v < 2.5 {
                1
            } else {
                2
            };
            assert!((v - [-5.0, 0.0, 5.0][c]).abs() < 1.0, "draw {v} between modes");
            counts[c] += 1;
        }
        for c in 0..3 {
            let frac = counts[c] as f64 / m as f64;
            let sigma = (w[c] * (1.0 - w[c]) / m as f64).sqrt();
            assert!((frac - w[c]).abs() < 3.0 * sigma, "mode {c}: {frac} vs {}", w[c]);
        }
    }

    #[test]
    fn samplers_are_deterministic() {
        let mog = MogSpec::generate(3, 9);
        assert_eq!(mog, MogSpec::generate(3, 9));
        assert_eq!(mog.sample(100, 1).unwrap(), mog.sample(100, 1).unwrap());
        assert_ne!(mog.sample(100, 1).unwrap().data, mog.sample(100, 2).unwrap().data);
        let cg = CgSpec::generate(4, 9).unwrap();
        assert_eq!(cg.sample(100, 5).unwrap(), cg.sample(100, 5).unwrap());
    }

    #[test]
    fn generated_mixture_fits_in_spline_box() {
        for seed in 0..20 {
            let spec = MogSpec::generate(8, seed);
            for j in 0..8 {
                for c in 0..3 {
                    let reach = spec.means[j][c].abs() + 2.0 * spec.variances[j][c].sqrt();
                    assert!(reach < 12.0);
                }
                assert_relative_eq!(spec.weights[j].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mixture_log_prob_closed_forms() {
        let d = 3;
        let spec = MogSpec::new(vec![[0.5; 3]; d], vec![[1.0; 3]; d], vec![[0.1, 0.2, 0.7]; d]).unwrap();
        let at_mean = Array1::from_elem(d, 0.5);
        assert_relative_eq!(spec.log_prob(at_mean.view()), -(d as f64) * HALF_LN_2PI, epsilon = 1e-12);

        let sym = MogSpec::new(vec![[-1.0, 1.0, 1.0]], vec![[1.0; 3]], vec![[0.5, 0.25, 0.25]]).unwrap();
        let expected = ((-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_relative_eq!(sym.log_prob(array![0.0].view()), expected, epsilon = 1e-12);
    }

    fn integrate_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        // composite Simpson, n even
        let h = (hi - lo) / n as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn densities_integrate_to_one() {
        let mog = MogSpec::generate(1, 21);
        let total = integrate_1d(|x| mog.log_prob(array![x].view()).exp(), -20.0, 20.0, 20_000);
        assert!((total - 1.0).abs() < 1e-4, "{total}");

        let cg = CgSpec::generate(2, 22).unwrap();
        let (n, lo, hi) = (600, -9.0, 9.0);
        let h = (hi - lo) / n as f64;
        let inner = |x: f64| {
            integrate_1d(|y| cg.log_prob(array![x, y].view()).exp(), lo, hi, n)
        };
        let total = integrate_1d(inner, lo, hi, n);
        assert!((total - 1.0).abs() < 1e-4, "{total} (h = {h})");
    }

    #[test]
    fn correlation_matrix_edge_cases() {
        assert!(random_correlation_matrix(1, 0).is_err());
        let c = random_correlation_matrix(2, 5).unwrap();
        assert!(c[(0, 1)].abs() < 1.0);
        assert_eq!(c, random_correlation_matrix(2, 5).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn correlation_matrices_are_valid(dim in 2usize..12, seed in any::<u64>()) {
            let c = random_correlation_matrix(dim, seed).unwrap();
            for i in 0..dim {
                prop_assert_eq!(c[(i, i)], 1.0);
                for j in 0..dim {
                    prop_assert_eq!(c[(i, j)], c[(j, i)]);
                }
            }
            prop_assert!(SymmetricEigen::new(c.clone()).eigenvalues.min() > 0.0);
            let spec = CgSpec::new(vec![0.0; dim], &c).unwrap();
            let l = DMatrix::from_fn(dim, dim, |i, j| spec.chol[i][j]);
            let err = (&l * l.transpose() - &c).abs().max();
            prop_assert!(err < 1e-10);
        }
    }

    #[test]
    fn identity_correlation_is_uncorrelated() {
        let spec = CgSpec::new(vec![0.0; 3], &DMatrix::identity(3, 3)).unwrap();
        let m = 50_000;
        let s = spec.sample(m, 1).unwrap();
        let bound = 4.0 / (m as f64).sqrt();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            assert!(pearson(&s.data, a, b).abs() < bound);
        }
    }

    #[test]
    fn empirical_correlation_matches() {
        let spec = CgSpec::generate(4, 31).unwrap();
        let s = spec.sample(1_000_000, 2).unwrap();
        for a in 0..4 {
            for b in 0..a {
                let r = pearson(&s.data, a, b);
                assert!((r - spec.corr[a][b]).abs() < 0.01, "({a},{b}): {r} vs {}", spec.corr[a][b]);
            }
        }
    }

    #[test]
    fn cg_log_prob_at_mean() {
        let spec = CgSpec::generate(5, 41).unwrap();
        let det = spec.corr_matrix().determinant();
        let expected = -0.5 * ((2.0 * std::f64::consts::PI).powi(5) * det).ln();
        let x = Array1::from(spec.mean.clone());
        assert_relative_eq!(spec.log_prob(x.view()), expected, epsilon = 1e-10);
    }

    #[test]
    fn cg_rejects_invalid_matrices() {
        let mut c = DMatrix::identity(2, 2);
        c[(0, 1)] = 0.3;
        assert!(CgSpec::new(vec![0.0; 2], &c).is_err());
        c[(1, 0)] = 0.3;
        c[(0, 0)] = 2.0;
        assert!(CgSpec::new(vec![0.0; 2], &c).is_err());
        let mut singular = DMatrix::from_element(2, 2, 1.0);
        singular[(0, 1)] = 1.0;
        assert!(CgSpec::new(vec![0.0; 2], &singular).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.json");
        for spec in [TargetSpec::Mog(MogSpec::generate(3, 1)), TargetSpec::Cg(CgSpec::generate(3, 2).unwrap())] {
            spec.save(&path).unwrap();
            assert_eq!(TargetSpec::load(&path).unwrap(), spec);
        }
    }

    #[test]
    fn sample_sets_reject_bad_data() {
        assert!(SampleSet::new(Array2::zeros((0, 2)), Provenance::Target, 0).is_err());
        assert!(SampleSet::new(array![[1.0, f64::NAN]], Provenance::Flow, 0).is_err());
    }
}
