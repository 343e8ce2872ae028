//! Non-parametric two-sample metrics: the 1-D Kolmogorov–Smirnov test,
//! the 1-D Wasserstein distance, and the normalized Frobenius distance
//! between correlation matrices.

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.sort_by(f64::total_cmp);
    out
}

/// Two-sample KS test: sup-norm ECDF gap and its asymptotic p-value with
/// effective size `nm/(n+m)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "KS test needs at least 2 points per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let statistic = ks_statistic_sorted(&sorted(a), &sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let en = n * m / (n + m);
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_sf(en.sqrt() * statistic),
    })
}

fn ks_statistic_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    best
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
///
/// Uses the alternating series for large `λ` and the Jacobi-transformed
/// series for small `λ`, where the former converges slowly; 20 terms each.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    const TERMS: i32 = 20;
    if !(lambda > 0.0) {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let c = -pi2 / (8.0 * lambda * lambda);
        let cdf: f64 = (1..=TERMS)
            .map(|k| {
                let odd = f64::from(2 * k - 1);
                (c * odd * odd).exp()
            })
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / lambda;
        1.0 - cdf
    } else {
        2.0 * (1..=TERMS)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * f64::from(k * k) * lambda * lambda).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

/// 1-D Wasserstein-1 distance: `∫ |F_a − F_b|`.
///
/// Equal sizes use the order-statistics form `(1/n) Σ |a_(i) − b_(i)|`.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Wasserstein distance needs non-empty samples".into()));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        let total: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / sa.len() as f64);
    }
    let (n, m) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / n - j as f64 / m).abs() * (x - prev);
        while i < sa.len() && sa[i] <= x {
            i += 1;
        }
        while j < sb.len() && sb[j] <= x {
            j += 1;
        }
        prev = x;
    }
    Ok(total)
}

/// Pearson correlation matrix of the columns of `x`, row-major.
pub fn correlation_matrix(x: ArrayView2<'_, f64>, which: &'static str) -> Result<Vec<Vec<f64>>> {
    let (m, d) = x.dim();
    if m < 2 {
        return Err(Error::Contract(format!("correlation needs at least 2 rows, got {m}")));
    }
    let means: Vec<f64> = (0..d).map(|j| x.column(j).sum() / m as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in x.rows() {
        for a in 0..d {
            let da = row[a] - means[a];
            for b in 0..=a {
                cov[a][b] += da * (row[b] - means[b]);
            }
        }
    }
    for (column, row) in cov.iter().enumerate() {
        if !(row[column] > 0.0) {
            return Err(Error::ZeroVariance { column, which });
        }
    }
    let mut corr = vec![vec![0.0; d]; d];
    for a in 0..d {
        corr[a][a] = 1.0;
        for b in 0..a {
            let r = cov[a][b] / (cov[a][a] * cov[b][b]).sqrt();
            corr[a][b] = r;
            corr[b][a] = r;
        }
    }
    Ok(corr)
}

/// `‖C_real − C_flow‖_F / ((D² − D)/2)` over the full matrices.
pub fn f_norm_corr(real: ArrayView2<'_, f64>, flow: ArrayView2<'_, f64>) -> Result<f64> {
    let d = real.ncols();
    if flow.ncols() != d {
        return Err(Error::shape("f_norm_corr", d, flow.ncols()));
    }
    if d < 2 {
        return Err(Error::Contract("F-norm needs at least 2 dimensions".into()));
    }
    let cr = correlation_matrix(real, "real")?;
    let cf = correlation_matrix(flow, "flow")?;
    let sq: f64 = cr
        .iter()
        .flatten()
        .zip(cf.iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq.sqrt() / ((d * d - d) as f64 / 2.0))
}

/// How the small-sample averaging is done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            n_batches: 10,
            batch_size: 10_000,
        }
    }
}

impl Protocol {
    pub fn rows_needed(&self) -> usize {
        self.n_batches * self.batch_size
    }

    fn check(&self, real: &ArrayView2<'_, f64>, flow: &ArrayView2<'_, f64>) -> Result<()> {
        if self.n_batches == 0 || self.batch_size == 0 {
            return Err(Error::Contract("protocol needs at least one non-empty batch".into()));
        }
        if real.ncols() != flow.ncols() {
            return Err(Error::shape("metric inputs", real.ncols(), flow.ncols()));
        }
        let need = self.rows_needed();
        if real.nrows() < need || flow.nrows() < need {
            return Err(Error::Contract(format!(
                "protocol needs {need} rows per set, got {} real and {} flow",
                real.nrows(),
                flow.nrows()
            )));
        }
        Ok(())
    }

    /// Apply `metric` to each batch pair of each dimension and average over
    /// batches.
    fn per_dim(
        &self,
        real: ArrayView2<'_, f64>,
        flow: ArrayView2<'_, f64>,
        metric: impl Fn(&[f64], &[f64]) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        self.check(&real, &flow)?;
        (0..real.ncols())
            .map(|j| {
                let mut total = 0.0;
                for b in 0..self.n_batches {
                    let rows = s![b * self.batch_size..(b + 1) * self.batch_size, j];
                    let a = real.slice(rows).to_vec();
                    let c = flow.slice(rows).to_vec();
                    total += metric(&a, &c)?;
                }
                Ok(total / self.n_batches as f64)
            })
            .collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let v = sorted(values);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSummary {
    pub per_dim: Vec<f64>,
    pub median: f64,
}

impl MedianSummary {
    fn new(per_dim: Vec<f64>) -> Self {
        let median = median(&per_dim);
        Self { per_dim, median }
    }
}

/// Batch-averaged KS p-value per dimension and its median over dimensions.
pub fn median_ks(real: ArrayView2<'_, f64>, flow: ArrayView2<'_, f64>, protocol: Protocol) -> Result<MedianSummary> {
    protocol
        .per_dim(real, flow, |a, b| Ok(ks_two_sample(a, b)?.p_value))
        .map(MedianSummary::new)
}

/// Batch-averaged W-distance per dimension and its median over dimensions.
pub fn median_w(real: ArrayView2<'_, f64>, flow: ArrayView2<'_, f64>, protocol: Protocol) -> Result<MedianSummary> {
    protocol.per_dim(real, flow, wasserstein_1d).map(MedianSummary::new)
}

/// Everything reported for one trained flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks_p_per_dim: Vec<f64>,
    pub ks_p_median: f64,
    pub w_per_dim: Vec<f64>,
    pub w_median: f64,
    /// W-distances divided by the target's per-dimension standard deviation.
    pub w_scaled_per_dim: Vec<f64>,
    pub w_scaled_median: f64,
    /// Absent for one-dimensional data.
    pub f_norm: Option<f64>,
    pub protocol: Protocol,
    /// What the flow samples were compared against.
    pub reference: String,
}

pub const HELD_OUT_REFERENCE: &str = "fresh held-out target draws";

/// Full report. `target_std` rescales the W-distances; its length must
/// match the dimension.
pub fn evaluate(
    real: ArrayView2<'_, f64>,
    flow: ArrayView2<'_, f64>,
    protocol: Protocol,
    target_std: &[f64],
) -> Result<MetricReport> {
    if target_std.len() != real.ncols() {
        return Err(Error::shape("target std", real.ncols(), target_std.len()));
    }
    let ks = median_ks(real, flow, protocol)?;
    let w = median_w(real, flow, protocol)?;
    let scaled = MedianSummary::new(w.per_dim.iter().zip(target_std).map(|(w, s)| w / s).collect());
    let f_norm = if real.ncols() >= 2 {
        let rows = s![..protocol.rows_needed(), ..];
        Some(f_norm_corr(real.slice(rows), flow.slice(rows))?)
    } else {
        None
    };
    Ok(MetricReport {
        ks_p_per_dim: ks.per_dim,
        ks_p_median: ks.median,
        w_per_dim: w.per_dim,
        w_median: w.median,
        w_scaled_per_dim: scaled.per_dim,
        w_scaled_median: scaled.median,
        f_norm,
        protocol,
        reference: HELD_OUT_REFERENCE.to_string(),
    })
}
