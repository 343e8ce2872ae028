//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.

use ndarray::Array2;

use crate::nn::CustomOp;
use crate::{Error, Result};

/// Smallest derivative a decoded internal knot can take.
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Fraction of a uniform bin (`2B/K`) that every decoded bin keeps at least.
pub const MIN_BIN_FRACTION: f64 = 1e-3;

/// Number of raw conditioner outputs needed per dimension: `K` widths,
/// `K` heights and `K − 1` internal derivatives.
pub fn raw_len(bins: usize) -> usize {
    3 * bins - 1
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shift so that a zero raw derivative decodes to exactly 1.
fn derivative_shift() -> f64 {
    (1.0 - MIN_DERIVATIVE).exp_m1().ln()
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Knots and derivatives of one spline.
#[derive(Debug, Clone, PartialEq)]
pub struct RqsParams {
    bound: f64,
    xs: Vec<f64>,
    ys: Vec<f64>,
    derivs: Vec<f64>,
}

impl RqsParams {
    /// Build from explicit knots. `xs` and `ys` hold all `K + 1` knots,
    /// `internal_derivs` the `K − 1` derivatives at the interior ones.
    pub fn new(bound: f64, xs: Vec<f64>, ys: Vec<f64>, internal_derivs: &[f64]) -> Result<Self> {
        let k = xs.len().saturating_sub(1);
        if k == 0 || ys.len() != k + 1 || internal_derivs.len() != k - 1 {
            return Err(Error::Contract(format!(
                "spline needs K+1 knots per axis and K-1 derivatives, got {} / {} / {}",
                xs.len(),
                ys.len(),
                internal_derivs.len()
            )));
        }
        if !(bound > 0.0) {
            return Err(Error::Contract(format!("spline bound must be positive, got {bound}")));
        }
        for (axis, knots) in [("x", &xs), ("y", &ys)] {
            if knots[0] != -bound || knots[k] != bound {
                return Err(Error::Contract(format!("{axis} knots must run from -B to B")));
            }
            if knots.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Contract(format!("{axis} knots must be strictly increasing")));
            }
        }
        if internal_derivs.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Contract("knot derivatives must be positive".into()));
        }
        let mut derivs = Vec::with_capacity(k + 1);
        derivs.push(1.0);
        derivs.extend_from_slice(internal_derivs);
        derivs.push(1.0);
        Ok(Self { bound, xs, ys, derivs })
    }

    /// Map unconstrained conditioner outputs to a valid spline. Total: any
    /// finite `raw` produces strictly increasing knots and positive
    /// derivatives.
    pub fn decode(raw: &[f64], bins: usize, bound: f64) -> Self {
        assert_eq!(raw.len(), raw_len(bins), "raw spline parameter length");
        let xs = knots_from_raw(&raw[..bins], bound);
        let ys = knots_from_raw(&raw[bins..2 * bins], bound);
        let shift = derivative_shift();
        let mut derivs = Vec::with_capacity(bins + 1);
        derivs.push(1.0);
        derivs.extend(raw[2 * bins..].iter().map(|&r| MIN_DERIVATIVE + softplus(r + shift)));
        derivs.push(1.0);
        Self { bound, xs, ys, derivs }
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn x_knots(&self) -> &[f64] {
        &self.xs
    }

    pub fn y_knots(&self) -> &[f64] {
        &self.ys
    }

    /// All `K + 1` knot derivatives, boundary ones included.
    pub fn derivatives(&self) -> &[f64] {
        &self.derivs
    }

    fn bin_of(knots: &[f64], v: f64) -> usize {
        let k = knots.len() - 1;
        knots[1..k].partition_point(|&kn| kn <= v)
    }

    /// `(y, dy/dx)`; identity with unit slope for `|x| ≥ B`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        if x.abs() >= self.bound || x.is_nan() {
            return (x, 1.0);
        }
        let k = Self::bin_of(&self.xs, x);
        let local = self.local(k);
        let xi = (x - local.xk) / local.w;
        (local.value(xi), local.derivative(xi))
    }

    pub fn invert(&self, y: f64) -> Result<f64> {
        if y.abs() >= self.bound || y.is_nan() {
            return Ok(y);
        }
        let k = Self::bin_of(&self.ys, y);
        let l = self.local(k);
        let dy = y - l.yk;
        let curv = l.d0 + l.d1 - 2.0 * l.s;
        let a = l.h * (l.s - l.d0) + dy * curv;
        let b = l.h * l.d0 - dy * curv;
        let c = -l.s * dy;
        let disc = b * b - 4.0 * a * c;
        if !(disc >= 0.0) {
            return Err(Error::Numeric(format!("spline inversion: negative discriminant {disc} in bin {k}")));
        }
        let xi = (2.0 * c) / (-b - disc.sqrt());
        // Tolerate rounding at the bin edges only.
        if !(-1e-9..=1.0 + 1e-9).contains(&xi) {
            return Err(Error::Numeric(format!("spline inversion: root {xi} outside [0, 1] in bin {k}")));
        }
        Ok(l.xk + xi.clamp(0.0, 1.0) * l.w)
    }

    fn local(&self, k: usize) -> Bin {
        let w = self.xs[k + 1] - self.xs[k];
        let h = self.ys[k + 1] - self.ys[k];
        Bin {
            xk: self.xs[k],
            w,
            yk: self.ys[k],
            h,
            s: h / w,
            d0: self.derivs[k],
            d1: self.derivs[k + 1],
        }
    }
}

fn knots_from_raw(raw: &[f64], bound: f64) -> Vec<f64> {
    let bins = raw.len();
    let min = MIN_BIN_FRACTION * 2.0 * bound / bins as f64;
    let free = 2.0 * bound - bins as f64 * min;
    let probs = softmax(raw);
    let mut knots = Vec::with_capacity(bins + 1);
    knots.push(-bound);
    let mut acc = -bound;
    for p in &probs[..bins - 1] {
        acc += min + free * p;
        knots.push(acc);
    }
    knots.push(bound);
    knots
}

/// One bin in local coordinates.
#[derive(Debug, Clone, Copy)]
struct Bin {
    xk: f64,
    w: f64,
    yk: f64,
    h: f64,
    s: f64,
    d0: f64,
    d1: f64,
}

impl Bin {
    fn value(&self, xi: f64) -> f64 {
        let t = xi * (1.0 - xi);
        let num = self.h * (self.s * xi * xi + self.d0 * t);
        let den = self.s + (self.d0 + self.d1 - 2.0 * self.s) * t;
        self.yk + num / den
    }

    fn derivative(&self, xi: f64) -> f64 {
        let t = xi * (1.0 - xi);
        let den = self.s + (self.d0 + self.d1 - 2.0 * self.s) * t;
        let g = self.d1 * xi * xi + 2.0 * self.s * t + self.d0 * (1.0 - xi) * (1.0 - xi);
        self.s * self.s * g / (den * den)
    }
}

/// `(y, log dy/dx)` of the spline decoded from `raw`.
pub fn spline_forward(raw: &[f64], x: f64, bins: usize, bound: f64) -> (f64, f64) {
    let (y, d) = RqsParams::decode(raw, bins, bound).eval(x);
    (y, d.ln())
}

/// Adjoint of [`spline_forward`] for output adjoints `(gy, gl)`: adds
/// `∂/∂raw` into `raw_grad` and returns `∂/∂x`.
pub fn spline_backward(raw: &[f64], x: f64, bins: usize, bound: f64, gy: f64, gl: f64, raw_grad: &mut [f64]) -> f64 {
    if x.abs() >= bound {
        return gy;
    }
    let params = RqsParams::decode(raw, bins, bound);
    let k = RqsParams::bin_of(&params.xs, x);
    let b = params.local(k);

    let xi = (x - b.xk) / b.w;
    let t = xi * (1.0 - xi);
    let curv = b.d0 + b.d1 - 2.0 * b.s;
    let num = b.s * xi * xi + b.d0 * t;
    let den = b.s + curv * t;
    let r = num / den;
    let g = b.d1 * xi * xi + 2.0 * b.s * t + b.d0 * (1.0 - xi) * (1.0 - xi);
    let dt = 1.0 - 2.0 * xi;

    // partials of r = num/den
    let num_xi = 2.0 * b.s * xi + b.d0 * dt;
    let den_xi = curv * dt;
    let r_xi = (num_xi - r * den_xi) / den;
    let r_s = (xi * xi - r * (1.0 - 2.0 * t)) / den;
    let r_d0 = (t - r * t) / den;
    let r_d1 = (-r * t) / den;

    // partials of log dy/dx = 2 ln s + ln g − 2 ln den
    let l_xi = (2.0 * b.d1 * xi + 2.0 * b.s * dt - 2.0 * b.d0 * (1.0 - xi)) / g - 2.0 * den_xi / den;
    let l_s = 2.0 / b.s + 2.0 * t / g - 2.0 * (1.0 - 2.0 * t) / den;
    let l_d0 = (1.0 - xi) * (1.0 - xi) / g - 2.0 * t / den;
    let l_d1 = xi * xi / g - 2.0 * t / den;

    let g_xi = gy * b.h * r_xi + gl * l_xi;
    let g_s = gy * b.h * r_s + gl * l_s;
    let g_d0 = gy * b.h * r_d0 + gl * l_d0;
    let g_d1 = gy * b.h * r_d1 + gl * l_d1;
    let g_h = gy * r + g_s / b.w;
    let g_w = -g_xi * xi / b.w - g_s * b.s / b.w;
    let g_xk = -g_xi / b.w;
    let g_yk = gy;
    let g_x = g_xi / b.w;

    // knot adjoints; bin width and height are differences of adjacent knots
    let mut xs_bar = vec![0.0; bins + 1];
    let mut ys_bar = vec![0.0; bins + 1];
    xs_bar[k] += g_xk - g_w;
    xs_bar[k + 1] += g_w;
    ys_bar[k] += g_yk - g_h;
    ys_bar[k + 1] += g_h;

    knots_backward(&raw[..bins], bound, &xs_bar, &mut raw_grad[..bins]);
    knots_backward(&raw[bins..2 * bins], bound, &ys_bar, &mut raw_grad[bins..2 * bins]);

    let shift = derivative_shift();
    for (idx, gd) in [(k, g_d0), (k + 1, g_d1)] {
        if idx >= 1 && idx < bins {
            let ri = 2 * bins + idx - 1;
            raw_grad[ri] += gd * sigmoid(raw[ri] + shift);
        }
    }
    g_x
}

/// Pull knot adjoints back through cumulative sums and the softmax.
fn knots_backward(raw: &[f64], bound: f64, knots_bar: &[f64], raw_grad: &mut [f64]) {
    let bins = raw.len();
    let min = MIN_BIN_FRACTION * 2.0 * bound / bins as f64;
    let free = 2.0 * bound - bins as f64 * min;
    // knot k (0 < k < K) is −B + Σ_{i<k} width_i; the end knots are fixed
    let mut width_bar = vec![0.0; bins];
    let mut suffix = 0.0;
    for i in (0..bins - 1).rev() {
        suffix += knots_bar[i + 1];
        width_bar[i] = suffix;
    }
    let probs = softmax(raw);
    let p_bar: Vec<f64> = width_bar.iter().map(|w| free * w).collect();
    let dot: f64 = probs.iter().zip(&p_bar).map(|(p, b)| p * b).sum();
    for i in 0..bins {
        raw_grad[i] += probs[i] * (p_bar[i] - dot);
    }
}

/// Batched spline op for the tape: inputs `raw: n × D(3K−1)` and
/// `x: n × D`, output `n × 2D` holding `y` then `log dy/dx`.
#[derive(Debug, Clone, Copy)]
pub struct SplineOp {
    pub dim: usize,
    pub bins: usize,
    pub bound: f64,
}

impl SplineOp {
    pub fn forward(&self, raw: &Array2<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
        let per = raw_len(self.bins);
        if x.ncols() != self.dim || raw.ncols() != self.dim * per || raw.nrows() != x.nrows() {
            return Err(Error::shape(
                "spline op",
                format!("raw n x {} and x n x {}", self.dim * per, self.dim),
                format!("{:?} and {:?}", raw.dim(), x.dim()),
            ));
        }
        let mut out = Array2::zeros((x.nrows(), 2 * self.dim));
        for r in 0..x.nrows() {
            let raw_row = raw.row(r);
            let raw_row = raw_row.as_slice().expect("standard layout");
            for j in 0..self.dim {
                let (y, ld) = spline_forward(&raw_row[j * per..(j + 1) * per], x[[r, j]], self.bins, self.bound);
                out[[r, j]] = y;
                out[[r, self.dim + j]] = ld;
            }
        }
        Ok(out)
    }
}

impl CustomOp for SplineOp {
    fn name(&self) -> &'static str {
        "rq_spline"
    }

    fn backward(&self, inputs: &[&Array2<f64>], _output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>> {
        let (raw, x) = (inputs[0], inputs[1]);
        let per = raw_len(self.bins);
        let mut raw_grad = Array2::zeros(raw.dim());
        let mut x_grad = Array2::zeros(x.dim());
        for r in 0..x.nrows() {
            let raw_row = raw.row(r);
            let raw_row = raw_row.as_slice().expect("standard layout");
            let mut grow = raw_grad.row_mut(r);
            let grow = grow.as_slice_mut().expect("standard layout");
            for j in 0..self.dim {
                let span = j * per..(j + 1) * per;
                x_grad[[r, j]] = spline_backward(
                    &raw_row[span.clone()],
                    x[[r, j]],
                    self.bins,
                    self.bound,
                    grad[[r, j]],
                    grad[[r, self.dim + j]],
                    &mut grow[span],
                );
            }
        }
        vec![raw_grad, x_grad]
    }
}
