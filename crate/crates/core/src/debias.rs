//! One-step debiasing of an iterate and the diagnostics for its error terms.
//!
//! For an iterate `x^k` the debiased estimate is
//! `x_u = x^k + (1/m) Aᵀ(b − A x^k)`. Its scaled error splits as
//! `√m (x_u − x*) = W + R` with the Gaussian term `W = Aᵀε/√m` and the
//! remainder `R = √m (I − Σ̂)(x^k − x*)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::measurement::{sample_covariance, MeasurementMatrix};

/// Support threshold for `x^k − x*` when counting `|supp|`.
pub const SUPPORT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DebiasedEstimate {
    pub x_u: Array1<f64>,
    /// Index of the iterate that was debiased.
    pub k: usize,
    pub sigma_used: f64,
    /// Diagonal of `Σ̂ = AᵀA/m`.
    pub cov_diag: Array1<f64>,
    pub m: usize,
}

/// `x_u = x_k + (1/m) Aᵀ(b − A x_k)`.
pub fn debias(
    x_k: ArrayView1<'_, f64>,
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
) -> DebiasedEstimate {
    debias_with(x_k, a, b, 0, 0.0, sample_covariance(a, false).diagonal)
}

/// [`debias`] with a precomputed covariance diagonal and bookkeeping fields.
pub fn debias_with(
    x_k: ArrayView1<'_, f64>,
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
    k: usize,
    sigma: f64,
    cov_diag: Array1<f64>,
) -> DebiasedEstimate {
    let m = a.rows();
    let r = &b - &a.apply(x_k);
    let x_u = &x_k + &(a.apply_t(r.view()) / m as f64);
    DebiasedEstimate {
        x_u,
        k,
        sigma_used: sigma,
        cov_diag,
        m,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub w_term: Array1<f64>,
    pub r_term: Array1<f64>,
}

/// Splits `√m (x_u − x*)` given the true noise. `x_k` is accepted for
/// symmetry with the remainder formula; the split itself is definitional.
pub fn decompose(
    x_u: ArrayView1<'_, f64>,
    _x_k: ArrayView1<'_, f64>,
    x_star: ArrayView1<'_, f64>,
    a: &MeasurementMatrix,
    eps: ArrayView1<'_, f64>,
) -> Decomposition {
    let sqrt_m = (a.rows() as f64).sqrt();
    let w_term = a.apply_t(eps) / sqrt_m;
    let r_term = (&x_u - &x_star) * sqrt_m - &w_term;
    Decomposition { w_term, r_term }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderDiag {
    pub r_inf: f64,
    /// `4 K √(log N) ‖x^k − x*‖₂`
    pub threshold: f64,
    pub exceeded: bool,
    /// `2N exp(−1 / (1/(2 log N) + √(Cs) / (3 √(m log N))))`
    pub tail_bound: f64,
    pub cs: f64,
}

/// Remainder exceedance check. `cs` defaults to `|supp(x^k − x*)|`.
pub fn remainder_diag(
    r_term: ArrayView1<'_, f64>,
    x_k: ArrayView1<'_, f64>,
    x_star: ArrayView1<'_, f64>,
    k_bound: f64,
    n: usize,
    m: usize,
    cs: Option<f64>,
) -> RemainderDiag {
    let err = &x_k - &x_star;
    let err_norm = err.dot(&err).sqrt();
    let log_n = (n as f64).ln();
    let r_inf = r_term.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let threshold = 4.0 * k_bound * log_n.sqrt() * err_norm;
    let cs = cs.unwrap_or_else(|| err.iter().filter(|v| v.abs() > SUPPORT_TOL).count() as f64);
    RemainderDiag {
        r_inf,
        threshold,
        exceeded: r_inf >= threshold && r_inf > 0.0,
        tail_bound: tail_bound(n, m, cs),
        cs,
    }
}

/// Tail probability bound for the remainder; with `cs = 0` it is `2/N`.
pub fn tail_bound(n: usize, m: usize, cs: f64) -> f64 {
    let log_n = (n as f64).ln();
    let denom = 1.0 / (2.0 * log_n) + cs.sqrt() / (3.0 * (m as f64 * log_n).sqrt());
    2.0 * n as f64 * (-1.0 / denom).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProjectionDiag {
    /// `C_W = max_j ‖W_j‖₂` over columns.
    pub c_w: f64,
    /// `C_W σ √(6 log N)`
    pub theta0: f64,
    /// `max_j |⟨ε, W_j⟩|`
    pub statistic: f64,
    pub exceeded: bool,
}

pub fn theta0(c_w: f64, sigma: f64, n: usize) -> f64 {
    c_w * sigma * (6.0 * (n as f64).ln()).sqrt()
}

pub fn column_norm_max(w: &Array2<f64>) -> f64 {
    w.axis_iter(Axis(1))
        .map(|c| c.dot(&c).sqrt())
        .fold(0.0, f64::max)
}

/// Largest noise projection onto a column of `w_k` against `θ₀`.
pub fn theta0_diag(eps: ArrayView1<'_, f64>, w_k: &Array2<f64>, sigma: f64) -> NoiseProjectionDiag {
    let c_w = column_norm_max(w_k);
    theta0_diag_with(eps, w_k, sigma, c_w)
}

/// [`theta0_diag`] with a precomputed `C_W`.
pub fn theta0_diag_with(
    eps: ArrayView1<'_, f64>,
    w_k: &Array2<f64>,
    sigma: f64,
    c_w: f64,
) -> NoiseProjectionDiag {
    let theta0 = theta0(c_w, sigma, w_k.ncols());
    let statistic = w_k
        .t()
        .dot(&eps)
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    NoiseProjectionDiag {
        c_w,
        theta0,
        statistic,
        exceeded: statistic >= theta0 && statistic > 0.0,
    }
}

/// Inputs of the per-iteration `ℓ₂` error bound
/// `s B e^{−ck} + C̃ C_W σ √(6 log N)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundParams {
    pub s: f64,
    pub b: f64,
    pub c: f64,
    pub c_tilde: f64,
    pub c_w: f64,
    pub sigma: f64,
    pub n: usize,
}

pub fn l2_error_bound_eval(p: &ErrorBoundParams, k: f64) -> f64 {
    p.s * p.b * (-p.c * k).exp() + p.c_tilde * theta0(p.c_w, p.sigma, p.n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundFit {
    pub c: f64,
    pub c_tilde: f64,
    /// Coefficient of determination on the log scale.
    pub r_squared: f64,
}

/// Least-squares fit of `(c, C̃)` to observed per-iteration errors
/// `errors[i]` at iteration `k = i + 1`, on the log scale. `s`, `B`, `C_W`,
/// `σ` and `N` are taken as given in `base`.
pub fn fit_error_bound(base: &ErrorBoundParams, errors: &[f64]) -> Option<BoundFit> {
    let obs: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0 && e.is_finite())
        .map(|(i, e)| ((i + 1) as f64, e.ln()))
        .collect();
    if obs.len() < 2 || !(base.s * base.b > 0.0) {
        return None;
    }
    let floor_unit = theta0(base.c_w, base.sigma, base.n);
    let sse = |c: f64, log_ct: f64| -> f64 {
        let p = ErrorBoundParams {
            c,
            c_tilde: if floor_unit > 0.0 { log_ct.exp() } else { 0.0 },
            ..*base
        };
        obs.iter()
            .map(|&(k, le)| {
                let d = l2_error_bound_eval(&p, k).ln() - le;
                d * d
            })
            .sum()
    };

    // coarse grid, then coordinate-wise golden-section refinement
    let log_ct_center = if floor_unit > 0.0 {
        let min_err = obs.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
        min_err - floor_unit.ln()
    } else {
        0.0
    };
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=80 {
        let c = 10f64.powf(-3.0 + 4.0 * i as f64 / 80.0);
        for j in 0..=60 {
            let lct = log_ct_center - 12.0 + 15.0 * j as f64 / 60.0;
            let v = sse(c, lct);
            if v < best.0 {
                best = (v, c, lct);
            }
        }
    }
    let (_, mut c, mut lct) = best;
    for _ in 0..30 {
        let lc = golden(|x| sse(x.exp(), lct), c.ln() - 0.5, c.ln() + 0.5);
        c = lc.exp();
        lct = golden(|x| sse(c, x), lct - 1.0, lct + 1.0);
    }
    let mean = obs.iter().map(|o| o.1).sum::<f64>() / obs.len() as f64;
    let sst: f64 = obs.iter().map(|o| (o.1 - mean).powi(2)).sum();
    let resid = sse(c, lct);
    let r_squared = if sst > 0.0 { 1.0 - resid / sst } else { 1.0 };
    Some(BoundFit {
        c,
        c_tilde: if floor_unit > 0.0 { lct.exp() } else { 0.0 },
        r_squared,
    })
}

fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}
