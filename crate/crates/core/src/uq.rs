//! Confidence intervals around a debiased estimate, hitrates, and Q-Q data.

use std::f64::consts::{PI, SQRT_2};

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::datagen::SparseSignal;
use crate::debias::DebiasedEstimate;
use crate::measurement::MeasurementMatrix;
use crate::{Error, Result};

/// `Φ(x)` through the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

// Acklam's rational approximation, relative error 1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];
const P_LOW: f64 = 0.02425;

fn acklam_lower(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!(
            "quantile needs p in (0, 1), got {p}"
        )));
    }
    if p > 0.5 {
        // 1 − p is exact on [0.5, 1)
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let x = acklam_lower(p);
    // one Newton step on Φ(x) − p
    let e = std_normal_cdf(x) - p;
    x - e * (2.0 * PI).sqrt() * (0.5 * x * x).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceIntervals {
    pub center: Array1<f64>,
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
    pub radius: Array1<f64>,
    pub alpha: f64,
}

/// `J_i = [x_u,i − δ_i, x_u,i + δ_i]` with
/// `δ_i = σ̂ √Σ̂_ii / √m · Φ⁻¹(1 − α/2)`.
///
/// `sigma_hat = 0` is accepted and yields point intervals.
pub fn confidence_intervals(
    est: &DebiasedEstimate,
    alpha: f64,
    sigma_hat: f64,
) -> Result<ConfidenceIntervals> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(sigma_hat >= 0.0) || !sigma_hat.is_finite() {
        return Err(Error::param(format!(
            "noise level must be finite and nonnegative, got {sigma_hat}"
        )));
    }
    let z = std_normal_quantile(1.0 - alpha / 2.0)?;
    let scale = sigma_hat / (est.m as f64).sqrt() * z;
    let radius = est.cov_diag.mapv(|d| scale * d.max(0.0).sqrt());
    Ok(ConfidenceIntervals {
        lo: &est.x_u - &radius,
        hi: &est.x_u + &radius,
        center: est.x_u.clone(),
        radius,
        alpha,
    })
}

impl ConfidenceIntervals {
    /// Closed-interval containment of `value` in `J_i`.
    pub fn contains(&self, i: usize, value: f64) -> bool {
        self.lo[i] <= value && value <= self.hi[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitrateReport {
    pub h: f64,
    /// `None` when the support is empty.
    pub h_s: Option<f64>,
    pub support_size: usize,
}

pub fn hitrates(ci: &ConfidenceIntervals, x_star: &SparseSignal) -> Result<HitrateReport> {
    let n = x_star.len();
    if ci.center.len() != n {
        return Err(Error::dim("interval count does not match the signal length"));
    }
    let hits = (0..n).filter(|&i| ci.contains(i, x_star.values[i])).count();
    let support_hits = x_star
        .support
        .iter()
        .filter(|&&i| ci.contains(i, x_star.values[i]))
        .count();
    let s = x_star.s0();
    Ok(HitrateReport {
        h: hits as f64 / n as f64,
        h_s: (s > 0).then(|| support_hits as f64 / s as f64),
        support_size: s,
    })
}

/// `(√m / (σ √Σ̂_ii)) (x_u − x*)_i`, times `multiplier`. Components with
/// `Σ̂_ii = 0` are left at 0.
pub fn standardize(
    est: &DebiasedEstimate,
    x_star: ArrayView1<'_, f64>,
    sigma: f64,
    multiplier: f64,
) -> Result<Array1<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::param("standardization needs a positive noise level"));
    }
    let sqrt_m = (est.m as f64).sqrt();
    Ok(ndarray::Zip::from(&est.x_u)
        .and(&x_star)
        .and(&est.cov_diag)
        .map_collect(|&u, &t, &d| {
            if d > 0.0 {
                multiplier * sqrt_m * (u - t) / (sigma * d.sqrt())
            } else {
                0.0
            }
        }))
}

/// Sorted values paired with standard-normal quantiles at the Hazen
/// positions `(i − 0.5)/N`, as `(theoretical, empirical)`.
pub fn qq_data(standardized: ArrayView1<'_, f64>) -> Result<Vec<(f64, f64)>> {
    let n = standardized.len();
    if n < 2 {
        return Err(Error::param("Q-Q data needs at least two values"));
    }
    let mut sorted = standardized.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| Ok((std_normal_quantile((i as f64 + 0.5) / n as f64)?, v)))
        .collect()
}

/// Pearson correlation of the two Q-Q columns.
pub fn qq_correlation(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mx, my) = pairs
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Residual plug-in noise estimate `‖b − A x‖₂² / (m − ŝ)` with
/// `ŝ = |supp(x)|`. Not part of the calibrated procedure; the known noise
/// level is used by default.
pub fn residual_sigma(
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
    x: ArrayView1<'_, f64>,
) -> Result<f64> {
    let s_hat = x.iter().filter(|v| **v != 0.0).count();
    if s_hat >= a.rows() {
        return Err(Error::param(
            "plug-in noise estimate needs fewer nonzeros than measurements",
        ));
    }
    let r = &b - &a.apply(x);
    Ok((r.dot(&r) / (a.rows() - s_hat) as f64).sqrt())
}
