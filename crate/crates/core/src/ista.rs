//! Classical ISTA for the LASSO.
//!
//! The iteration is `x ← S_θ(x + (1/μ) Aᵀ(b − A x))` with the threshold `θ`
//! applied as given. Run this way it minimizes the `1/(2m)`-scaled LASSO
//! objective with regularization `λ = θ μ / m`; [`IstaConfig`] exposes both
//! parameterizations.

use ndarray::{Array1, ArrayView1, Zip};
use rand::Rng;

use crate::measurement::MeasurementMatrix;
use crate::seed;

/// `sgn(x) · max(|x| − λ, 0)` for a scalar.
#[inline]
pub fn shrink(x: f64, lam: f64) -> f64 {
    if x > lam {
        x - lam
    } else if x < -lam {
        x + lam
    } else {
        0.0
    }
}

pub fn soft_threshold(x: ArrayView1<'_, f64>, lam: f64) -> Array1<f64> {
    x.mapv(|v| shrink(v, lam))
}

/// `(1/(2m)) ‖A x − b‖₂² + λ ‖x‖₁`
pub fn lasso_objective(
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
    x: ArrayView1<'_, f64>,
    lambda: f64,
) -> f64 {
    let r = a.apply(x) - b;
    r.dot(&r) / (2.0 * a.rows() as f64) + lambda * x.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IstaConfig {
    /// Threshold applied in each step.
    pub lambda: f64,
    /// Step parameter; the gradient step is `1/μ`.
    pub mu: f64,
    pub max_iters: usize,
    /// Stop once `‖x^{k+1} − x^k‖₂ ≤ tol`.
    pub tol: f64,
}

impl IstaConfig {
    pub const DEFAULT_TOL: f64 = 1e-10;
    pub const DEFAULT_MAX_ITERS: usize = 10_000;

    /// Threshold `lambda`, with `μ` taken from [`spectral_bound`] so the
    /// objective decreases monotonically.
    pub fn new(a: &MeasurementMatrix, lambda: f64) -> Self {
        IstaConfig {
            lambda,
            mu: spectral_bound(a),
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
        }
    }

    /// Configuration that minimizes the `1/(2m)`-scaled LASSO with
    /// regularization `lasso_lambda`.
    pub fn for_lasso(a: &MeasurementMatrix, lasso_lambda: f64) -> Self {
        let mu = spectral_bound(a);
        IstaConfig {
            lambda: lasso_lambda * a.rows() as f64 / mu,
            mu,
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol: Self::DEFAULT_TOL,
        }
    }

    /// Regularization of the scaled LASSO objective this iteration minimizes.
    pub fn lasso_lambda(&self, m: usize) -> f64 {
        self.lambda * self.mu / m as f64
    }
}

/// One step `S_λ(x + (1/μ) Aᵀ(b − A x))`.
pub fn ista_step(
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
    x: ArrayView1<'_, f64>,
    cfg: &IstaConfig,
) -> Array1<f64> {
    let r = &b - &a.apply(x);
    let g = a.apply_t(r.view());
    let inv_mu = 1.0 / cfg.mu;
    Zip::from(&x)
        .and(&g)
        .map_collect(|&xi, &gi| shrink(xi + inv_mu * gi, cfg.lambda))
}

#[derive(Clone, Debug)]
pub struct IstaSolution {
    pub x: Array1<f64>,
    /// Scaled LASSO objective at `x⁰ = 0` and after every step.
    pub objective_trace: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

/// Iterates from `x⁰ = 0` until the step size drops below `tol` or
/// `max_iters` steps have been taken.
pub fn ista_solve(a: &MeasurementMatrix, b: ArrayView1<'_, f64>, cfg: &IstaConfig) -> IstaSolution {
    let lasso_lambda = cfg.lasso_lambda(a.rows());
    let mut x = Array1::zeros(a.cols());
    let mut trace = vec![lasso_objective(a, b, x.view(), lasso_lambda)];
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let next = ista_step(a, b, x.view(), cfg);
        iters += 1;
        let diff = &next - &x;
        x = next;
        trace.push(lasso_objective(a, b, x.view(), lasso_lambda));
        if diff.dot(&diff).sqrt() <= cfg.tol {
            converged = true;
            break;
        }
    }
    IstaSolution {
        x,
        objective_trace: trace,
        iters,
        converged,
    }
}

/// The first `k` iterates `x¹..x^k` from `x⁰ = 0`, without early stopping.
pub fn ista_iterates(
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
    cfg: &IstaConfig,
    k: usize,
) -> Vec<Array1<f64>> {
    let mut x = Array1::zeros(a.cols());
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        x = ista_step(a, b, x.view(), cfg);
        out.push(x.clone());
    }
    out
}

const POWER_ITERS: usize = 200;
const POWER_RTOL: f64 = 1e-10;
const SAFETY: f64 = 1.01;

/// Upper estimate of `λ_max(AᵀA)`: power iteration times a 1.01 safety factor.
pub fn spectral_bound(a: &MeasurementMatrix) -> f64 {
    // fixed pseudo-random start; all-ones would be an eigenvector of many
    // structured designs
    let mut rng = seed::rng(0x5eed_cafe);
    let mut v: Array1<f64> = (0..a.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.dot(&v).sqrt();
    v /= norm;
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let w = a.apply_t(a.apply(v.view()).view());
        let next = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            break;
        }
        v = w / wn;
        let done = (next - est).abs() <= POWER_RTOL * next.abs();
        est = next;
        if done {
            break;
        }
    }
    // the Rayleigh quotient of the final vector
    let w = a.apply(v.view());
    est = est.max(w.dot(&w));
    SAFETY * est
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{gen_gaussian, gen_hadamard, subsample_rows, Ensemble};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn scaled_identity(n: usize, scale: f64) -> MeasurementMatrix {
        MeasurementMatrix::from_entries(Array2::eye(n) * scale, Ensemble::Gaussian, 0).unwrap()
    }

    #[test]
    fn soft_threshold_values() {
        let x = array![2.0, -0.5, -3.0];
        assert_eq!(soft_threshold(x.view(), 1.0), array![1.0, 0.0, -2.0]);
        assert_eq!(soft_threshold(x.view(), 0.0), x);
        assert_eq!(soft_threshold(Array1::<f64>::zeros(4).view(), 2.5), Array1::<f64>::zeros(4));
    }

    #[test]
    fn objective_special_cases() {
        let a = gen_gaussian(4, 6, 1).unwrap();
        let b = array![1.0, -2.0, 0.5, 0.0];
        let zero = Array1::zeros(6);
        assert!((lasso_objective(&a, b.view(), zero.view(), 0.3) - 5.25 / 8.0).abs() < 1e-15);
        assert_eq!(
            lasso_objective(&a, Array1::zeros(4).view(), zero.view(), 0.3),
            0.0
        );
    }

    #[test]
    fn objective_hand_arithmetic() {
        // A = √2 I₂, b = [2, 0], x = [1, 0], λ = 1:
        // Ax − b = [√2 − 2, 0], (1/4)(√2 − 2)² + 1 = (6 − 4√2)/4 + 1
        let a = scaled_identity(2, 2f64.sqrt());
        let v = lasso_objective(&a, array![2.0, 0.0].view(), array![1.0, 0.0].view(), 1.0);
        let want = (6.0 - 4.0 * 2f64.sqrt()) / 4.0 + 1.0;
        assert!((v - want).abs() < 1e-15);
        assert!((v - 1.085786437626905).abs() < 1e-14);
    }

    #[test]
    fn step_from_origin() {
        let a = gen_gaussian(6, 12, 2).unwrap();
        let b = array![0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let cfg = IstaConfig::new(&a, 0.05);
        let zero = Array1::zeros(12);
        assert_eq!(ista_step(&a, Array1::zeros(6).view(), zero.view(), &cfg), zero);
        let step = ista_step(&a, b.view(), zero.view(), &cfg);
        let want = soft_threshold((a.apply_t(b.view()) / cfg.mu).view(), cfg.lambda);
        for (u, v) in step.iter().zip(want.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_threshold_kills_first_step() {
        let a = gen_gaussian(6, 12, 3).unwrap();
        let b = array![0.3, -1.2, 2.0, 0.1, -0.4, 0.9];
        let mut cfg = IstaConfig::new(&a, 0.0);
        let atb = a.apply_t(b.view());
        cfg.lambda = atb.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / cfg.mu;
        let step = ista_step(&a, b.view(), Array1::zeros(12).view(), &cfg);
        assert!(step.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_data_stops_after_one_iteration() {
        let a = gen_gaussian(5, 10, 1).unwrap();
        let sol = ista_solve(&a, Array1::zeros(5).view(), &IstaConfig::new(&a, 0.1));
        assert_eq!(sol.iters, 1);
        assert!(sol.converged);
        assert!(sol.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn origin_solves_when_kkt_holds() {
        // 0 is a LASSO minimizer iff ‖Aᵀb‖∞ / m ≤ λ
        let a = gen_gaussian(8, 16, 5).unwrap();
        let b: Array1<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let lasso_lambda = a.apply_t(b.view()).iter().fold(0.0_f64, |m, v| m.max(v.abs())) / 8.0;
        let cfg = IstaConfig::for_lasso(&a, lasso_lambda);
        let sol = ista_solve(&a, b.view(), &cfg);
        assert!(sol.x.iter().all(|&v| v == 0.0));
        // subgradient check at the origin
        let grad = a.apply_t(b.view()) / 8.0;
        assert!(grad.iter().all(|g| g.abs() <= lasso_lambda * (1.0 + 1e-12)));
    }

    #[test]
    fn beats_random_sparse_candidates() {
        let a = gen_gaussian(8, 16, 9).unwrap();
        let x_true = array![0.0, 1.5, 0.0, 0.0, -0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let b = a.apply(x_true.view());
        let lasso_lambda = 0.05;
        let cfg = IstaConfig::for_lasso(&a, lasso_lambda);
        let sol = ista_solve(&a, b.view(), &cfg);
        let best = *sol.objective_trace.last().unwrap();
        let mut rng = seed::rng(77);
        for _ in 0..1000 {
            let mut cand = Array1::<f64>::zeros(16);
            for _ in 0..3 {
                cand[rng.random_range(0..16)] = rng.random_range(-3.0..3.0);
            }
            assert!(best <= lasso_objective(&a, b.view(), cand.view(), lasso_lambda));
        }
    }

    #[test]
    fn fixed_point_at_convergence() {
        let a = gen_gaussian(10, 20, 6).unwrap();
        let b: Array1<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let cfg = IstaConfig::new(&a, 0.01);
        let sol = ista_solve(&a, b.view(), &cfg);
        assert!(sol.converged);
        let again = ista_step(&a, b.view(), sol.x.view(), &cfg);
        let d = &again - &sol.x;
        assert!(d.dot(&d).sqrt() <= cfg.tol);
    }

    #[test]
    fn spectral_bound_of_scaled_identities() {
        assert!((spectral_bound(&scaled_identity(5, 1.0)) - 1.01).abs() < 1e-6);
        assert!((spectral_bound(&scaled_identity(5, 2.0)) - 4.04).abs() < 1e-6);
    }

    #[test]
    fn spectral_bound_hadamard_against_dense_eigensolve() {
        let h = gen_hadamard(4).unwrap();
        let a = subsample_rows(&h, 8, 21).unwrap();
        let gram = a.entries().t().dot(a.entries());
        let lmax = jacobi_max_eigenvalue(gram);
        let bound = spectral_bound(&a);
        assert!(bound >= lmax);
        assert!((bound / (1.01 * lmax) - 1.0).abs() < 1e-6, "{bound} vs {lmax}");
        // λ_max(AᵀA) of m ±1 rows lies in [m, N m]
        assert!((8.0 - 1e-9..=16.0 * 8.0).contains(&lmax));
    }

    /// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
    fn jacobi_max_eigenvalue(mut s: Array2<f64>) -> f64 {
        let n = s.nrows();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += s[[p, q]] * s[[p, q]];
                    if s[[p, q]].abs() < 1e-14 {
                        continue;
                    }
                    let theta = (s[[q, q]] - s[[p, p]]) / (2.0 * s[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * c;
                    for k in 0..n {
                        let (skp, skq) = (s[[k, p]], s[[k, q]]);
                        s[[k, p]] = c * skp - sn * skq;
                        s[[k, q]] = sn * skp + c * skq;
                    }
                    for k in 0..n {
                        let (spk, sqk) = (s[[p, k]], s[[q, k]]);
                        s[[p, k]] = c * spk - sn * sqk;
                        s[[q, k]] = sn * spk + c * sqk;
                    }
                }
            }
            if off < 1e-24 {
                break;
            }
        }
        (0..n).map(|i| s[[i, i]]).fold(f64::MIN, f64::max)
    }

    #[test]
    fn objective_descends_monotonically() {
        for seed in 0..5 {
            let a = gen_gaussian(12, 30, seed).unwrap();
            let b: Array1<f64> = (0..12).map(|i| ((i + seed as usize) as f64).sin()).collect();
            let mut cfg = IstaConfig::for_lasso(&a, 0.02);
            cfg.max_iters = 300;
            let trace = ista_solve(&a, b.view(), &cfg).objective_trace;
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn soft_threshold_is_nonexpansive(
            u in proptest::collection::vec(-10.0..10.0f64, 8),
            v in proptest::collection::vec(-10.0..10.0f64, 8),
            lam in 0.0..5.0f64,
        ) {
            let (u, v) = (Array1::from(u), Array1::from(v));
            let d = soft_threshold(u.view(), lam) - soft_threshold(v.view(), lam);
            let e = &u - &v;
            prop_assert!(d.dot(&d).sqrt() <= e.dot(&e).sqrt() + 1e-12);
        }
    }
}
