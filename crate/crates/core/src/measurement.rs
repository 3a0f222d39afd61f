//! Sensing matrices: column-normalized Gaussian and row-subsampled Hadamard.
//!
//! Matrices are stored unnormalized, with every column scaled so that the
//! sample covariance `AᵀA/m` has a unit diagonal. Any `1/m` or `1/√m` factor
//! lives in the formula that needs it.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::seed;
use crate::{Error, Result};

/// Largest Hadamard order `d` built densely (`2^12 × 2^12` entries).
pub const MAX_HADAMARD_ORDER: u32 = 12;

/// Largest `N` for which the full `N × N` sample covariance is materialized.
pub const FULL_COVARIANCE_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ensemble {
    Gaussian,
    HadamardSubsampled,
}

impl std::fmt::Display for Ensemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ensemble::Gaussian => "gaussian",
            Ensemble::HadamardSubsampled => "hadamard-subsampled",
        })
    }
}

/// Dense `m × N` sensing operator.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    entries: Array2<f64>,
    ensemble: Ensemble,
    entry_bound: f64,
    seed: u64,
}

impl MeasurementMatrix {
    fn new(entries: Array2<f64>, ensemble: Ensemble, seed: u64) -> Result<Self> {
        let (m, n) = entries.dim();
        if m == 0 || n == 0 || m > n {
            return Err(Error::dim(format!(
                "measurement matrix must satisfy 0 < m <= N, got {m} x {n}"
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("measurement matrix has non-finite entries"));
        }
        let entry_bound = entries.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        Ok(MeasurementMatrix {
            entries,
            ensemble,
            entry_bound,
            seed,
        })
    }

    /// Wraps an arbitrary dense matrix, e.g. a hand-built test design.
    pub fn from_entries(entries: Array2<f64>, ensemble: Ensemble, seed: u64) -> Result<Self> {
        Self::new(entries, ensemble, seed)
    }

    /// Subsampled `2^d`-column Hadamard matrix with `m` rows.
    pub fn hadamard(n: usize, m: usize, seed: u64) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::dim(format!(
                "Hadamard ensemble needs N to be a power of two, got {n}"
            )));
        }
        let h = gen_hadamard(n.trailing_zeros())?;
        subsample_rows(&h, m, seed)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn cols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn ensemble(&self) -> Ensemble {
        self.ensemble
    }

    /// `max |A_ij|`. Exactly 1 for Hadamard rows; the empirical maximum for
    /// Gaussian draws, which have no uniform bound.
    pub fn entry_bound(&self) -> f64 {
        self.entry_bound
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `A x`
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.entries.dot(&x)
    }

    /// `Aᵀ r`
    pub fn apply_t(&self, r: ArrayView1<'_, f64>) -> Array1<f64> {
        self.entries.t().dot(&r)
    }

    /// Short content hash identifying this matrix in datasets and reports.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.rows() as u64).to_le_bytes());
        hasher.update((self.cols() as u64).to_le_bytes());
        hasher.update(self.ensemble.to_string().as_bytes());
        hasher.update(self.seed.to_le_bytes());
        for v in self.entries.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = MatrixFile {
            format: MATRIX_FORMAT.to_owned(),
            version: MATRIX_VERSION,
            rows: self.rows(),
            cols: self.cols(),
            ensemble: self.ensemble,
            seed: self.seed,
            entries: self.entries.iter().copied().collect(),
        };
        container::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MatrixFile = container::read_json(path)?;
        container::check_header(
            path,
            &file.format,
            file.version,
            MATRIX_FORMAT,
            MATRIX_VERSION,
        )?;
        let entries = Array2::from_shape_vec((file.rows, file.cols), file.entries)
            .map_err(|e| Error::format(path, e))?;
        Self::new(entries, file.ensemble, file.seed)
    }
}

const MATRIX_FORMAT: &str = "dlista-matrix";
const MATRIX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    format: String,
    version: u32,
    rows: usize,
    cols: usize,
    ensemble: Ensemble,
    seed: u64,
    /// Row-major.
    entries: Vec<f64>,
}

/// i.i.d. standard normal entries, each column rescaled to norm `√m`.
pub fn gen_gaussian(m: usize, n: usize, seed: u64) -> Result<MeasurementMatrix> {
    if m == 0 || n == 0 || m > n {
        return Err(Error::dim(format!(
            "Gaussian ensemble needs 0 < m <= N, got m = {m}, N = {n}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut entries = Array2::<f64>::zeros((m, n));
    for v in entries.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    let target = (m as f64).sqrt();
    for mut col in entries.axis_iter_mut(Axis(1)) {
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v * target / norm);
    }
    MeasurementMatrix::new(entries, Ensemble::Gaussian, seed)
}

/// Sylvester-Hadamard matrix `H_d` of order `2^d`.
pub fn gen_hadamard(d: u32) -> Result<Array2<f64>> {
    gen_hadamard_capped(d, MAX_HADAMARD_ORDER)
}

pub fn gen_hadamard_capped(d: u32, max_order: u32) -> Result<Array2<f64>> {
    if d > max_order {
        return Err(Error::Resource(format!(
            "Hadamard order {d} exceeds the configured cap {max_order}"
        )));
    }
    let mut h = Array2::from_elem((1, 1), 1.0);
    for _ in 0..d {
        let n = h.nrows();
        let mut next = Array2::zeros((2 * n, 2 * n));
        for ((i, j), &v) in h.indexed_iter() {
            next[[i, j]] = v;
            next[[i, j + n]] = v;
            next[[i + n, j]] = v;
            next[[i + n, j + n]] = -v;
        }
        h = next;
    }
    Ok(h)
}

/// Draws `m` rows of `h` independently and uniformly, with replacement.
pub fn subsample_rows(h: &Array2<f64>, m: usize, seed: u64) -> Result<MeasurementMatrix> {
    let rows = h.nrows();
    if m == 0 || m > rows {
        return Err(Error::dim(format!(
            "cannot subsample {m} rows from a matrix with {rows} rows"
        )));
    }
    let mut rng = seed::rng(seed);
    let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..rows)).collect();
    select_rows(h, &picks, seed)
}

/// Builds a Hadamard-subsampled matrix from explicit row indices.
pub fn select_rows(h: &Array2<f64>, picks: &[usize], seed: u64) -> Result<MeasurementMatrix> {
    if h.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::param("row subsampling expects a ±1 Hadamard matrix"));
    }
    if let Some(&bad) = picks.iter().find(|&&r| r >= h.nrows()) {
        return Err(Error::dim(format!("row index {bad} out of range")));
    }
    let entries = h.select(Axis(0), picks);
    MeasurementMatrix::new(entries, Ensemble::HadamardSubsampled, seed)
}

/// `Σ̂ = AᵀA/m`: diagonal always, full matrix on request.
#[derive(Clone, Debug)]
pub struct SampleCovariance {
    pub full: Option<Array2<f64>>,
    pub diagonal: Array1<f64>,
}

pub fn sample_covariance(a: &MeasurementMatrix, materialize_full: bool) -> SampleCovariance {
    let entries = a.entries();
    let m = a.rows() as f64;
    let diagonal = entries
        .axis_iter(Axis(1))
        .map(|col| col.dot(&col) / m)
        .collect();
    let full = (materialize_full && a.cols() <= FULL_COVARIANCE_CAP).then(|| {
        let mut s = entries.t().dot(entries) / m;
        // symmetrize away rounding differences between (i, j) and (j, i)
        let n = s.nrows();
        for i in 0..n {
            for j in i + 1..n {
                let v = 0.5 * (s[[i, j]] + s[[j, i]]);
                s[[i, j]] = v;
                s[[j, i]] = v;
            }
        }
        s
    });
    SampleCovariance { full, diagonal }
}

/// In-place fast Walsh-Hadamard transform: overwrites `x` with `H_d x`.
pub fn fwht(x: &mut [f64]) -> Result<()> {
    let n = x.len();
    if !n.is_power_of_two() {
        return Err(Error::dim(format!(
            "fwht needs a power-of-two length, got {n}"
        )));
    }
    let mut half = 1;
    while half < n {
        for block in x.chunks_exact_mut(2 * half) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        half *= 2;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn gaussian_single_entry_is_unit() {
        for seed in 0..5 {
            let a = gen_gaussian(1, 1, seed).unwrap();
            assert!((a.entries()[[0, 0]].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_diagonal_is_one() {
        let a = gen_gaussian(30, 70, 11).unwrap();
        let cov = sample_covariance(&a, false);
        assert!(cov.diagonal.iter().all(|v| (v - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn gaussian_off_diagonal_regression() {
        let a = gen_gaussian(64, 128, 7).unwrap();
        let s = sample_covariance(&a, true).full.unwrap();
        let mut worst = 0.0_f64;
        for ((i, j), v) in s.indexed_iter() {
            if i != j {
                worst = worst.max(v.abs());
            }
        }
        assert!(worst <= 0.6, "max off-diagonal {worst}");
        // pinned from the seeded generator
        assert!((worst - GAUSSIAN_64_128_7_MAX_OFFDIAG).abs() < 1e-12, "{worst}");
    }

    const GAUSSIAN_64_128_7_MAX_OFFDIAG: f64 = 0.4702479743160474;

    #[test]
    fn bad_dimensions_rejected() {
        assert!(matches!(gen_gaussian(0, 4, 1), Err(Error::Dimension(_))));
        assert!(matches!(gen_gaussian(4, 0, 1), Err(Error::Dimension(_))));
        assert!(matches!(gen_gaussian(5, 4, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn hadamard_small_orders() {
        assert_eq!(gen_hadamard(0).unwrap(), array![[1.0]]);
        assert_eq!(gen_hadamard(1).unwrap(), array![[1.0, 1.0], [1.0, -1.0]]);
        let h3 = gen_hadamard(3).unwrap();
        assert_eq!(h3.t().dot(&h3), Array2::<f64>::eye(8) * 8.0);
    }

    #[test]
    fn hadamard_cap() {
        assert!(matches!(gen_hadamard_capped(5, 4), Err(Error::Resource(_))));
        assert!(matches!(
            gen_hadamard(MAX_HADAMARD_ORDER + 1),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn identity_subsample() {
        let h1 = gen_hadamard(1).unwrap();
        let a = select_rows(&h1, &[0, 1], 0).unwrap();
        assert_eq!(a.entries(), &h1);
        assert_eq!(a.ensemble(), Ensemble::HadamardSubsampled);
    }

    #[test]
    fn single_row_subsample() {
        let h = gen_hadamard(4).unwrap();
        let a = subsample_rows(&h, 1, 9).unwrap();
        assert_eq!(a.rows(), 1);
        assert!(a.entries().iter().all(|v| v.abs() == 1.0));
        assert!(h.rows().into_iter().any(|r| r == a.entries().row(0)));
        assert_eq!(a.entry_bound(), 1.0);
    }

    #[test]
    fn hadamard_covariance_diagonal_exact() {
        let h = gen_hadamard(8).unwrap();
        let a = subsample_rows(&h, 128, 3).unwrap();
        let cov = sample_covariance(&a, false);
        assert!(cov.diagonal.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn subsample_rejects_bad_counts() {
        let h = gen_hadamard(2).unwrap();
        assert!(matches!(subsample_rows(&h, 0, 1), Err(Error::Dimension(_))));
        assert!(matches!(subsample_rows(&h, 5, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn scaled_identity_covariance() {
        let m = 5;
        let a = MeasurementMatrix::from_entries(
            Array2::eye(m) * (m as f64).sqrt(),
            Ensemble::Gaussian,
            0,
        )
        .unwrap();
        let s = sample_covariance(&a, true).full.unwrap();
        for ((i, j), v) in s.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fwht_basics() {
        let mut e1 = [1.0, 0.0];
        fwht(&mut e1).unwrap();
        assert_eq!(e1, [1.0, 1.0]);
        let mut zero = [0.0; 16];
        fwht(&mut zero).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(matches!(fwht(&mut [0.0; 6]), Err(Error::Dimension(_))));
    }

    #[test]
    fn fwht_matches_dense_d6() {
        let h = gen_hadamard(6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x: Array1<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = h.dot(&x);
        let mut fast = x.to_vec();
        fwht(&mut fast).unwrap();
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn generators_are_reproducible() {
        assert_eq!(gen_gaussian(8, 16, 5).unwrap(), gen_gaussian(8, 16, 5).unwrap());
        let h = gen_hadamard(4).unwrap();
        assert_eq!(
            subsample_rows(&h, 6, 2).unwrap(),
            subsample_rows(&h, 6, 2).unwrap()
        );
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let a = gen_gaussian(6, 10, 123).unwrap();
        a.save(&path).unwrap();
        let b = MeasurementMatrix::load(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
