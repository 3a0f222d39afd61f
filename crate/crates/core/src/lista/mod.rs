//! LISTA-CP: the unrolled, trainable version of ISTA.
//!
//! Layer `k` maps `x ↦ S_{λ^k}(x + (W^k)ᵀ (b − A x))` with a free weight
//! `W^k ∈ R^{m×N}` and threshold `λ^k > 0`. Initializing every layer with
//! `W^k = A/μ` reproduces ISTA exactly.

mod adam;
mod grad;
mod train;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::datagen::Dataset;
use crate::ista::shrink;
use crate::measurement::MeasurementMatrix;
use crate::{Error, Result};

pub use adam::{adam_update, AdamState, Multipliers, MIN_THRESHOLD};
pub use grad::{backward, Gradients};
pub use train::{
    train_stagewise, NmseRecord, Phase, TrainConfig, TrainOutcome, FULL_MAX_STAGE_ITERS,
    FULL_PATIENCE,
};

/// Floor returned by [`nmse`] for an exact reconstruction.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ListaParams {
    /// `W^k`, each `m × N`, applied as `(W^k)ᵀ r`.
    pub weights: Vec<Array2<f64>>,
    pub thresholds: Vec<f64>,
}

impl ListaParams {
    pub fn new(weights: Vec<Array2<f64>>, thresholds: Vec<f64>) -> Result<Self> {
        if weights.len() != thresholds.len() {
            return Err(Error::param(format!(
                "{} weight matrices but {} thresholds",
                weights.len(),
                thresholds.len()
            )));
        }
        if let Some(first) = weights.first() {
            let dim = first.dim();
            if weights.iter().any(|w| w.dim() != dim) {
                return Err(Error::dim("all layer weights must share one shape"));
            }
        }
        if thresholds.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::param("thresholds must be positive and finite"));
        }
        Ok(ListaParams {
            weights,
            thresholds,
        })
    }

    /// Number of layers `K`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Parameters of the first `depth` layers.
    pub fn truncated(&self, depth: usize) -> ListaParams {
        ListaParams {
            weights: self.weights[..depth].to_vec(),
            thresholds: self.thresholds[..depth].to_vec(),
        }
    }

    pub fn check_against(&self, a: &MeasurementMatrix) -> Result<()> {
        match self.weights.first() {
            Some(w) if w.dim() != a.entries().dim() => Err(Error::dim(format!(
                "layer weights are {:?} but the matrix is {:?}",
                w.dim(),
                a.entries().dim()
            ))),
            _ => Ok(()),
        }
    }
}

/// Every layer set to the ISTA step: `W^k = A/μ`, `λ^k = lam`.
pub fn init_from_ista(a: &MeasurementMatrix, mu: f64, lam: f64, k: usize) -> Result<ListaParams> {
    if !(mu > 0.0) || !(lam > 0.0) || k == 0 {
        return Err(Error::param(format!(
            "ISTA initialization needs mu > 0, lam > 0 and K >= 1 (got {mu}, {lam}, {k})"
        )));
    }
    let w = a.entries() / mu;
    ListaParams::new(vec![w; k], vec![lam; k])
}

/// Iterates `x¹..x^K` for one measurement vector.
pub fn forward(
    params: &ListaParams,
    a: &MeasurementMatrix,
    b: ArrayView1<'_, f64>,
    x0: Option<ArrayView1<'_, f64>>,
) -> Result<Vec<Array1<f64>>> {
    params.check_against(a)?;
    if b.len() != a.rows() {
        return Err(Error::dim("measurement length does not match the matrix"));
    }
    let mut x = match x0 {
        Some(x0) if x0.len() != a.cols() => {
            return Err(Error::dim("initial iterate length does not match the matrix"))
        }
        Some(x0) => x0.to_owned(),
        None => Array1::zeros(a.cols()),
    };
    let mut out = Vec::with_capacity(params.depth());
    for (w, &lam) in params.weights.iter().zip(&params.thresholds) {
        let r = &b - &a.apply(x.view());
        let g = w.t().dot(&r);
        x = Zip::from(&x).and(&g).map_collect(|&xi, &gi| shrink(xi + gi, lam));
        out.push(x.clone());
    }
    Ok(out)
}

/// Training pairs stacked column-wise: `x_star` is `N × B`, `b` is `m × B`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_star: Array2<f64>,
    pub b: Array2<f64>,
}

impl Batch {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Batch {
        let mut x_star = Array2::zeros((data.n, indices.len()));
        let mut b = Array2::zeros((data.m, indices.len()));
        for (col, &i) in indices.iter().enumerate() {
            x_star.column_mut(col).assign(&data.signals[i].values);
            b.column_mut(col).assign(&data.observations[i].b);
        }
        Batch { x_star, b }
    }

    pub fn from_pairs(pairs: &[(Array1<f64>, Array1<f64>)]) -> Result<Batch> {
        let (n, m) = match pairs.first() {
            Some((x, b)) => (x.len(), b.len()),
            None => return Err(Error::param("empty batch")),
        };
        let mut x_star = Array2::zeros((n, pairs.len()));
        let mut b = Array2::zeros((m, pairs.len()));
        for (col, (x, y)) in pairs.iter().enumerate() {
            if x.len() != n || y.len() != m {
                return Err(Error::dim("batch pairs have inconsistent lengths"));
            }
            x_star.column_mut(col).assign(x);
            b.column_mut(col).assign(y);
        }
        Ok(Batch { x_star, b })
    }

    pub fn len(&self) -> usize {
        self.x_star.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, a: &MeasurementMatrix) -> Result<()> {
        if self.is_empty() {
            return Err(Error::param("empty batch"));
        }
        if self.x_star.nrows() != a.cols() || self.b.nrows() != a.rows() {
            return Err(Error::dim("batch does not match the matrix dimensions"));
        }
        Ok(())
    }
}

/// One layer applied to every column of `x`.
pub(crate) fn layer_batch(
    a: &MeasurementMatrix,
    w: &Array2<f64>,
    lam: f64,
    b: &Array2<f64>,
    x: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let r = b - &a.entries().dot(x);
    let mut u = w.t().dot(&r);
    u += x;
    let next = u.mapv(|v| shrink(v, lam));
    (r, u, next)
}

/// Final iterate for every column of `batch.b`.
pub fn forward_batch(params: &ListaParams, a: &MeasurementMatrix, b: &Array2<f64>) -> Array2<f64> {
    let mut x = Array2::zeros((a.cols(), b.ncols()));
    for (w, &lam) in params.weights.iter().zip(&params.thresholds) {
        x = layer_batch(a, w, lam, b, &x).2;
    }
    x
}

/// Mean squared `ℓ₂` error of the final iterate over the batch.
pub fn loss(params: &ListaParams, a: &MeasurementMatrix, batch: &Batch) -> Result<f64> {
    params.check_against(a)?;
    batch.check(a)?;
    let x = forward_batch(params, a, &batch.b);
    let d = x - &batch.x_star;
    Ok(d.iter().map(|v| v * v).sum::<f64>() / batch.len() as f64)
}

/// `10 log₁₀(‖x − x*‖² / ‖x*‖²)` in dB, floored at [`NMSE_FLOOR_DB`].
pub fn nmse(x: ArrayView1<'_, f64>, x_star: ArrayView1<'_, f64>) -> Result<f64> {
    let num: f64 = x.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum();
    let den = x_star.dot(&x_star);
    nmse_ratio(num, den)
}

fn nmse_ratio(num: f64, den: f64) -> Result<f64> {
    if den == 0.0 {
        return Err(Error::DegenerateSignal("NMSE of a zero ground truth".into()));
    }
    if num == 0.0 {
        return Ok(NMSE_FLOOR_DB);
    }
    Ok((10.0 * (num / den).log10()).max(NMSE_FLOOR_DB))
}

/// Aggregate NMSE over a batch: total squared error over total energy.
pub fn nmse_batch(x: &Array2<f64>, x_star: &Array2<f64>) -> Result<f64> {
    let num: f64 = Zip::from(x).and(x_star).fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
    let den: f64 = x_star.iter().map(|v| v * v).sum();
    nmse_ratio(num, den)
}

/// Per-layer aggregate NMSE `k = 1..K` on a batch.
pub fn layer_nmse(params: &ListaParams, a: &MeasurementMatrix, batch: &Batch) -> Result<Vec<f64>> {
    let mut x = Array2::zeros((a.cols(), batch.len()));
    params
        .weights
        .iter()
        .zip(&params.thresholds)
        .map(|(w, &lam)| {
            x = layer_batch(a, w, lam, &batch.b, &x).2;
            nmse_batch(&x, &batch.x_star)
        })
        .collect()
}

pub const CHECKPOINT_LAYOUT: &str = "rows-m-cols-n-applied-transposed";
const CHECKPOINT_FORMAT: &str = "dlista-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    m: usize,
    n: usize,
    k: usize,
    layout: String,
    config_hash: String,
    thresholds: Vec<f64>,
    /// One row-major `m × N` block per layer.
    weights: Vec<Vec<f64>>,
}

impl ListaParams {
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let (m, n) = self.weights.first().map_or((0, 0), |w| w.dim());
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            m,
            n,
            k: self.depth(),
            layout: CHECKPOINT_LAYOUT.into(),
            config_hash: config_hash.into(),
            thresholds: self.thresholds.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.iter().copied().collect())
                .collect(),
        };
        container::write_json(path, &file)
    }

    /// Loads a checkpoint, returning the parameters and the stored config hash.
    pub fn load(path: &Path) -> Result<(ListaParams, String)> {
        let file: CheckpointFile = container::read_json(path)?;
        container::check_header(
            path,
            &file.format,
            file.version,
            CHECKPOINT_FORMAT,
            CHECKPOINT_VERSION,
        )?;
        if file.layout != CHECKPOINT_LAYOUT {
            return Err(Error::format(path, format!("unknown layout `{}`", file.layout)));
        }
        if file.weights.len() != file.k {
            return Err(Error::format(path, "layer count does not match header"));
        }
        let weights = file
            .weights
            .into_iter()
            .map(|w| Array2::from_shape_vec((file.m, file.n), w))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, e))?;
        let params = ListaParams::new(weights, file.thresholds)?;
        Ok((params, file.config_hash))
    }
}

/// Column-stacked sample indices `lo..hi` of a dataset.
pub(crate) fn dataset_range(data: &Dataset, lo: usize, hi: usize) -> Batch {
    let idx: Vec<usize> = (lo..hi).collect();
    Batch::from_dataset(data, &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ista::{ista_iterates, IstaConfig};
    use crate::measurement::gen_gaussian;
    use ndarray::array;

    #[test]
    fn ista_initialization_reproduces_ista() {
        let a = gen_gaussian(12, 24, 3).unwrap();
        let b: Array1<f64> = (0..12).map(|i| (i as f64 * 1.3).sin()).collect();
        let cfg = IstaConfig::new(&a, 0.02);
        let params = init_from_ista(&a, cfg.mu, cfg.lambda, 10).unwrap();
        let lista = forward(&params, &a, b.view(), None).unwrap();
        let ista = ista_iterates(&a, b.view(), &cfg, 10);
        for (u, v) in lista.iter().zip(&ista) {
            for (p, q) in u.iter().zip(v.iter()) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
        let one = forward(&params.truncated(1), &a, b.view(), None).unwrap();
        assert_eq!(one.len(), 1);
        assert!((&one[0] - &ista[0]).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn huge_thresholds_zero_everything() {
        let a = gen_gaussian(6, 10, 1).unwrap();
        let params = init_from_ista(&a, 50.0, 1e6, 4).unwrap();
        let b = array![1.0, -2.0, 3.0, 0.5, 0.0, 1.0];
        for x in forward(&params, &a, b.view(), None).unwrap() {
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_data_stays_at_origin() {
        let a = gen_gaussian(6, 10, 1).unwrap();
        let params = init_from_ista(&a, 50.0, 0.01, 3).unwrap();
        for x in forward(&params, &a, Array1::zeros(6).view(), None).unwrap() {
            assert!(x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_rejects_bad_arguments() {
        let a = gen_gaussian(2, 3, 1).unwrap();
        assert!(init_from_ista(&a, 0.0, 1.0, 1).is_err());
        assert!(init_from_ista(&a, 1.0, 0.0, 1).is_err());
        assert!(init_from_ista(&a, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn loss_definition() {
        let a = gen_gaussian(4, 6, 2).unwrap();
        let params = init_from_ista(&a, 20.0, 0.05, 2).unwrap();
        let b1 = array![0.5, -1.0, 0.2, 0.1];
        let b2 = array![-0.3, 0.4, 1.0, 0.0];
        let y1 = forward(&params, &a, b1.view(), None).unwrap().pop().unwrap();
        let y2 = forward(&params, &a, b2.view(), None).unwrap().pop().unwrap();

        // output equals truth
        let exact = Batch::from_pairs(&[(y1.clone(), b1.clone())]).unwrap();
        assert!(loss(&params, &a, &exact).unwrap().abs() < 1e-30);

        // x* = 0
        let zero = Batch::from_pairs(&[(Array1::zeros(6), b1.clone())]).unwrap();
        assert!((loss(&params, &a, &zero).unwrap() - y1.dot(&y1)).abs() < 1e-14);

        // two samples average
        let x1 = array![1.0, 0.0, 0.0, 0.0, -1.0, 0.0];
        let x2 = array![0.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        let l1 = (&y1 - &x1).mapv(|v| v * v).sum();
        let l2 = (&y2 - &x2).mapv(|v| v * v).sum();
        let both = Batch::from_pairs(&[(x1, b1), (x2, b2)]).unwrap();
        assert!((loss(&params, &a, &both).unwrap() - 0.5 * (l1 + l2)).abs() < 1e-14);

        let empty = Batch {
            x_star: Array2::zeros((6, 0)),
            b: Array2::zeros((4, 0)),
        };
        assert!(matches!(loss(&params, &a, &empty), Err(Error::Parameter(_))));
    }

    #[test]
    fn nmse_values() {
        let x_star = array![3.0, 4.0];
        assert_eq!(nmse(x_star.view(), x_star.view()).unwrap(), NMSE_FLOOR_DB);
        assert!(nmse(array![0.0, 0.0].view(), x_star.view()).unwrap().abs() < 1e-12);
        let near = array![3.3, 4.4];
        assert!((nmse(near.view(), x_star.view()).unwrap() + 20.0).abs() < 1e-9);
        assert!(matches!(
            nmse(near.view(), array![0.0, 0.0].view()),
            Err(Error::DegenerateSignal(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let a = gen_gaussian(3, 5, 2).unwrap();
        let mut params = init_from_ista(&a, 7.0, 0.1, 3).unwrap();
        params.weights[1][[2, 4]] = 0.123456789;
        params.thresholds[2] = 0.0375;
        params.save(&path, "abc").unwrap();
        let (back, hash) = ListaParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(hash, "abc");
    }
}
