//! Ground-truth sparse signals, noisy observations and training datasets.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::measurement::MeasurementMatrix;
use crate::seed::{self, Stream};
use crate::{Error, Result};

/// `s0`-sparse ground truth with its support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseSignal {
    pub values: Array1<f64>,
    pub support: BTreeSet<usize>,
}

impl SparseSignal {
    /// Builds a signal from dense values; the support is the nonzero set.
    pub fn from_values(values: Array1<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        SparseSignal { values, support }
    }

    pub fn s0(&self) -> usize {
        self.support.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Noisy measurement `b = A x + ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub b: Array1<f64>,
    pub sigma: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub signals: Vec<SparseSignal>,
    pub observations: Vec<Observation>,
    pub matrix_ref: String,
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub snr_db: f64,
    pub master_seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!(
            "support probability must lie in (0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Bernoulli(`p`) support, standard normal values on it.
pub fn gen_signal(n: usize, p: f64, seed: u64) -> Result<SparseSignal> {
    check_probability(p)?;
    let mut rng = seed::rng(seed);
    let mut values = Array1::zeros(n);
    let mut support = BTreeSet::new();
    for (i, v) in values.iter_mut().enumerate() {
        if rng.random_bool(p) {
            // a standard normal draw of exactly 0 would break values_i != 0 <=> i in S
            let mut z: f64 = rng.sample(StandardNormal);
            while z == 0.0 {
                z = rng.sample(StandardNormal);
            }
            *v = z;
            support.insert(i);
        }
    }
    Ok(SparseSignal { values, support })
}

/// `σ ε₀` with `ε₀ ~ N(0, I_m)` drawn from `seed`.
pub fn noise_vector(m: usize, sigma: f64, seed: u64) -> Array1<f64> {
    let mut rng = seed::rng(seed);
    (0..m)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Noise level giving `E‖ε‖₂ / ‖y‖₂ = 10^(-snr_db / 20)` for `y = A x`.
/// `snr_db = +∞` means noiseless.
pub fn noise_sigma(y_norm: f64, m: usize, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() {
        return Err(Error::param("snr_db is NaN"));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    if y_norm == 0.0 {
        return Err(Error::DegenerateSignal(
            "A x = 0, the noise level for a finite SNR is undefined".into(),
        ));
    }
    Ok(y_norm * 10f64.powf(-snr_db / 20.0) / (m as f64).sqrt())
}

pub fn observe(
    a: &MeasurementMatrix,
    x: &SparseSignal,
    snr_db: f64,
    seed: u64,
) -> Result<Observation> {
    if x.len() != a.cols() {
        return Err(Error::dim(format!(
            "signal length {} does not match matrix with {} columns",
            x.len(),
            a.cols()
        )));
    }
    let y = a.apply(x.values.view());
    let sigma = noise_sigma(y.dot(&y).sqrt(), a.rows(), snr_db)?;
    let b = if sigma == 0.0 {
        y
    } else {
        y + noise_vector(a.rows(), sigma, seed)
    };
    Ok(Observation {
        b,
        sigma,
        noise_seed: seed,
    })
}

/// `n` independent (signal, observation) pairs. Sample `i` uses seeds
/// derived from `(master_seed, i)` only, so samples can be generated in any
/// order.
pub fn gen_dataset(
    a: &MeasurementMatrix,
    n: usize,
    p: f64,
    snr_db: f64,
    master_seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    check_probability(p)?;
    let mut signals = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let (x, obs) = gen_sample(a, p, snr_db, master_seed, i)?;
        signals.push(x);
        observations.push(obs);
    }
    Ok(Dataset {
        signals,
        observations,
        matrix_ref: a.fingerprint(),
        n: a.cols(),
        m: a.rows(),
        p,
        snr_db,
        master_seed,
    })
}

fn gen_sample(
    a: &MeasurementMatrix,
    p: f64,
    snr_db: f64,
    master_seed: u64,
    index: u64,
) -> Result<(SparseSignal, Observation)> {
    let noise_seed = seed::derive(master_seed, Stream::Noise, index);
    let x = gen_signal(a.cols(), p, seed::derive(master_seed, Stream::Signal, index))?;
    match observe(a, &x, snr_db, noise_seed) {
        Err(Error::DegenerateSignal(_)) => {
            let x = gen_signal(
                a.cols(),
                p,
                seed::derive(master_seed, Stream::Resample, index),
            )?;
            let obs = observe(a, &x, snr_db, noise_seed)?;
            Ok((x, obs))
        }
        other => other.map(|obs| (x, obs)),
    }
}

const DATASET_FORMAT: &str = "dlista-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    header: DatasetHeader,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    m: usize,
    samples: usize,
    p: f64,
    snr_db: f64,
    master_seed: u64,
    matrix_ref: String,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    /// Support indices and the values on them.
    support: Vec<usize>,
    values: Vec<f64>,
    b: Vec<f64>,
    sigma: f64,
    noise_seed: u64,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let samples = self
            .signals
            .iter()
            .zip(&self.observations)
            .map(|(x, obs)| SampleRecord {
                support: x.support.iter().copied().collect(),
                values: x.support.iter().map(|&i| x.values[i]).collect(),
                b: obs.b.to_vec(),
                sigma: obs.sigma,
                noise_seed: obs.noise_seed,
            })
            .collect();
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            header: DatasetHeader {
                n: self.n,
                m: self.m,
                samples: self.len(),
                p: self.p,
                snr_db: self.snr_db,
                master_seed: self.master_seed,
                matrix_ref: self.matrix_ref.clone(),
            },
            samples,
        };
        container::write_json(path, &file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DatasetFile = container::read_json(path)?;
        container::check_header(
            path,
            &file.format,
            file.version,
            DATASET_FORMAT,
            DATASET_VERSION,
        )?;
        let h = file.header;
        if file.samples.len() != h.samples {
            return Err(Error::format(path, "sample count does not match header"));
        }
        let mut signals = Vec::with_capacity(h.samples);
        let mut observations = Vec::with_capacity(h.samples);
        for rec in file.samples {
            if rec.support.len() != rec.values.len() || rec.b.len() != h.m {
                return Err(Error::format(path, "malformed sample record"));
            }
            let mut values = Array1::zeros(h.n);
            for (&i, &v) in rec.support.iter().zip(&rec.values) {
                if i >= h.n {
                    return Err(Error::format(path, "support index out of range"));
                }
                values[i] = v;
            }
            signals.push(SparseSignal {
                values,
                support: rec.support.into_iter().collect(),
            });
            observations.push(Observation {
                b: Array1::from(rec.b),
                sigma: rec.sigma,
                noise_seed: rec.noise_seed,
            });
        }
        Ok(Dataset {
            signals,
            observations,
            matrix_ref: h.matrix_ref,
            n: h.n,
            m: h.m,
            p: h.p,
            snr_db: h.snr_db,
            master_seed: h.master_seed,
        })
    }
}
