//! End-to-end experiments: build a matrix, train a network, then debias,
//! build intervals and score them over many noise realizations of one fixed
//! ground truth.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{gen_dataset, gen_signal, observe, SparseSignal};
use crate::debias::{decompose, debias_with, remainder_diag, theta0_diag};
use crate::lista::{forward, nmse, ListaParams, NmseRecord, TrainConfig, TrainOutcome};
use crate::measurement::{gen_gaussian, sample_covariance, Ensemble, MeasurementMatrix};
use crate::seed::{self, Stream};
use crate::uq::{confidence_intervals, hitrates, qq_correlation, qq_data, residual_sigma, standardize};
use crate::{Error, Result};

/// Attempts at drawing a ground truth with nonempty support.
const GROUND_TRUTH_ATTEMPTS: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub matrix: u64,
    pub dataset: u64,
    pub trials: u64,
}

/// Noise level used for the interval radius.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSource {
    #[default]
    Known,
    /// Residual plug-in `‖b − A x^k‖² / (m − ŝ)`.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ensemble: Ensemble,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub p: f64,
    pub snr_db: f64,
    pub alpha: f64,
    pub n_train: usize,
    pub trials: usize,
    pub seeds: Seeds,
    #[serde(default)]
    pub sigma_source: SigmaSource,
    /// Trial whose residuals and intervals are exported.
    #[serde(default)]
    pub qq_trial: usize,
    /// Extra factor on the standardized residuals. `√2` gives the figure
    /// convention of the original experiments.
    #[serde(default = "one")]
    pub qq_multiplier: f64,
    /// Keep only the rows of the interval table with the largest `|x*_i|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_top: Option<usize>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

fn one() -> f64 {
    1.0
}

impl ExperimentConfig {
    /// `N = 256`, `K = 8`, 2000 training samples, 200 trials.
    pub fn desk(ensemble: Ensemble, m: usize) -> Self {
        ExperimentConfig {
            ensemble,
            n: 256,
            m,
            k: 8,
            p: 0.1,
            snr_db: 20.0,
            alpha: 0.05,
            n_train: 2000,
            trials: 200,
            seeds: Seeds {
                matrix: 1,
                dataset: 2,
                trials: 3,
            },
            sigma_source: SigmaSource::Known,
            qq_trial: 0,
            qq_multiplier: 1.0,
            ci_top: None,
            output_dir: PathBuf::from("out"),
            train: TrainConfig::default(),
        }
    }

    /// Full-scale protocol: `N = 1000` (1024 for Hadamard), `K = 16`,
    /// 500 trials and the long stopping rule. Hours of single-core training.
    pub fn full(ensemble: Ensemble, m: usize) -> Self {
        ExperimentConfig {
            n: match ensemble {
                Ensemble::Gaussian => 1000,
                Ensemble::HadamardSubsampled => 1024,
            },
            k: 16,
            n_train: 10_000,
            trials: 500,
            train: TrainConfig::full(),
            ..Self::desk(ensemble, m)
        }
    }

    pub fn is_large(&self) -> bool {
        self.n >= 1000 || self.train.max_stage_iters > TrainConfig::default().max_stage_iters
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.m > self.n {
            return Err(Error::dim(format!(
                "need 0 < m <= N, got m = {}, N = {}",
                self.m, self.n
            )));
        }
        if self.ensemble == Ensemble::HadamardSubsampled && !self.n.is_power_of_two() {
            return Err(Error::dim(format!(
                "Hadamard ensemble needs N to be a power of two, got {}",
                self.n
            )));
        }
        if self.k == 0 {
            return Err(Error::param("K must be at least 1"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::param("p must lie in (0, 1)"));
        }
        if self.snr_db.is_nan() {
            return Err(Error::param("snr_db is NaN"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::param("alpha must lie in (0, 1)"));
        }
        if self.trials == 0 {
            return Err(Error::param("trials must be at least 1"));
        }
        if self.qq_trial >= self.trials {
            return Err(Error::param("qq_trial must index one of the trials"));
        }
        if !(self.qq_multiplier > 0.0 && self.qq_multiplier.is_finite()) {
            return Err(Error::param("qq_multiplier must be positive"));
        }
        if self.ci_top == Some(0) {
            return Err(Error::param("ci_top must be positive"));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of every setting that affects results; `output_dir` is left out.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(&Sha256::digest(canonical.to_toml().as_bytes())[..8])
    }
}

/// What gets debiased in each trial.
#[derive(Clone, Copy, Debug)]
pub enum Estimator<'a> {
    /// Final layer of a trained network.
    Lista(&'a ListaParams),
    /// `x^k = x*`, isolating the Gaussian term.
    Oracle,
}

impl Estimator<'_> {
    fn label(&self) -> &'static str {
        match self {
            Estimator::Lista(_) => "lista",
            Estimator::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub noise_seed: u64,
    pub sigma: f64,
    pub sigma_hat: f64,
    pub h: f64,
    pub h_s: Option<f64>,
    pub support_size: usize,
    pub nmse_db: f64,
    pub debiased_nmse_db: f64,
    pub r_inf: f64,
    pub remainder_threshold: f64,
    pub remainder_exceeded: bool,
    pub noise_projection: Option<f64>,
    pub theta0: Option<f64>,
    pub theta0_exceeded: Option<bool>,
}

const TRIAL_HEADER: [&str; 15] = [
    "trial",
    "noise_seed",
    "sigma",
    "sigma_hat",
    "h",
    "h_s",
    "support_size",
    "nmse_db",
    "debiased_nmse_db",
    "r_inf",
    "remainder_threshold",
    "remainder_exceeded",
    "noise_projection",
    "theta0",
    "theta0_exceeded",
];

/// Per-layer NMSE of the network iterates in one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub trial: usize,
    pub layer: usize,
    pub nmse_db: f64,
}

const LAYER_HEADER: [&str; 3] = ["trial", "layer", "nmse_db"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QqPair {
    pub theoretical: f64,
    pub empirical: f64,
}

const QQ_HEADER: [&str; 2] = ["theoretical", "empirical"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiRow {
    pub index: usize,
    pub center: f64,
    pub lo: f64,
    pub hi: f64,
    pub truth: f64,
    pub hit: bool,
}

const CI_HEADER: [&str; 6] = ["index", "center", "lo", "hi", "truth", "hit"];

const TRACE_HEADER: [&str; 4] = ["stage", "phase", "update", "nmse_db"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_secs: f64,
    pub trials_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub estimator: String,
    pub config_hash: String,
    pub trials: usize,
    pub mean_h: f64,
    /// Absent when no trial has a nonempty support.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_h_s: Option<f64>,
    pub mean_nmse_db: f64,
    pub remainder_exceedance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0_exceedance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qq_correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub summary: Summary,
    pub records: Vec<TrialRecord>,
    pub layers: Vec<LayerRecord>,
    pub qq: Vec<QqPair>,
    pub ci: Vec<CiRow>,
    pub training: Vec<NmseRecord>,
    pub timing: Timing,
}

impl AggregateReport {
    pub fn mean_h(&self) -> f64 {
        self.summary.mean_h
    }

    pub fn mean_h_s(&self) -> Option<f64> {
        self.summary.mean_h_s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn summarize(estimator: &str, config_hash: String, records: &[TrialRecord], qq: &[QqPair]) -> Summary {
    let theta0_flags: Vec<bool> = records.iter().filter_map(|r| r.theta0_exceeded).collect();
    Summary {
        estimator: estimator.to_owned(),
        config_hash,
        trials: records.len(),
        mean_h: mean(records.iter().map(|r| r.h)).unwrap_or(f64::NAN),
        mean_h_s: mean(records.iter().filter_map(|r| r.h_s)),
        mean_nmse_db: mean(records.iter().map(|r| r.nmse_db)).unwrap_or(f64::NAN),
        remainder_exceedance: mean(records.iter().map(|r| r.remainder_exceeded as u8 as f64))
            .unwrap_or(f64::NAN),
        theta0_exceedance: mean(theta0_flags.iter().map(|&e| e as u8 as f64)),
        qq_correlation: (qq.len() >= 2).then(|| {
            let pairs: Vec<(f64, f64)> = qq.iter().map(|q| (q.theoretical, q.empirical)).collect();
            qq_correlation(&pairs)
        }),
    }
}

pub fn build_matrix(cfg: &ExperimentConfig) -> Result<MeasurementMatrix> {
    match cfg.ensemble {
        Ensemble::Gaussian => gen_gaussian(cfg.m, cfg.n, cfg.seeds.matrix),
        Ensemble::HadamardSubsampled => MeasurementMatrix::hadamard(cfg.n, cfg.m, cfg.seeds.matrix),
    }
}

/// Generates the training set from `seeds.dataset` and trains a depth-`K`
/// network on it.
pub fn train_model(cfg: &ExperimentConfig, a: &MeasurementMatrix) -> Result<TrainOutcome> {
    let data = gen_dataset(a, cfg.n_train, cfg.p, cfg.snr_db, cfg.seeds.dataset)?;
    crate::lista::train_stagewise(a, &data, &cfg.train, cfg.k)
}

/// The fixed ground truth shared by all trials, drawn like a training
/// signal. Empty supports are redrawn.
pub fn ground_truth(cfg: &ExperimentConfig) -> Result<SparseSignal> {
    for attempt in 0..GROUND_TRUTH_ATTEMPTS {
        let x = gen_signal(
            cfg.n,
            cfg.p,
            seed::derive(cfg.seeds.trials, Stream::GroundTruth, attempt),
        )?;
        if x.s0() > 0 {
            return Ok(x);
        }
    }
    Err(Error::DegenerateSignal(format!(
        "no nonempty support in {GROUND_TRUTH_ATTEMPTS} draws at p = {}",
        cfg.p
    )))
}

pub fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    seed::derive(cfg.seeds.trials, Stream::Trial, trial as u64)
}

struct TrialOutput {
    record: TrialRecord,
    layers: Vec<LayerRecord>,
    qq: Vec<QqPair>,
    ci: Vec<CiRow>,
}

fn run_trial(
    cfg: &ExperimentConfig,
    a: &MeasurementMatrix,
    estimator: Estimator<'_>,
    x_star: &SparseSignal,
    cov_diag: &Array1<f64>,
    trial: usize,
) -> Result<TrialOutput> {
    let noise_seed = trial_seed(cfg, trial);
    let obs = observe(a, x_star, cfg.snr_db, noise_seed)?;
    let xs = x_star.values.view();
    let (x_k, layers) = match estimator {
        Estimator::Lista(params) => {
            let iterates = forward(params, a, obs.b.view(), None)?;
            let layers = iterates
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    Ok(LayerRecord {
                        trial,
                        layer: i + 1,
                        nmse_db: nmse(x.view(), xs)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (iterates.last().expect("depth >= 1").clone(), layers)
        }
        Estimator::Oracle => (x_star.values.clone(), Vec::new()),
    };
    let sigma_hat = match cfg.sigma_source {
        SigmaSource::Known => obs.sigma,
        SigmaSource::Residual => residual_sigma(a, obs.b.view(), x_k.view())?,
    };
    let est = debias_with(x_k.view(), a, obs.b.view(), cfg.k, sigma_hat, cov_diag.clone());
    let ci = confidence_intervals(&est, cfg.alpha, sigma_hat)?;
    let rates = hitrates(&ci, x_star)?;

    let eps = &obs.b - &a.apply(xs);
    let parts = decompose(est.x_u.view(), x_k.view(), xs, a, eps.view());
    let rem = remainder_diag(
        parts.r_term.view(),
        x_k.view(),
        xs,
        a.entry_bound(),
        a.cols(),
        a.rows(),
        None,
    );
    let proj = match estimator {
        Estimator::Lista(params) if obs.sigma > 0.0 => {
            Some(theta0_diag(eps.view(), params.weights.last().expect("depth >= 1"), obs.sigma))
        }
        _ => None,
    };

    let mut qq = Vec::new();
    let mut rows = Vec::new();
    if trial == cfg.qq_trial {
        if obs.sigma > 0.0 {
            let z = standardize(&est, xs, obs.sigma, cfg.qq_multiplier)?;
            qq = qq_data(z.view())?
                .into_iter()
                .map(|(t, e)| QqPair {
                    theoretical: t,
                    empirical: e,
                })
                .collect();
        }
        rows = ci_table(&ci, x_star, cfg.ci_top);
    }

    Ok(TrialOutput {
        record: TrialRecord {
            trial,
            noise_seed,
            sigma: obs.sigma,
            sigma_hat,
            h: rates.h,
            h_s: rates.h_s,
            support_size: rates.support_size,
            nmse_db: nmse(x_k.view(), xs)?,
            debiased_nmse_db: nmse(est.x_u.view(), xs)?,
            r_inf: rem.r_inf,
            remainder_threshold: rem.threshold,
            remainder_exceeded: rem.exceeded,
            noise_projection: proj.map(|d| d.statistic),
            theta0: proj.map(|d| d.theta0),
            theta0_exceeded: proj.map(|d| d.exceeded),
        },
        layers,
        qq,
        ci: rows,
    })
}

/// Interval table, optionally cut to the `top` components with the largest
/// `|x*_i|` (ties broken by index).
pub fn ci_table(
    ci: &crate::uq::ConfidenceIntervals,
    x_star: &SparseSignal,
    top: Option<usize>,
) -> Vec<CiRow> {
    let mut order: Vec<usize> = (0..x_star.len()).collect();
    if let Some(top) = top {
        order.sort_by(|&i, &j| {
            x_star.values[j]
                .abs()
                .total_cmp(&x_star.values[i].abs())
                .then(i.cmp(&j))
        });
        order.truncate(top);
    }
    order
        .into_iter()
        .map(|i| CiRow {
            index: i,
            center: ci.center[i],
            lo: ci.lo[i],
            hi: ci.hi[i],
            truth: x_star.values[i],
            hit: ci.contains(i, x_star.values[i]),
        })
        .collect()
}

/// Runs every trial in order. On failure the report holds the trials that
/// completed and the error names the failing trial.
pub fn run_trials_partial(
    cfg: &ExperimentConfig,
    a: &MeasurementMatrix,
    estimator: Estimator<'_>,
) -> (AggregateReport, Option<Error>) {
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.trials);
    let mut layers = Vec::new();
    let mut qq = Vec::new();
    let mut ci = Vec::new();
    let mut failure = None;
    match ground_truth(cfg) {
        Err(e) => failure = Some(e),
        Ok(x_star) => {
            let cov_diag = sample_covariance(a, false).diagonal;
            for trial in 0..cfg.trials {
                match run_trial(cfg, a, estimator, &x_star, &cov_diag, trial) {
                    Ok(out) => {
                        records.push(out.record);
                        layers.extend(out.layers);
                        if trial == cfg.qq_trial {
                            qq = out.qq;
                            ci = out.ci;
                        }
                    }
                    Err(e) => {
                        failure = Some(Error::Trial {
                            trial,
                            source: Box::new(e),
                        });
                        break;
                    }
                }
            }
        }
    }
    let report = AggregateReport {
        summary: summarize(estimator.label(), cfg.hash(), &records, &qq),
        records,
        layers,
        qq,
        ci,
        training: Vec::new(),
        timing: Timing {
            train_secs: 0.0,
            trials_secs: start.elapsed().as_secs_f64(),
        },
    };
    (report, failure)
}

pub fn run_trials(
    cfg: &ExperimentConfig,
    a: &MeasurementMatrix,
    estimator: Estimator<'_>,
) -> Result<AggregateReport> {
    cfg.validate()?;
    match run_trials_partial(cfg, a, estimator) {
        (report, None) => Ok(report),
        (_, Some(e)) => Err(e),
    }
}

/// Trains on the configured dataset, runs all trials and writes the report
/// to `cfg.output_dir`. Completed trials are written even when a later one
/// fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let a = build_matrix(cfg)?;
    let start = Instant::now();
    let trained = train_model(cfg, &a)?;
    let train_secs = start.elapsed().as_secs_f64();
    finish(
        cfg,
        &a,
        Estimator::Lista(&trained.params),
        trained.trace,
        train_secs,
    )
}

/// [`run_experiment`] with `x^k := x*`; no training.
pub fn run_oracle_coverage(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let a = build_matrix(cfg)?;
    finish(cfg, &a, Estimator::Oracle, Vec::new(), 0.0)
}

/// Runs the trials for an already trained network and writes the report.
pub fn run_with_params(
    cfg: &ExperimentConfig,
    a: &MeasurementMatrix,
    params: &ListaParams,
) -> Result<AggregateReport> {
    cfg.validate()?;
    params.check_against(a)?;
    finish(cfg, a, Estimator::Lista(params), Vec::new(), 0.0)
}

fn finish(
    cfg: &ExperimentConfig,
    a: &MeasurementMatrix,
    estimator: Estimator<'_>,
    training: Vec<NmseRecord>,
    train_secs: f64,
) -> Result<AggregateReport> {
    let (mut report, failure) = run_trials_partial(cfg, a, estimator);
    let trained = !training.is_empty();
    report.training = training;
    report.timing.train_secs = train_secs;
    let model = match estimator {
        Estimator::Lista(params) if trained => Some(params),
        _ => None,
    };
    export_with(&report, cfg, &cfg.output_dir, model)?;
    match failure {
        None => Ok(report),
        Some(e) => Err(e),
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const TIMING_FILE: &str = "timing.toml";
pub const TRIALS_FILE: &str = "trials.csv";
pub const LAYERS_FILE: &str = "layers.csv";
pub const QQ_FILE: &str = "qq.csv";
pub const CI_FILE: &str = "ci.csv";
pub const TRACE_FILE: &str = "nmse_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
/// Trained network, written by [`run_experiment`].
pub const MODEL_FILE: &str = "model.json";

/// Comma-separated record files that are byte-identical across runs of the
/// same configuration.
pub const RECORD_FILES: [&str; 6] = [TRIALS_FILE, LAYERS_FILE, QQ_FILE, CI_FILE, TRACE_FILE, SUMMARY_FILE];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

fn csv_bytes<T: Serialize>(header: &[&str], rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Parameter(format!("record serialization failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.serialize(row).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::Parameter(format!("record serialization failed: {e}")))
}

/// Adds `name` to `dir` and to the manifest.
fn write_file(dir: &Path, name: &str, bytes: &[u8], manifest: &mut Vec<ManifestEntry>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    manifest.push(ManifestEntry {
        name: name.to_owned(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(bytes)),
    });
    Ok(())
}

/// Writes the config echo, record files, summary, timing and a manifest of
/// everything written.
pub fn export_report(report: &AggregateReport, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    export_with(report, cfg, dir, None)
}

fn export_with(
    report: &AggregateReport,
    cfg: &ExperimentConfig,
    dir: &Path,
    model: Option<&ListaParams>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    if let Some(params) = model {
        let path = dir.join(MODEL_FILE);
        params.save(&path, &cfg.train.hash())?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            name: MODEL_FILE.to_owned(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    write_file(dir, CONFIG_FILE, cfg.to_toml().as_bytes(), &mut entries)?;
    write_file(dir, TRIALS_FILE, &csv_bytes(&TRIAL_HEADER, &report.records)?, &mut entries)?;
    write_file(dir, LAYERS_FILE, &csv_bytes(&LAYER_HEADER, &report.layers)?, &mut entries)?;
    write_file(dir, QQ_FILE, &csv_bytes(&QQ_HEADER, &report.qq)?, &mut entries)?;
    write_file(dir, CI_FILE, &csv_bytes(&CI_HEADER, &report.ci)?, &mut entries)?;
    write_file(dir, TRACE_FILE, &csv_bytes(&TRACE_HEADER, &report.training)?, &mut entries)?;
    let summary = toml::to_string(&report.summary).expect("summary serializes");
    write_file(dir, SUMMARY_FILE, summary.as_bytes(), &mut entries)?;
    let timing = toml::to_string(&report.timing).expect("timing serializes");
    write_file(dir, TIMING_FILE, timing.as_bytes(), &mut entries)?;
    let manifest = Manifest {
        config_hash: report.summary.config_hash.clone(),
        files: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes a training trace as comma-separated records.
pub fn write_trace(path: &Path, trace: &[NmseRecord]) -> Result<()> {
    let bytes = csv_bytes(&TRACE_HEADER, trace)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Records `names` (files in `dir`) in the directory manifest, replacing
/// earlier entries of the same name.
pub fn write_manifest(dir: &Path, config_hash: &str, names: &[&str]) -> Result<Manifest> {
    let mut manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(Error::Io { .. }) => Manifest {
            config_hash: config_hash.to_owned(),
            files: Vec::new(),
        },
        Err(e) => return Err(e),
    };
    manifest.config_hash = config_hash.to_owned();
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        manifest.files.retain(|f| f.name != *name);
        manifest.files.push(ManifestEntry {
            name: (*name).to_owned(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    manifest.files.sort_by(|a, b| a.name.cmp(&b.name));
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Names of manifest entries whose file is missing or has changed.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let manifest = read_manifest(dir)?;
    Ok(manifest
        .files
        .iter()
        .filter(|f| match fs::read(dir.join(&f.name)) {
            Ok(bytes) => hex::encode(Sha256::digest(&bytes)) != f.sha256,
            Err(_) => true,
        })
        .map(|f| f.name.clone())
        .collect())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path, e))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e))
}

/// Parses a directory written by [`export_report`].
pub fn read_report(dir: &Path) -> Result<AggregateReport> {
    Ok(AggregateReport {
        summary: read_toml(&dir.join(SUMMARY_FILE))?,
        records: read_csv(&dir.join(TRIALS_FILE))?,
        layers: read_csv(&dir.join(LAYERS_FILE))?,
        qq: read_csv(&dir.join(QQ_FILE))?,
        ci: read_csv(&dir.join(CI_FILE))?,
        training: read_csv(&dir.join(TRACE_FILE))?,
        timing: read_toml(&dir.join(TIMING_FILE))?,
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_toml(&dir.join(MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            n: 64,
            m: 32,
            k: 2,
            n_train: 40,
            trials: 5,
            train: TrainConfig {
                patience: 3,
                max_stage_iters: 6,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::desk(Ensemble::Gaussian, 32)
        }
    }

    #[test]
    fn config_toml_round_trip() {
        for cfg in [small(), ExperimentConfig::full(Ensemble::HadamardSubsampled, 600)] {
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
        let mut cfg = small();
        cfg.snr_db = f64::INFINITY;
        cfg.ci_top = Some(50);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{}\nbogus = 1\n", small().to_toml());
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = small().to_toml().replace("[train]", "[train]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = small();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..small()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { alpha: 0.1, ..small() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation() {
        assert!(small().validate().is_ok());
        let bad = [
            ExperimentConfig { m: 65, ..small() },
            ExperimentConfig { trials: 0, ..small() },
            ExperimentConfig { alpha: 1.0, ..small() },
            ExperimentConfig { qq_trial: 5, ..small() },
            ExperimentConfig {
                ensemble: Ensemble::HadamardSubsampled,
                n: 100,
                ..small()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert_eq!(
            ExperimentConfig {
                ensemble: Ensemble::HadamardSubsampled,
                n: 100,
                ..small()
            }
            .validate()
            .unwrap_err()
            .category(),
            "dimension"
        );
    }

    #[test]
    fn ground_truth_is_nonempty_and_fixed() {
        let cfg = small();
        let x = ground_truth(&cfg).unwrap();
        assert!(x.s0() > 0);
        assert_eq!(x, ground_truth(&cfg).unwrap());
    }

    #[test]
    fn oracle_noiseless_covers_everything() {
        let cfg = ExperimentConfig {
            snr_db: f64::INFINITY,
            ..small()
        };
        let a = build_matrix(&cfg).unwrap();
        let rep = run_trials(&cfg, &a, Estimator::Oracle).unwrap();
        assert_eq!(rep.summary.mean_h, 1.0);
        assert_eq!(rep.summary.mean_h_s, Some(1.0));
        assert!(rep.qq.is_empty());
    }

    #[test]
    fn oracle_median_interval() {
        let cfg = ExperimentConfig {
            alpha: 0.5,
            trials: 200,
            n: 256,
            m: 128,
            ..small()
        };
        let a = build_matrix(&cfg).unwrap();
        let rep = run_trials(&cfg, &a, Estimator::Oracle).unwrap();
        // 51200 indicators: binomial sd ≈ 0.0022
        assert!((rep.summary.mean_h - 0.5).abs() < 0.015, "{}", rep.summary.mean_h);
    }

    #[test]
    fn single_trial_and_summary_means() {
        let cfg = ExperimentConfig { trials: 1, ..small() };
        let a = build_matrix(&cfg).unwrap();
        let params = crate::lista::init_from_ista(&a, crate::ista::spectral_bound(&a), 0.5, cfg.k).unwrap();
        let rep = run_trials(&cfg, &a, Estimator::Lista(&params)).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.summary.mean_h, rep.records[0].h);
        assert_eq!(rep.layers.len(), cfg.k);
        assert_eq!(rep.qq.len(), cfg.n);
        assert_eq!(rep.ci.len(), cfg.n);
        assert!(rep.records[0].theta0.is_some());
    }

    #[test]
    fn trials_depend_only_on_their_index() {
        let cfg = small();
        let a = build_matrix(&cfg).unwrap();
        let full = run_trials(&cfg, &a, Estimator::Oracle).unwrap();
        let x = ground_truth(&cfg).unwrap();
        let cov = sample_covariance(&a, false).diagonal;
        for t in (0..cfg.trials).rev() {
            let one = run_trial(&cfg, &a, Estimator::Oracle, &x, &cov, t).unwrap();
            assert_eq!(one.record, full.records[t]);
        }
    }

    #[test]
    fn ci_filter_keeps_largest() {
        let cfg = ExperimentConfig {
            ci_top: Some(50),
            ..small()
        };
        let a = build_matrix(&cfg).unwrap();
        let rep = run_trials(&cfg, &a, Estimator::Oracle).unwrap();
        assert_eq!(rep.ci.len(), 50);
        for w in rep.ci.windows(2) {
            assert!(w[0].truth.abs() >= w[1].truth.abs());
        }
        let cfg = ExperimentConfig {
            ci_top: Some(500),
            ..small()
        };
        assert_eq!(run_trials(&cfg, &a, Estimator::Oracle).unwrap().ci.len(), cfg.n);
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            output_dir: dir.path().to_owned(),
            ..small()
        };
        let rep = run_experiment(&cfg).unwrap();
        assert!(!rep.training.is_empty());
        let back = read_report(dir.path()).unwrap();
        assert_eq!(back, rep);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.config_hash, cfg.hash());
        for f in RECORD_FILES {
            assert!(manifest.files.iter().any(|e| e.name == f), "{f}");
        }
        let (model, hash) = ListaParams::load(&dir.path().join(MODEL_FILE)).unwrap();
        assert_eq!(model.depth(), cfg.k);
        assert_eq!(hash, cfg.train.hash());
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join(QQ_FILE), "tampered").unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), vec![QQ_FILE.to_owned()]);
        let echo = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(echo, cfg);
    }

    #[test]
    fn empty_report_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let rep = AggregateReport {
            summary: summarize("oracle", cfg.hash(), &[], &[]),
            records: Vec::new(),
            layers: Vec::new(),
            qq: Vec::new(),
            ci: Vec::new(),
            training: Vec::new(),
            timing: Timing::default(),
        };
        export_report(&rep, &cfg, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(TRIALS_FILE)).unwrap();
        assert_eq!(text, format!("{}\n", TRIAL_HEADER.join(",")));
        assert!(read_csv::<TrialRecord>(&dir.path().join(TRIALS_FILE)).unwrap().is_empty());
    }

    #[test]
    fn headers_match_serialized_fields() {
        fn serde_header<T: Serialize>(row: &T) -> String {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.serialize(row).unwrap();
            let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
            text.lines().next().unwrap().to_owned()
        }
        let cfg = ExperimentConfig { trials: 1, ..small() };
        let a = build_matrix(&cfg).unwrap();
        let params = crate::lista::init_from_ista(&a, crate::ista::spectral_bound(&a), 0.5, 1).unwrap();
        let rep = run_trials(&cfg, &a, Estimator::Lista(&params)).unwrap();
        assert_eq!(serde_header(&rep.records[0]), TRIAL_HEADER.join(","));
        assert_eq!(serde_header(&rep.layers[0]), LAYER_HEADER.join(","));
        assert_eq!(serde_header(&rep.qq[0]), QQ_HEADER.join(","));
        assert_eq!(serde_header(&rep.ci[0]), CI_HEADER.join(","));
        let rec = NmseRecord {
            stage: 1,
            phase: crate::lista::Phase::FineTune1,
            update: 0,
            nmse_db: -1.0,
        };
        assert_eq!(serde_header(&rec), TRACE_HEADER.join(","));
    }

    #[test]
    fn failing_trial_is_named_and_flushed() {
        let dir = tempfile::tempdir().unwrap();
        // a dense iterate leaves no degrees of freedom for the plug-in noise estimate
        let cfg = ExperimentConfig {
            output_dir: dir.path().to_owned(),
            sigma_source: SigmaSource::Residual,
            ..small()
        };
        let a = build_matrix(&cfg).unwrap();
        let w = ndarray::Array2::from_elem((cfg.m, cfg.n), 1.0);
        let params = ListaParams::new(vec![w], vec![crate::lista::MIN_THRESHOLD]).unwrap();
        let err = run_with_params(&cfg, &a, &params).unwrap_err();
        match err {
            Error::Trial { trial, .. } => assert_eq!(trial, 0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(dir.path().join(TRIALS_FILE).exists());
    }
}
