//! Stage-wise training.
//!
//! For stage `τ = 1..K` a fresh layer is appended with the ISTA
//! initialization, then
//!
//! 1. only layer `τ` is trained at rate `α₀`,
//! 2. all layers `1..τ` are fine-tuned at `α₁ = 0.2 α₀`, then `α₂ = 0.02 α₀`,
//! 3. every learning multiplier of layers `1..τ` is multiplied by `γ`.
//!
//! Each phase runs until the validation NMSE has not improved for
//! `patience` updates or `max_stage_iters` updates have been made, and ends
//! by restoring the best parameters it saw.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{adam_update, AdamState, Multipliers};
use super::grad::backward_from;
use super::{dataset_range, forward_batch, init_from_ista, nmse_batch, Batch, ListaParams};
use crate::datagen::Dataset;
use crate::ista::spectral_bound;
use crate::measurement::MeasurementMatrix;
use crate::seed;
use crate::{Error, Result};

/// Full-scale stopping values; the defaults are scaled down for desk runs.
pub const FULL_PATIENCE: usize = 4000;
pub const FULL_MAX_STAGE_ITERS: usize = 200_000;

/// Validation NMSE above which a phase is declared divergent.
const DIVERGENCE_DB: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha0: f64,
    /// `α₁ / α₀` and `α₂ / α₀`.
    pub rate_decays: [f64; 2],
    pub gamma: f64,
    pub patience: usize,
    pub max_stage_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Updates between validation checks.
    pub eval_every: usize,
    /// LASSO regularization (scaled objective) for the ISTA initialization;
    /// the layer threshold is `init_lambda · m / μ`.
    pub init_lambda: f64,
    /// Extra factor on the weight learning rate. `None` uses `1/√m`, which
    /// makes the Adam steps equal to those taken on a unit-column-norm design.
    pub weight_rate_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha0: 5e-4,
            rate_decays: [0.2, 0.02],
            gamma: 0.3,
            patience: 400,
            max_stage_iters: 5000,
            batch_size: 64,
            seed: 0,
            validation_fraction: 0.1,
            eval_every: 5,
            init_lambda: 0.4,
            weight_rate_scale: None,
        }
    }
}

impl TrainConfig {
    /// Full-scale stopping rule.
    pub fn full() -> Self {
        TrainConfig {
            patience: FULL_PATIENCE,
            max_stage_iters: FULL_MAX_STAGE_ITERS,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::param(msg.to_owned()));
        if !(self.alpha0 > 0.0) {
            return bad("alpha0 must be positive");
        }
        if self.rate_decays.iter().any(|d| !(*d > 0.0)) {
            return bad("rate decays must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.patience > self.max_stage_iters {
            return bad("patience must not exceed max_stage_iters");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.init_lambda > 0.0) {
            return bad("init_lambda must be positive");
        }
        if matches!(self.weight_rate_scale, Some(s) if !(s > 0.0)) {
            return bad("weight_rate_scale must be positive");
        }
        Ok(())
    }

    /// Short hash of the configuration, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Layer,
    FineTune1,
    FineTune2,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Layer => "layer",
            Phase::FineTune1 => "fine-tune-1",
            Phase::FineTune2 => "fine-tune-2",
        }
    }
}

/// One validation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmseRecord {
    pub stage: usize,
    pub phase: Phase,
    /// Updates made in this phase when the check ran.
    pub update: usize,
    pub nmse_db: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ListaParams,
    pub trace: Vec<NmseRecord>,
    /// Best validation NMSE at the end of each stage.
    pub stage_best_db: Vec<f64>,
    /// Validation NMSE of the untrained, ISTA-initialized depth-`K` network.
    pub init_nmse_db: f64,
    pub threshold: f64,
    pub mu: f64,
    pub updates: usize,
}

impl TrainOutcome {
    /// Running minimum of `stage_best_db`.
    pub fn best_so_far_db(&self) -> Vec<f64> {
        self.stage_best_db
            .iter()
            .scan(f64::INFINITY, |best, &v| {
                *best = best.min(v);
                Some(*best)
            })
            .collect()
    }
}

struct Trainer<'a> {
    a: &'a MeasurementMatrix,
    data: &'a Dataset,
    train_len: usize,
    val: Batch,
    cfg: &'a TrainConfig,
    weight_scale: f64,
    rng: rand_chacha::ChaCha8Rng,
    trace: Vec<NmseRecord>,
    updates: usize,
}

impl Trainer<'_> {
    fn validation_nmse(&self, params: &ListaParams) -> Result<f64> {
        nmse_batch(&forward_batch(params, self.a, &self.val.b), &self.val.x_star)
    }

    fn sample_batch(&mut self) -> Batch {
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.random_range(0..self.train_len))
            .collect();
        Batch::from_dataset(self.data, &idx)
    }

    /// Runs one phase in place and returns its best validation NMSE.
    fn phase(
        &mut self,
        params: &mut ListaParams,
        stage: usize,
        phase: Phase,
        first: usize,
        rate: f64,
        multipliers: &Multipliers,
    ) -> Result<f64> {
        let mut best = self.validation_nmse(params)?;
        self.trace.push(NmseRecord {
            stage,
            phase,
            update: 0,
            nmse_db: best,
        });
        if self.cfg.patience == 0 {
            return Ok(best);
        }
        let mut best_params = params.clone();
        let mut state = AdamState::new(params);
        let mut stale = 0;
        for update in 1..=self.cfg.max_stage_iters {
            let batch = self.sample_batch();
            let grads = backward_from(params, self.a, &batch, first)?;
            adam_update(&mut state, params, &grads, rate, self.weight_scale, multipliers);
            self.updates += 1;
            if update % self.cfg.eval_every != 0 && update != self.cfg.max_stage_iters {
                continue;
            }
            let nmse = self.validation_nmse(params)?;
            self.trace.push(NmseRecord {
                stage,
                phase,
                update,
                nmse_db: nmse,
            });
            if !(nmse <= DIVERGENCE_DB) {
                return Err(Error::Divergence {
                    stage,
                    phase: phase.label(),
                    nmse_db: nmse,
                });
            }
            if nmse < best {
                best = nmse;
                best_params.clone_from(params);
                stale = 0;
            } else {
                stale += self.cfg.eval_every;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        *params = best_params;
        Ok(best)
    }
}

/// Trains a depth-`k` LISTA-CP network on `dataset`, the last
/// `validation_fraction` of which is held out for the stopping rule.
pub fn train_stagewise(
    a: &MeasurementMatrix,
    dataset: &Dataset,
    cfg: &TrainConfig,
    k: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if k == 0 {
        return Err(Error::param("network depth K must be at least 1"));
    }
    if dataset.n != a.cols() || dataset.m != a.rows() {
        return Err(Error::dim("dataset does not match the measurement matrix"));
    }
    if dataset.matrix_ref != a.fingerprint() {
        return Err(Error::param(
            "dataset was generated from a different measurement matrix",
        ));
    }
    let n = dataset.len();
    let val_len = ((n as f64 * cfg.validation_fraction).round() as usize).max(1);
    if val_len >= n {
        return Err(Error::param(format!(
            "dataset of {n} samples is too small for a validation split"
        )));
    }
    let train_len = n - val_len;

    let mu = spectral_bound(a);
    let threshold = cfg.init_lambda * a.rows() as f64 / mu;
    let layer = init_from_ista(a, mu, threshold, 1)?;
    let weight_scale = cfg
        .weight_rate_scale
        .unwrap_or(1.0 / (a.rows() as f64).sqrt());

    let mut trainer = Trainer {
        a,
        data: dataset,
        train_len,
        val: dataset_range(dataset, train_len, n),
        cfg,
        weight_scale,
        rng: seed::rng(seed::derive(cfg.seed, seed::Stream::Training, 0)),
        trace: Vec::new(),
        updates: 0,
    };
    let init_nmse_db = trainer.validation_nmse(&init_from_ista(a, mu, threshold, k)?)?;

    let mut params = ListaParams::new(Vec::new(), Vec::new())?;
    let mut multipliers = Multipliers::ones(0);
    let mut stage_best_db = Vec::with_capacity(k);
    let [d1, d2] = cfg.rate_decays;
    for stage in 1..=k {
        params.weights.push(layer.weights[0].clone());
        params.thresholds.push(threshold);
        multipliers.push_layer();
        let last = stage - 1;

        trainer.phase(&mut params, stage, Phase::Layer, last, cfg.alpha0, &multipliers)?;
        trainer.phase(&mut params, stage, Phase::FineTune1, 0, cfg.alpha0 * d1, &multipliers)?;
        let best =
            trainer.phase(&mut params, stage, Phase::FineTune2, 0, cfg.alpha0 * d2, &multipliers)?;
        stage_best_db.push(best);
        multipliers.decay(cfg.gamma);
    }

    Ok(TrainOutcome {
        params,
        trace: trainer.trace,
        stage_best_db,
        init_nmse_db,
        threshold,
        mu,
        updates: trainer.updates,
    })
}
