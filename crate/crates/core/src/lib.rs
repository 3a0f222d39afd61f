//! Sparse recovery with unrolled LISTA networks, debiasing, and
//! component-wise confidence intervals.

pub mod container;
pub mod datagen;
pub mod debias;
pub mod error;
pub mod harness;
pub mod ista;
pub mod lista;
pub mod measurement;
pub mod seed;
pub mod uq;

pub use datagen::{Dataset, Observation, SparseSignal};
pub use debias::DebiasedEstimate;
pub use error::{Error, Result};
pub use harness::{AggregateReport, ExperimentConfig};
pub use lista::{ListaParams, TrainConfig};
pub use measurement::{Ensemble, MeasurementMatrix};
pub use uq::{ConfidenceIntervals, HitrateReport};
