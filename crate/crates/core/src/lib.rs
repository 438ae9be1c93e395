//! Fairness-aware insurance pricing.
// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dependence;
pub mod error;
pub mod fairmetrics;
pub mod fairtrain;
pub mod mlp;
pub mod models;
pub mod numkit;
pub mod persist;
pub mod pricing;

pub use error::{Error, Result};
pub use numkit::{Matrix, Rng};
pub use data::{Portfolio, SchemaConfig, TableEncoder};
pub use dependence::{HgrEstimate, HgrEstimator};
pub use fairmetrics::FairnessReport;
pub use fairtrain::{FairTrainConfig, Objective, PenaltyKind};
pub use models::{Task, TrainConfig};
pub use pricing::{Evaluation, PricingModel};
