//! Ensemble smoothers for parameter estimation in nonlinear models with
//! multimodal posteriors: the global ensemble smoother, its iterative
//! variant, and the iterative local updating ensemble smoother, together with
//! the forward models and harness used to evaluate them.

pub mod error;
pub mod experiment;
pub mod ilues;
pub mod mcmc;
pub mod models;
pub mod priors;
pub mod random_field;
pub mod rng;
pub mod smoother;
pub mod stats;

pub use error::{Error, Result};
pub use ilues::{ilues_iterate, IluesConfig, IluesRunRecord, LocalEnsembleIndex, ScoreBreakdown, Selection};
pub use models::ForwardModel;
pub use priors::{BoundsPolicy, Marginal, PriorSpec};
pub use smoother::{iterative_es, EsConfig, IterationRecord, RunRecord};
pub use stats::{Ensemble, Measurement, PredictionSet};
