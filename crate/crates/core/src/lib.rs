//! Uncertainty-aware place recognition: a metric-learning teacher, a
//! self-taught student with a variance head, baselines and evaluation.

pub mod compare;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod mining;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod synthdata;
pub mod train;
pub mod types;

pub use config::{ExperimentConfig, LossKind};
pub use dataset::{Dataset, Split};
pub use error::{Error, Result};
pub use types::{EmbeddingDistribution, GeoTag, PairLabel, PlaceSample};
