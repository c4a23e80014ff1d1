//! Simulation engine for dynamic affinity-based personalized federated
//! learning.
//!
//! Clients share only per-class sample counts and model parameters. The
//! server turns the counts into a pairwise affinity matrix that favours
//! clients with complementary class distributions, then builds a per-client
//! aggregation model every round by mixing affinity with model distance.
//! Each client trains locally with a proximal pull toward its aggregation
//! model.
//!
//! Module map:
//!
//! - [`affinity`]: overlapping-class vectors and the normalized affinity matrix
//! - [`model`]: a small MLP with cross-entropy + proximal loss and SGD
//! - [`data`]: synthetic Gaussian tasks and Dirichlet partitioning
//! - [`aggregation`]: weighting strategies and weighted model averaging
//! - [`engine`]: the round loop
//! - [`metrics`]: accuracy, class-group accuracy and rounds-to-target
//! - [`config`]: the flat `key = value` experiment configuration format

pub mod affinity;
pub mod aggregation;
pub mod config;
pub mod data;
pub mod engine;
mod error;
pub mod metrics;
pub mod model;
pub mod rng;

pub use affinity::{AffinityMatrix, ClassStats, OverlapPair, RawAffinity};
pub use aggregation::{AggregationWeights, Strategy};
pub use config::ExperimentConfig;
pub use data::{Dataset, Partition, SyntheticTaskSpec};
pub use engine::{ClientState, MetricsLog};
pub use error::{Error, Result};
pub use metrics::{ClassGroupReport, EvalRecord};
pub use model::{Batch, HyperParams, Layout, ParamVector};
