//! Aggregation weights and weighted model averaging.
//!
//! Every strategy produces, for a target client `i`, non-negative weights
//! over the other participants that sum to one. The dynamic affinity
//! strategy multiplies the normalized affinity `c_ij` by
//! `1 - exp(-(||w_i - w_j||^2 + eps) / sigma)`, so that among peers with
//! complementary data the ones whose models differ most from `w_i` count
//! most.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::affinity::{AffinityMatrix, ClassStats};
use crate::model::{squared_distance, ParamVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    /// Affinity times model-distance kernel, recomputed every round.
    Dapfl,
    /// Affinity only (no distance term).
    StaticAffinity,
    /// Sample-count averaging into one shared model, no proximal term.
    FedAvg,
    /// Sample-count averaging with the proximal term; clients keep their
    /// own models.
    FedAvgProx,
    /// Gaussian kernel on model distance: similar models weigh more.
    Similarity,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Dapfl,
        Strategy::StaticAffinity,
        Strategy::FedAvg,
        Strategy::FedAvgProx,
        Strategy::Similarity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Dapfl => "dapfl",
            Strategy::StaticAffinity => "static_affinity",
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgProx => "fedavg_prox",
            Strategy::Similarity => "similarity",
        }
    }

    /// Whether the strategy mixes the target's own model into its aggregate.
    pub fn includes_self(self) -> bool {
        matches!(self, Strategy::FedAvg | Strategy::FedAvgProx)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "strategy",
                    format!(
                        "unknown strategy `{s}` (expected one of: {})",
                        Strategy::ALL.map(Strategy::name).join(", ")
                    ),
                )
            })
    }
}

/// Bandwidth settings shared by the distance kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub sigma: f64,
    pub epsilon: f64,
    /// Divide squared distances by the parameter count first.
    pub scale_distance: bool,
}

impl Kernel {
    pub fn distance(&self, a: &ParamVector, b: &ParamVector) -> Result<f64> {
        let d = squared_distance(a, b)?;
        Ok(if self.scale_distance {
            d / a.len() as f64
        } else {
            d
        })
    }
}

impl From<&crate::model::HyperParams> for Kernel {
    fn from(hp: &crate::model::HyperParams) -> Self {
        Kernel {
            sigma: hp.sigma,
            epsilon: hp.epsilon,
            scale_distance: hp.scale_distance,
        }
    }
}

/// Weights of the peers that make up one client's aggregation model.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub target: usize,
    pub weights: BTreeMap<usize, f64>,
}

impl AggregationWeights {
    pub fn get(&self, id: usize) -> f64 {
        self.weights.get(&id).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.weights.values().sum()
    }
}

fn peers(i: usize, participants: &[usize]) -> Result<Vec<usize>> {
    if !participants.contains(&i) {
        return Err(Error::config(
            "participants",
            format!("target client {i} is not a participant"),
        ));
    }
    let mut p: Vec<usize> = participants.iter().copied().filter(|&j| j != i).collect();
    p.sort_unstable();
    p.dedup();
    if p.is_empty() {
        return Err(Error::config(
            "participants",
            "need at least 2 participants",
        ));
    }
    Ok(p)
}

fn model(models: &BTreeMap<usize, ParamVector>, id: usize) -> Result<&ParamVector> {
    models
        .get(&id)
        .ok_or_else(|| Error::config("models", format!("no model for client {id}")))
}

fn uniform(ids: &[usize]) -> BTreeMap<usize, f64> {
    let w = 1.0 / ids.len() as f64;
    ids.iter().map(|&j| (j, w)).collect()
}

/// Unnormalized dynamic weights for every peer of `i`. If the target has
/// zero affinity to all peers the weights fall back to uniform.
pub fn dynamic_theta(
    i: usize,
    participants: &[usize],
    affinity: &AffinityMatrix,
    models: &BTreeMap<usize, ParamVector>,
    kernel: Kernel,
) -> Result<BTreeMap<usize, f64>> {
    let peers = peers(i, participants)?;
    let c_sum: f64 = peers.iter().map(|&j| affinity.get(i, j)).sum();
    if c_sum <= 0.0 {
        return Ok(uniform(&peers));
    }
    let wi = model(models, i)?;
    peers
        .iter()
        .map(|&j| {
            let d = kernel.distance(wi, model(models, j)?)?;
            let prefactor = affinity.get(i, j) / c_sum;
            Ok((
                j,
                prefactor * -(-(d + kernel.epsilon) / kernel.sigma).exp_m1(),
            ))
        })
        .collect()
}

/// `theta / sum(theta)`, or uniform when every theta is zero.
pub fn normalize_weights(target: usize, theta: &BTreeMap<usize, f64>) -> AggregationWeights {
    debug_assert!(theta.values().all(|&t| t >= 0.0));
    let sum: f64 = theta.values().sum();
    let weights = if sum > 0.0 {
        theta.iter().map(|(&j, &t)| (j, t / sum)).collect()
    } else {
        let ids: Vec<usize> = theta.keys().copied().collect();
        uniform(&ids)
    };
    AggregationWeights { target, weights }
}

/// `sum_j alpha_ij * w_j` over the weighted peers.
pub fn aggregate(
    weights: &AggregationWeights,
    models: &BTreeMap<usize, ParamVector>,
) -> Result<ParamVector> {
    weighted_sum(&weights.weights, models)
}

pub(crate) fn weighted_sum(
    weights: &BTreeMap<usize, f64>,
    models: &BTreeMap<usize, ParamVector>,
) -> Result<ParamVector> {
    let mut iter = weights.iter();
    let (&first, &w0) = iter
        .next()
        .ok_or_else(|| Error::config("weights", "no weighted models"))?;
    let mut out = model(models, first)?.clone();
    out.scale(w0);
    for (&j, &w) in iter {
        out.add_scaled(model(models, j)?, w)?;
    }
    Ok(out)
}

/// Sample-count weights over the peers of `i` (self excluded).
pub fn fedavg_weights(
    i: usize,
    participants: &[usize],
    stats: &[ClassStats],
) -> Result<AggregationWeights> {
    let peers = peers(i, participants)?;
    let theta = peers
        .iter()
        .map(|&j| {
            stats
                .get(j)
                .map(|s| (j, s.total() as f64))
                .ok_or_else(|| Error::config("stats", format!("no class stats for client {j}")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(normalize_weights(i, &theta))
}

/// Sample-count weights over all participants, the target included. This is
/// the classic shared FedAvg average; it is the same for every target.
pub fn fedavg_global_weights(
    participants: &[usize],
    stats: &[ClassStats],
) -> Result<BTreeMap<usize, f64>> {
    let total: f64 = participants
        .iter()
        .map(|&j| stats.get(j).map(|s| s.total() as f64))
        .sum::<Option<f64>>()
        .ok_or_else(|| Error::config("stats", "missing class stats for a participant"))?;
    Ok(participants
        .iter()
        .map(|&j| (j, stats[j].total() as f64 / total))
        .collect())
}

/// Gaussian-kernel weights: `exp(-d_ij / sigma)`, normalized.
pub fn similarity_weights(
    i: usize,
    participants: &[usize],
    models: &BTreeMap<usize, ParamVector>,
    kernel: Kernel,
) -> Result<AggregationWeights> {
    let peers = peers(i, participants)?;
    let wi = model(models, i)?;
    let dists = peers
        .iter()
        .map(|&j| kernel.distance(wi, model(models, j)?))
        .collect::<Result<Vec<_>>>()?;
    // Shift by the smallest distance so the kernel cannot underflow to all
    // zeros; the common factor cancels in normalization.
    let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let theta: BTreeMap<usize, f64> = peers
        .iter()
        .zip(&dists)
        .map(|(&j, &d)| (j, (-(d - d_min) / kernel.sigma).exp()))
        .collect();
    Ok(normalize_weights(i, &theta))
}

/// `c_ij / sum_j' c_ij'`, uniform when all affinities are zero.
pub fn static_affinity_weights(
    i: usize,
    participants: &[usize],
    affinity: &AffinityMatrix,
) -> Result<AggregationWeights> {
    let peers = peers(i, participants)?;
    let theta: BTreeMap<usize, f64> = peers.iter().map(|&j| (j, affinity.get(i, j))).collect();
    Ok(normalize_weights(i, &theta))
}

/// Inputs shared by all strategies for one round.
pub struct WeightContext<'a> {
    pub participants: &'a [usize],
    pub affinity: &'a AffinityMatrix,
    pub models: &'a BTreeMap<usize, ParamVector>,
    pub stats: &'a [ClassStats],
    pub kernel: Kernel,
}

/// Self-excluded weights of `strategy` for target `i`.
pub fn strategy_weights(
    strategy: Strategy,
    i: usize,
    ctx: &WeightContext<'_>,
) -> Result<AggregationWeights> {
    match strategy {
        Strategy::Dapfl => {
            let theta = dynamic_theta(i, ctx.participants, ctx.affinity, ctx.models, ctx.kernel)?;
            Ok(normalize_weights(i, &theta))
        }
        Strategy::StaticAffinity => static_affinity_weights(i, ctx.participants, ctx.affinity),
        Strategy::FedAvg | Strategy::FedAvgProx => fedavg_weights(i, ctx.participants, ctx.stats),
        Strategy::Similarity => similarity_weights(i, ctx.participants, ctx.models, ctx.kernel),
    }
}
