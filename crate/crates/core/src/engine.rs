//! The round loop.
//!
//! Before the first round every client uploads its class counts and the
//! server builds the affinity matrix once. Each round then:
//!
//! 1. samples `m` participants,
//! 2. snapshots their models,
//! 3. computes every participant's aggregation weights from the snapshot,
//! 4. builds the per-participant aggregation models,
//! 5. runs local proximal SGD on every participant in parallel.
//!
//! Steps 3-4 and step 5 are separated by a barrier, so the order in which
//! participants are processed cannot change any result.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;

use crate::affinity::{build_affinity_matrix, AffinityMatrix, ClassStats};
use crate::aggregation::{self, Kernel, Strategy, WeightContext};
use crate::config::ExperimentConfig;
use crate::data::{build_federated_data, FederatedData};
use crate::metrics::{self, class_group_report, evaluate, EvalRecord, RoundMetrics, Summary};
use crate::model::{sgd_local_update, HyperParams, ParamVector};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub params: ParamVector,
    /// Aggregation model received in the client's most recent round.
    pub aggregate: Option<ParamVector>,
}

/// Uniform `m`-subset of `0..n`, sorted, fixed by `(seed, round)`.
pub fn sample_clients(n: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m < 2 || m > n {
        return Err(Error::config(
            "participation_rate",
            format!("cannot sample {m} of {n} clients"),
        ));
    }
    let mut rng = rng::stream(seed, &[rng::SAMPLING, round as u64]);
    let mut ids = index::sample(&mut rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// One `(round, target, source, weight)` row of the optional weight dump.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub round: usize,
    pub target: usize,
    pub source: usize,
    pub weight: f64,
}

pub fn weights_csv(rows: &[WeightRow]) -> String {
    let mut out = String::from("round,target,source,weight\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.9}\n",
            r.round, r.target, r.source, r.weight
        ));
    }
    out
}

/// What the server held during one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: usize,
    pub participants: Vec<usize>,
    pub snapshots: BTreeMap<usize, ParamVector>,
    pub targets: BTreeMap<usize, ParamVector>,
    pub weights: BTreeMap<usize, BTreeMap<usize, f64>>,
}

/// Everything fixed for the duration of a run.
pub struct RoundInputs<'a> {
    pub strategy: Strategy,
    pub hyper: &'a HyperParams,
    pub affinity: &'a AffinityMatrix,
    pub data: &'a FederatedData,
    pub seed: u64,
}

/// Runs one round over `participants` (in any order) and updates their
/// states in place. Non-participants are not touched.
///
/// The fedavg strategies mix the target's own snapshot into its aggregate
/// at its sample-count weight, so every participant receives the same
/// shared model. Plain fedavg then replaces the client model with that
/// aggregate and trains without the proximal term; fedavg_prox keeps the
/// client model and pulls it toward the aggregate. The other strategies
/// exclude the target from its own aggregate.
pub fn run_round(
    round: usize,
    participants: &[usize],
    inputs: &RoundInputs<'_>,
    clients: &mut [ClientState],
) -> Result<RoundState> {
    let snapshots: BTreeMap<usize, ParamVector> = participants
        .iter()
        .map(|&i| {
            clients
                .get(i)
                .map(|c| (i, c.params.clone()))
                .ok_or_else(|| Error::config("participants", format!("no client {i}")))
        })
        .collect::<Result<_>>()?;

    let ctx = WeightContext {
        participants,
        affinity: inputs.affinity,
        models: &snapshots,
        stats: &inputs.data.stats,
        kernel: Kernel::from(inputs.hyper),
    };

    let weights: BTreeMap<usize, BTreeMap<usize, f64>> = if inputs.strategy.includes_self() {
        let shared = aggregation::fedavg_global_weights(participants, ctx.stats)?;
        participants.iter().map(|&i| (i, shared.clone())).collect()
    } else {
        participants
            .par_iter()
            .map(|&i| {
                aggregation::strategy_weights(inputs.strategy, i, &ctx).map(|w| (i, w.weights))
            })
            .collect::<Result<_>>()?
    };

    let targets: BTreeMap<usize, ParamVector> = weights
        .par_iter()
        .map(|(&i, w)| aggregation::weighted_sum(w, &snapshots).map(|g| (i, g)))
        .collect::<Result<_>>()?;

    // Barrier: all aggregation models exist before any local update starts.
    let updated: Vec<(usize, ParamVector)> = participants
        .par_iter()
        .map(|&i| {
            let shard = inputs.data.train_batch(i)?;
            let target = &targets[&i];
            let seed = rng::derive(inputs.seed, &[rng::LOCAL_SGD, round as u64, i as u64]);
            let new = match inputs.strategy {
                Strategy::FedAvg => {
                    let hp = HyperParams {
                        lambda: 0.0,
                        ..inputs.hyper.clone()
                    };
                    sgd_local_update(target, &shard, None, &hp, seed)?
                }
                _ => sgd_local_update(&snapshots[&i], &shard, Some(target), inputs.hyper, seed)?,
            };
            Ok((i, new))
        })
        .collect::<Result<_>>()?;

    for (i, params) in updated {
        clients[i].params = params;
        clients[i].aggregate = Some(targets[&i].clone());
    }

    let mut participants = participants.to_vec();
    participants.sort_unstable();
    Ok(RoundState {
        round,
        participants,
        snapshots,
        targets,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
}

/// Full output of one run.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub config: ExperimentConfig,
    pub affinity: AffinityMatrix,
    /// Train class counts per client.
    pub stats: Vec<ClassStats>,
    pub rounds: Vec<RoundRecord>,
    pub evals: Vec<EvalRecord>,
    pub round_metrics: Vec<RoundMetrics>,
    pub summary: Summary,
    /// Populated only when weight dumping was requested.
    pub weights: Vec<WeightRow>,
}

impl MetricsLog {
    pub fn rounds_csv(&self) -> String {
        metrics::rounds_csv(&self.round_metrics)
    }

    pub fn summary_csv(&self) -> String {
        metrics::summary_csv(std::slice::from_ref(&self.summary))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_weights: bool,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsLog> {
    run_experiment_with(config, RunOptions::default())
}

pub fn run_experiment_with(config: &ExperimentConfig, opts: RunOptions) -> Result<MetricsLog> {
    config.validate()?;
    let data = build_federated_data(&config.task(), config.n_clients, config.dirichlet_alpha)
        .map_err(|e| match e {
            Error::Partition {
                attempts,
                constraint,
            } => Error::Partition {
                attempts,
                constraint: format!(
                    "{constraint} (n_clients={}, dirichlet_alpha={}, seed={})",
                    config.n_clients, config.dirichlet_alpha, config.seed
                ),
            },
            other => other,
        })?;
    let affinity = build_affinity_matrix(&data.stats, config.n_classes)?;

    let w0 = config
        .layout()?
        .init(rng::derive(config.seed, &[rng::INIT]));
    let mut clients: Vec<ClientState> = (0..config.n_clients)
        .map(|id| ClientState {
            id,
            params: w0.clone(),
            aggregate: None,
        })
        .collect();

    let inputs = RoundInputs {
        strategy: config.strategy,
        hyper: &config.hyper,
        affinity: &affinity,
        data: &data,
        seed: config.seed,
    };
    let m = config.n_participants();
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut evals = Vec::new();
    let mut round_metrics = Vec::new();
    let mut weights = Vec::new();

    for t in 1..=config.rounds {
        let participants = sample_clients(config.n_clients, m, t, config.seed)?;
        let state = run_round(t, &participants, &inputs, &mut clients)?;
        if opts.dump_weights {
            for (&target, w) in &state.weights {
                for (&source, &weight) in w {
                    weights.push(WeightRow {
                        round: t,
                        target,
                        source,
                        weight,
                    });
                }
            }
        }
        rounds.push(RoundRecord {
            round: t,
            participants: state.participants,
        });

        if t % config.eval_every == 0 || t == config.rounds {
            let models: Vec<ParamVector> = clients.iter().map(|c| c.params.clone()).collect();
            let rec = evaluate(&models, &data, t)?;
            let groups = class_group_report(&rec, &data.stats)?;
            round_metrics.push(RoundMetrics {
                round: t,
                avg_acc: rec.fleet_accuracy(),
                many: groups.many,
                medium: groups.medium,
                few: groups.few,
            });
            evals.push(rec);
            log::debug!(
                "{} round {t}: fleet accuracy {:.4}",
                config.strategy,
                round_metrics.last().unwrap().avg_acc
            );
        }
    }

    let tail = |f: fn(&RoundMetrics) -> Option<f64>| {
        metrics::tail_mean(
            &round_metrics.iter().map(f).collect::<Vec<_>>(),
            metrics::LAST_N,
        )
    };
    let summary = Summary {
        strategy: config.strategy.to_string(),
        alpha: config.dirichlet_alpha,
        seed: config.seed,
        last_avg: tail(|r| Some(r.avg_acc)).unwrap_or(0.0),
        last_many: tail(|r| r.many),
        last_medium: tail(|r| r.medium),
        last_few: tail(|r| r.few),
        rounds_to_target: config
            .targets
            .iter()
            .map(|&t| (t, metrics::rounds_to_target(&evals, t)))
            .collect(),
    };

    Ok(MetricsLog {
        config: config.clone(),
        affinity,
        stats: data.stats.clone(),
        rounds,
        evals,
        round_metrics,
        summary,
        weights,
    })
}
