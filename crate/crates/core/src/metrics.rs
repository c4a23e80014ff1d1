//! Evaluation: per-client accuracy, Many/Medium/Few class-group accuracy,
//! last-N averaging, rounds-to-target, and the CSV tables built from them.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::affinity::ClassStats;
use crate::data::FederatedData;
use crate::model::{predict, ParamVector};
use crate::{Error, Result};

/// Train counts above this are Many.
pub const MANY_ABOVE: u64 = 80;
/// Train counts below this are Few.
pub const FEW_BELOW: u64 = 30;
/// Evaluations averaged for the headline accuracy.
pub const LAST_N: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub round: usize,
    /// Accuracy of every client on its own test shard.
    pub accuracy: Vec<f64>,
    /// `correct[c][k]`: correct test predictions of client `c` on class `k`.
    pub correct: Vec<Vec<u64>>,
    pub total: Vec<Vec<u64>>,
}

impl EvalRecord {
    /// Unweighted mean over clients.
    pub fn fleet_accuracy(&self) -> f64 {
        self.accuracy.iter().sum::<f64>() / self.accuracy.len() as f64
    }
}

/// Argmax accuracy of each client's model on its own test shard.
pub fn evaluate(models: &[ParamVector], data: &FederatedData, round: usize) -> Result<EvalRecord> {
    let n_classes = data.n_classes;
    let per_client = models
        .par_iter()
        .enumerate()
        .map(|(c, m)| {
            let batch = data.test_batch(c)?;
            let pred = predict(m, &batch)?;
            let mut correct = vec![0u64; n_classes];
            let mut total = vec![0u64; n_classes];
            for (&p, &y) in pred.iter().zip(batch.labels()) {
                total[y] += 1;
                if p == y {
                    correct[y] += 1;
                }
            }
            Ok((correct, total))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, total): (Vec<_>, Vec<_>) = per_client.into_iter().unzip();
    let accuracy = correct
        .iter()
        .zip(&total)
        .map(|(c, t): (&Vec<u64>, &Vec<u64>)| {
            c.iter().sum::<u64>() as f64 / t.iter().sum::<u64>() as f64
        })
        .collect();
    Ok(EvalRecord {
        round,
        accuracy,
        correct,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassGroup {
    Many,
    Medium,
    Few,
}

impl ClassGroup {
    /// Group of a class the client holds `count` train samples of; `None`
    /// for absent classes. Medium is the closed range `[30, 80]`.
    pub fn of(count: u64) -> Option<Self> {
        match count {
            0 => None,
            c if c < FEW_BELOW => Some(ClassGroup::Few),
            c if c > MANY_ABOVE => Some(ClassGroup::Many),
            _ => Some(ClassGroup::Medium),
        }
    }
}

/// Pooled (micro-averaged) accuracy per class group. `None` marks a group
/// with no test samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroupReport {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub avg: Option<f64>,
    /// `groups[c][k]`: group of class `k` for client `c`.
    pub groups: Vec<Vec<Option<ClassGroup>>>,
}

pub fn class_group_report(record: &EvalRecord, stats: &[ClassStats]) -> Result<ClassGroupReport> {
    if stats.len() < record.correct.len() {
        return Err(Error::config(
            "stats",
            "class stats missing for an evaluated client",
        ));
    }
    // (correct, total) for Many, Medium, Few, all.
    let mut tally = [(0u64, 0u64); 4];
    let mut groups = Vec::with_capacity(record.correct.len());
    for (c, (correct, total)) in record.correct.iter().zip(&record.total).enumerate() {
        let row: Vec<Option<ClassGroup>> = stats[c]
            .counts()
            .iter()
            .map(|&n| ClassGroup::of(n))
            .collect();
        for (k, g) in row.iter().enumerate() {
            let slot = match g {
                Some(ClassGroup::Many) => 0,
                Some(ClassGroup::Medium) => 1,
                Some(ClassGroup::Few) => 2,
                None => continue,
            };
            tally[slot].0 += correct[k];
            tally[slot].1 += total[k];
            tally[3].0 += correct[k];
            tally[3].1 += total[k];
        }
        groups.push(row);
    }
    let acc = |(c, t): (u64, u64)| (t > 0).then(|| c as f64 / t as f64);
    Ok(ClassGroupReport {
        many: acc(tally[0]),
        medium: acc(tally[1]),
        few: acc(tally[2]),
        avg: acc(tally[3]),
        groups,
    })
}

/// Round of the first record whose fleet accuracy reaches `target`.
pub fn rounds_to_target(history: &[EvalRecord], target: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.fleet_accuracy() >= target)
        .map(|r| r.round)
}

/// Mean of the last `n` present values; `None` if there are none.
pub fn tail_mean(values: &[Option<f64>], n: usize) -> Option<f64> {
    let tail = &values[values.len().saturating_sub(n)..];
    let present: Vec<f64> = tail.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// One row of the per-round fleet table.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub avg_acc: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub strategy: String,
    pub alpha: f64,
    pub seed: u64,
    pub last_avg: f64,
    pub last_many: Option<f64>,
    pub last_medium: Option<f64>,
    pub last_few: Option<f64>,
    /// `(target, first round reaching it)`.
    pub rounds_to_target: Vec<(f64, Option<usize>)>,
}

pub const NA: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.6}"))
}

pub const ROUNDS_HEADER: &str = "round,avg_acc,many,medium,few";

/// Per-evaluation fleet table. Group columns are pooled over clients.
pub fn rounds_csv(rows: &[RoundMetrics]) -> String {
    let mut out = format!("{ROUNDS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{},{},{}",
            r.round,
            r.avg_acc,
            fmt_opt(r.many),
            fmt_opt(r.medium),
            fmt_opt(r.few)
        )
        .unwrap();
    }
    out
}

/// Summary table header for the given targets; rounds-to-target columns are
/// named `rounds_to_<target>` with the target printed to two decimals.
pub fn summary_header(targets: &[f64]) -> String {
    let mut h =
        String::from("strategy,alpha,seed,last10_avg_acc,last10_many,last10_medium,last10_few");
    for t in targets {
        write!(h, ",rounds_to_{t:.2}").unwrap();
    }
    h
}

pub fn summary_csv(rows: &[Summary]) -> String {
    let targets: Vec<f64> = rows
        .first()
        .map(|s| s.rounds_to_target.iter().map(|t| t.0).collect())
        .unwrap_or_default();
    let mut out = summary_header(&targets);
    out.push('\n');
    for s in rows {
        write!(
            out,
            "{},{},{},{:.6},{},{},{}",
            s.strategy,
            s.alpha,
            s.seed,
            s.last_avg,
            fmt_opt(s.last_many),
            fmt_opt(s.last_medium),
            fmt_opt(s.last_few)
        )
        .unwrap();
        for (_, r) in &s.rounds_to_target {
            write!(
                out,
                ",{}",
                r.map_or_else(|| NA.to_string(), |x| x.to_string())
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}
