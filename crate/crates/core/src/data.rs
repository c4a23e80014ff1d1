//! Synthetic Gaussian-cluster tasks and Dirichlet class-imbalanced
//! partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::affinity::ClassStats;
use crate::model::Batch;
use crate::{rng, Error, Result};

/// Maximum number of full repartitions before giving up on the per-client
/// minimums.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;
pub const MIN_CLASSES_PER_CLIENT: usize = 2;
pub const MIN_SAMPLES_PER_CLIENT: usize = 10;
/// Held-out test samples per class, as a fraction of a client's train count.
pub const TEST_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    /// Standard deviation of each cluster around its mean.
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need at least 2 classes"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim", "need at least 2 features"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class", "must be positive"));
        }
        if !(self.cluster_spread >= 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config(
                "cluster_spread",
                "must be a non-negative number",
            ));
        }
        Ok(())
    }

    /// Cluster centres, one standard-normal draw per class and coordinate.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, &[rng::DATA_MEANS]);
        (0..self.n_classes)
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect()
    }
}

/// Feature rows with labels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers `indices` into a batch.
    pub fn subset(&self, indices: &[usize]) -> Result<Batch> {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        Batch::new(x, self.dim, y)
    }

    /// Samples per class over the whole dataset.
    pub fn class_totals(&self, n_classes: usize) -> Vec<u64> {
        let mut totals = vec![0; n_classes];
        for &y in &self.labels {
            totals[y] += 1;
        }
        totals
    }
}

fn sample_rows(means: &[Vec<f64>], spread: f64, counts: &[usize], rng: &mut impl Rng) -> Dataset {
    let dim = means[0].len();
    let total: usize = counts.iter().sum();
    let mut features = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (k, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for &m in &means[k] {
                let z: f64 = StandardNormal.sample(rng);
                features.push(m + spread * z);
            }
            labels.push(k);
        }
    }
    Dataset {
        features,
        dim,
        labels,
    }
}

/// `samples_per_class` rows per class, grouped by class in ascending order.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = rng::stream(spec.seed, &[rng::DATA_TRAIN]);
    Ok(sample_rows(
        &means,
        spec.cluster_spread,
        &vec![spec.samples_per_class; spec.n_classes],
        &mut rng,
    ))
}

/// Per-client train shards (indices into the train dataset) and test shards
/// (indices into the held-out test dataset).
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub dirichlet_alpha: f64,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.train.len()
    }
}

/// Splits `n` items proportionally to `shares` (summing to 1) using
/// largest-remainder rounding; ties go to the lower index.
pub fn largest_remainder(shares: &[f64], n: usize) -> Vec<usize> {
    let targets: Vec<f64> = shares.iter().map(|q| q * n as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut left = n.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn dirichlet_draw(alpha: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return g.into_iter().map(|x| x / sum).collect();
        }
    }
}

/// For each class, draws client proportions from a symmetric Dirichlet and
/// deals that class's (shuffled) samples out accordingly. The whole draw is
/// repeated until every client holds at least
/// [`MIN_CLASSES_PER_CLIENT`] classes and [`MIN_SAMPLES_PER_CLIENT`] samples.
/// Test shards are left empty; see [`build_federated_data`].
pub fn dirichlet_partition(
    labels: &[usize],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if n_clients < 2 {
        return Err(Error::config("n_clients", "need at least 2 clients"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("dirichlet_alpha", "must be positive"));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }

    let mut rng = rng::stream(seed, &[rng::PARTITION]);
    let mut last_violation = String::new();
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut train = vec![Vec::new(); n_clients];
        let mut classes_held = vec![0usize; n_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let q = dirichlet_draw(alpha, n_clients, &mut rng);
            let counts = largest_remainder(&q, members.len());
            let mut at = 0;
            for (c, &n) in counts.iter().enumerate() {
                train[c].extend_from_slice(&members[at..at + n]);
                at += n;
                if n > 0 {
                    classes_held[c] += 1;
                }
            }
        }
        match (0..n_clients).find_map(|c| {
            if classes_held[c] < MIN_CLASSES_PER_CLIENT {
                Some(format!(
                    "client {c} holds {} classes (minimum {MIN_CLASSES_PER_CLIENT})",
                    classes_held[c]
                ))
            } else if train[c].len() < MIN_SAMPLES_PER_CLIENT {
                Some(format!(
                    "client {c} holds {} samples (minimum {MIN_SAMPLES_PER_CLIENT})",
                    train[c].len()
                ))
            } else {
                None
            }
        }) {
            Some(v) => last_violation = v,
            None => {
                for shard in &mut train {
                    shard.sort_unstable();
                }
                return Ok(Partition {
                    train,
                    test: vec![Vec::new(); n_clients],
                    dirichlet_alpha: alpha,
                });
            }
        }
    }
    Err(Error::Partition {
        attempts: MAX_PARTITION_ATTEMPTS,
        constraint: last_violation,
    })
}

/// Train-shard class counts of one client.
pub fn class_stats(
    partition: &Partition,
    labels: &[usize],
    n_classes: usize,
    client: usize,
) -> Result<ClassStats> {
    let shard = partition
        .train
        .get(client)
        .ok_or_else(|| Error::config("client", format!("no client {client}")))?;
    let mut counts = vec![0u64; n_classes];
    for &i in shard {
        counts[labels[i]] += 1;
    }
    ClassStats::new(counts)
}

/// Held-out test count for a class the client holds `train_count` of.
pub fn test_count(train_count: u64) -> usize {
    if train_count == 0 {
        0
    } else {
        ((train_count as f64 * TEST_FRACTION).ceil() as usize).max(1)
    }
}

/// Entropy of the client's class distribution divided by `ln K`.
pub fn normalized_entropy(stats: &ClassStats) -> f64 {
    let total = stats.total() as f64;
    let h: f64 = stats
        .counts()
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    h / (stats.n_classes() as f64).ln()
}

/// Everything a run needs from the data side.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub stats: Vec<ClassStats>,
    pub n_classes: usize,
}

impl FederatedData {
    pub fn train_batch(&self, client: usize) -> Result<Batch> {
        self.train.subset(&self.partition.train[client])
    }

    pub fn test_batch(&self, client: usize) -> Result<Batch> {
        self.test.subset(&self.partition.test[client])
    }
}

/// Generates the train set, partitions it, and draws a fresh held-out test
/// set from the same clusters sized per client and class by [`test_count`].
pub fn build_federated_data(
    spec: &SyntheticTaskSpec,
    n_clients: usize,
    alpha: f64,
) -> Result<FederatedData> {
    let train = generate_synthetic(spec)?;
    let mut partition = dirichlet_partition(&train.labels, n_clients, alpha, spec.seed)?;
    let stats = (0..n_clients)
        .map(|c| class_stats(&partition, &train.labels, spec.n_classes, c))
        .collect::<Result<Vec<_>>>()?;

    let means = spec.class_means();
    let mut rng = rng::stream(spec.seed, &[rng::DATA_TEST]);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (c, s) in stats.iter().enumerate() {
        let counts: Vec<usize> = s.counts().iter().map(|&n| test_count(n)).collect();
        let rows = sample_rows(&means, spec.cluster_spread, &counts, &mut rng);
        let start = labels.len();
        partition.test[c] = (start..start + rows.len()).collect();
        features.extend(rows.features);
        labels.extend(rows.labels);
    }
    let test = Dataset {
        features,
        dim: spec.feature_dim,
        labels,
    };
    Ok(FederatedData {
        train,
        test,
        partition,
        stats,
        n_classes: spec.n_classes,
    })
}

/// Client-by-class count table, header `client,class_0,..,class_{K-1}`.
pub fn heatmap_csv(stats: &[ClassStats]) -> String {
    let k = stats.first().map_or(0, ClassStats::n_classes);
    let mut out = String::from("client");
    for c in 0..k {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for (i, s) in stats.iter().enumerate() {
        out.push_str(&i.to_string());
        for n in s.counts() {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            n_classes: 10,
            feature_dim: 5,
            samples_per_class: 200,
            cluster_spread: spread,
            seed: 3,
        }
    }

    #[test]
    fn zero_spread_collapses_to_means() {
        let s = spec(0.0);
        let data = generate_synthetic(&s).unwrap();
        let means = s.class_means();
        for i in 0..data.len() {
            assert_eq!(data.row(i), means[data.labels[i]].as_slice());
        }
    }

    #[test]
    fn counts_per_label() {
        let data = generate_synthetic(&spec(1.0)).unwrap();
        assert_eq!(data.len(), 2000);
        assert_eq!(data.class_totals(10), vec![200; 10]);
        assert_eq!(data, generate_synthetic(&spec(1.0)).unwrap());
    }

    #[test]
    fn largest_remainder_conserves() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 10), vec![5, 3, 2]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.0, 1.0], 7), vec![0, 7]);
    }

    #[test]
    fn class_stats_of_single_class_client() {
        let labels = vec![0, 0, 0, 1, 2, 3];
        let p = Partition {
            train: vec![vec![0, 1, 2], vec![3, 4, 5]],
            test: vec![vec![0], vec![1]],
            dirichlet_alpha: 1.0,
        };
        assert_eq!(
            class_stats(&p, &labels, 4, 0).unwrap().counts(),
            &[3, 0, 0, 0]
        );
        assert!(class_stats(&p, &labels, 4, 2).is_err());
    }

    #[test]
    fn near_uniform_at_huge_alpha() {
        let labels: Vec<usize> = (0..20_000).map(|i| i % 10).collect();
        let p = dirichlet_partition(&labels, 10, 1e6, 1).unwrap();
        for k in 0..10 {
            for c in 0..10 {
                let n = p.train[c].iter().filter(|&&i| labels[i] == k).count() as f64;
                assert!(
                    (n - 200.0).abs() <= 0.05 * 200.0,
                    "class {k} client {c}: {n}"
                );
            }
        }
    }

    #[test]
    fn impossible_minimum_reports_constraint() {
        // Only 12 samples for 3 clients: someone must fall under 10.
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        match dirichlet_partition(&labels, 3, 1.0, 0) {
            Err(Error::Partition {
                attempts,
                constraint,
            }) => {
                assert_eq!(attempts, MAX_PARTITION_ATTEMPTS);
                assert!(constraint.contains("client"), "{constraint}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn test_shards_follow_train_classes() {
        let s = spec(1.0);
        let fd = build_federated_data(&s, 8, 0.5).unwrap();
        for c in 0..8 {
            let mut test_counts = [0usize; 10];
            for &i in &fd.partition.test[c] {
                test_counts[fd.test.labels[i]] += 1;
            }
            for (&got, &train) in test_counts.iter().zip(fd.stats[c].counts()) {
                assert_eq!(got, test_count(train));
            }
        }
        assert_eq!(test_count(1), 1);
        assert_eq!(test_count(10), 1);
        assert_eq!(test_count(11), 2);
    }

    #[test]
    fn heatmap_layout() {
        let stats = vec![
            ClassStats::new(vec![1, 0, 2]).unwrap(),
            ClassStats::new(vec![0, 5, 0]).unwrap(),
        ];
        assert_eq!(
            heatmap_csv(&stats),
            "client,class_0,class_1,class_2\n0,1,0,2\n1,0,5,0\n"
        );
    }

    #[test]
    fn entropy_bounds() {
        let uniform = ClassStats::new(vec![5; 4]).unwrap();
        assert!((normalized_entropy(&uniform) - 1.0).abs() < 1e-12);
        let single = ClassStats::new(vec![0, 9, 0, 0]).unwrap();
        assert_eq!(normalized_entropy(&single), 0.0);
    }
}
