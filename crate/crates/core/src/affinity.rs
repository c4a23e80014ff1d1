//! Client affinity from class statistics.
//!
//! Two clients are compared only on the classes they both hold. The affinity
//! is a negated adjusted cosine over those overlapping counts, centered on a
//! single mean shared by both clients, and scaled by the fraction of classes
//! that overlap. Anti-correlated counts (one client is rich where the other
//! is poor) score high, so aggregating high-affinity peers balances classes.

use crate::{Error, Result};

/// Per-class training-sample counts of one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassStats {
    counts: Vec<u64>,
}

impl ClassStats {
    /// Rejects empty vectors and clients without any samples.
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::config("class_stats", "class count vector is empty"));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::config("class_stats", "client holds no samples"));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Number of classes with at least one sample.
    pub fn support(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// Counts of the classes held by both clients, in ascending class order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OverlapPair {
    pub left: Vec<u64>,
    pub right: Vec<u64>,
    pub class_ids: Vec<usize>,
}

impl OverlapPair {
    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Result of [`raw_affinity`]: either a value or the marker for client pairs
/// that share no class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawAffinity {
    Value(f64),
    NoOverlap,
}

impl RawAffinity {
    pub fn value(self) -> Option<f64> {
        match self {
            RawAffinity::Value(v) => Some(v),
            RawAffinity::NoOverlap => None,
        }
    }
}

pub fn overlapping_vectors(si: &ClassStats, sj: &ClassStats) -> Result<OverlapPair> {
    if si.n_classes() != sj.n_classes() {
        return Err(Error::config(
            "class_stats",
            format!(
                "class vectors differ in length ({} vs {})",
                si.n_classes(),
                sj.n_classes()
            ),
        ));
    }
    let mut pair = OverlapPair::default();
    for (k, (&a, &b)) in si.counts.iter().zip(&sj.counts).enumerate() {
        if a > 0 && b > 0 {
            pair.left.push(a);
            pair.right.push(b);
            pair.class_ids.push(k);
        }
    }
    Ok(pair)
}

/// Adjusted-cosine term of the overlap, centered on the mean of all elements
/// of both vectors. Zero when either centered vector has zero norm.
pub fn shared_mean_cosine(left: &[u64], right: &[u64]) -> f64 {
    debug_assert_eq!(left.len(), right.len());
    let n = left.len();
    if n == 0 {
        return 0.0;
    }
    let total: u64 = left.iter().chain(right).sum();
    let mean = total as f64 / (2 * n) as f64;
    let (mut dot, mut nl, mut nr) = (0.0, 0.0, 0.0);
    for (&a, &b) in left.iter().zip(right) {
        let (da, db) = (a as f64 - mean, b as f64 - mean);
        dot += da * db;
        nl += da * da;
        nr += db * db;
    }
    if nl == 0.0 || nr == 0.0 {
        return 0.0;
    }
    // Rounding can push |rho| a hair past 1.
    (dot / (nl.sqrt() * nr.sqrt())).clamp(-1.0, 1.0)
}

/// `(|E| / K) * (2 - rho)`, or [`RawAffinity::NoOverlap`] for an empty pair.
pub fn raw_affinity(pair: &OverlapPair, k_total: usize) -> RawAffinity {
    assert!(k_total >= 1, "k_total must be positive");
    assert!(k_total >= pair.len(), "overlap larger than class count");
    if pair.is_empty() {
        return RawAffinity::NoOverlap;
    }
    let rho = shared_mean_cosine(&pair.left, &pair.right);
    RawAffinity::Value(pair.len() as f64 / k_total as f64 * (2.0 - rho))
}

/// Symmetric client-by-client affinity with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: Vec<f64>,
    n_clients: usize,
}

impl AffinityMatrix {
    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_clients + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_clients..(i + 1) * self.n_clients]
    }

    /// Builds a matrix from explicit entries. The diagonal is forced to zero;
    /// the caller must supply a symmetric input with entries in `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut values = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config("affinity", "matrix is not square"));
            }
            for (j, &v) in row.iter().enumerate() {
                if i != j && !(0.0..=1.0).contains(&v) {
                    return Err(Error::config("affinity", "entry outside [0, 1]"));
                }
                values.push(if i == j { 0.0 } else { v });
            }
        }
        for i in 0..n {
            for j in 0..i {
                if values[i * n + j] != values[j * n + i] {
                    return Err(Error::config("affinity", "matrix is not symmetric"));
                }
            }
        }
        Ok(Self {
            values,
            n_clients: n,
        })
    }

    /// Peers of `i` ordered by decreasing affinity, ties by ascending id.
    pub fn top_peers(&self, i: usize, k: usize) -> Vec<(usize, f64)> {
        let mut peers: Vec<(usize, f64)> = (0..self.n_clients)
            .filter(|&j| j != i)
            .map(|j| (j, self.get(i, j)))
            .collect();
        peers.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        peers.truncate(k);
        peers
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.n_clients)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Raw pairwise affinities before fallback and normalization, as a dense
/// matrix with `None` for non-overlapping pairs and the diagonal.
pub fn raw_affinity_table(stats: &[ClassStats], k_total: usize) -> Result<Vec<Vec<Option<f64>>>> {
    let n = stats.len();
    for s in stats {
        if s.n_classes() != k_total {
            return Err(Error::config(
                "class_stats",
                format!("expected {k_total} classes, got {}", s.n_classes()),
            ));
        }
    }
    let mut table = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let raw = raw_affinity(&overlapping_vectors(&stats[i], &stats[j])?, k_total).value();
            table[i][j] = raw;
            table[j][i] = raw;
        }
    }
    Ok(table)
}

/// Computes all pairwise raw affinities, substitutes the global minimum
/// overlapping affinity for pairs without overlap, then min-max normalizes
/// the off-diagonal entries into `[0, 1]`. A constant matrix (including the
/// case where no pair overlaps at all) normalizes to all ones.
pub fn build_affinity_matrix(stats: &[ClassStats], k_total: usize) -> Result<AffinityMatrix> {
    if stats.len() < 2 {
        return Err(Error::config(
            "n_clients",
            "affinity needs at least 2 clients",
        ));
    }
    if k_total == 0 {
        return Err(Error::config("n_classes", "must be positive"));
    }
    let n = stats.len();
    let table = raw_affinity_table(stats, k_total)?;

    let overlapping = table
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().skip(i + 1).filter_map(|v| *v));
    let fallback = overlapping.fold(f64::INFINITY, f64::min);

    let mut values = vec![0.0; n * n];
    if fallback.is_finite() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = table[i][j].unwrap_or(fallback);
                lo = lo.min(v);
                hi = hi.max(v);
                values[i * n + j] = v;
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let v = if hi > lo {
                    (values[i * n + j] - lo) / (hi - lo)
                } else {
                    1.0
                };
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
    } else {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    values[i * n + j] = 1.0;
                }
            }
        }
    }
    Ok(AffinityMatrix {
        values,
        n_clients: n,
    })
}

/// Parses a whitespace-separated table with one client per row. Blank lines
/// and lines starting with `#` are skipped.
pub fn parse_stats_table(text: &str) -> Result<Vec<ClassStats>> {
    let mut rows: Vec<ClassStats> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let counts = trimmed
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{tok}` is not a non-negative integer"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.n_classes() != counts.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "expected {} counts, found {}",
                        first.n_classes(),
                        counts.len()
                    ),
                });
            }
        }
        let stats = ClassStats::new(counts).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        rows.push(stats);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "no client rows".into(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(c: &[u64]) -> ClassStats {
        ClassStats::new(c.to_vec()).unwrap()
    }

    /// Scalar re-derivation of the affinity formula, kept apart from the
    /// implementation's helper functions.
    fn oracle(left: &[f64], right: &[f64], k: f64) -> f64 {
        let n = left.len() as f64;
        let s_bar = (left.iter().sum::<f64>() + right.iter().sum::<f64>()) / (2.0 * n);
        let num: f64 = (0..left.len())
            .map(|e| (left[e] - s_bar) * (right[e] - s_bar))
            .sum();
        let dl: f64 = left.iter().map(|x| (x - s_bar).powi(2)).sum::<f64>().sqrt();
        let dr: f64 = right
            .iter()
            .map(|x| (x - s_bar).powi(2))
            .sum::<f64>()
            .sqrt();
        n / k * (2.0 - num / (dl * dr))
    }

    #[test]
    fn oracle_reproduces_hand_values() {
        assert!((oracle(&[80.0, 50.0, 20.0], &[80.0, 50.0, 20.0], 10.0) - 0.3).abs() < 1e-15);
        assert!((oracle(&[80.0, 50.0, 20.0], &[20.0, 50.0, 80.0], 10.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn overlap_of_identical_groups() {
        let s = stats(&[80, 50, 20, 0, 0, 0, 0, 0, 0, 0]);
        let p = overlapping_vectors(&s, &s).unwrap();
        assert_eq!(p.left, vec![80, 50, 20]);
        assert_eq!(p.right, vec![80, 50, 20]);
        assert_eq!(p.class_ids, vec![0, 1, 2]);
    }

    #[test]
    fn overlap_disjoint_and_partial() {
        let p = overlapping_vectors(&stats(&[5, 0, 3]), &stats(&[0, 7, 0])).unwrap();
        assert!(p.is_empty());
        let p = overlapping_vectors(&stats(&[10, 20, 0, 4]), &stats(&[1, 0, 9, 4])).unwrap();
        assert_eq!(p.left, vec![10, 4]);
        assert_eq!(p.right, vec![1, 4]);
        assert_eq!(p.class_ids, vec![0, 3]);
    }

    #[test]
    fn overlap_length_mismatch_is_config_error() {
        let err = overlapping_vectors(&stats(&[1, 2]), &stats(&[1, 2, 3])).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn zero_sample_client_rejected() {
        assert!(ClassStats::new(vec![0, 0, 0]).is_err());
        assert!(ClassStats::new(vec![]).is_err());
    }

    #[test]
    fn raw_affinity_identical_and_reversed() {
        let same = OverlapPair {
            left: vec![80, 50, 20],
            right: vec![80, 50, 20],
            class_ids: vec![0, 1, 2],
        };
        let rev = OverlapPair {
            right: vec![20, 50, 80],
            ..same.clone()
        };
        let a = raw_affinity(&same, 10).value().unwrap();
        let b = raw_affinity(&rev, 10).value().unwrap();
        assert!((a - 0.3).abs() < 1e-12, "{a}");
        assert!((b - 0.9).abs() < 1e-12, "{b}");
        assert_eq!(
            raw_affinity(&OverlapPair::default(), 10),
            RawAffinity::NoOverlap
        );
    }

    #[test]
    fn degenerate_denominator_is_neutral() {
        let p = OverlapPair {
            left: vec![7],
            right: vec![7],
            class_ids: vec![3],
        };
        assert_eq!(raw_affinity(&p, 4).value(), Some(2.0 / 4.0));
        let p = OverlapPair {
            left: vec![5, 5],
            right: vec![1, 9],
            class_ids: vec![0, 1],
        };
        assert_eq!(raw_affinity(&p, 2).value(), Some(2.0));
    }

    #[test]
    fn two_identical_clients_normalize_to_one() {
        let s = stats(&[80, 50, 20, 0, 0, 0, 0, 0, 0, 0]);
        let m = build_affinity_matrix(&[s.clone(), s], 10).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 1.0);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn no_overlap_pair_takes_minimum_then_maps_to_zero() {
        // 0-1 overlap on class 0 only, 0-2 overlap on classes 0 and 1,
        // 1-2 share nothing.
        let s = vec![
            stats(&[10, 5, 0, 0]),
            stats(&[3, 0, 0, 8]),
            stats(&[4, 9, 6, 0]),
        ];
        let raw01 = oracle(&[10.0], &[3.0], 4.0);
        let raw02 = oracle(&[10.0, 5.0], &[4.0, 9.0], 4.0);
        let lo = raw01.min(raw02);
        let hi = raw01.max(raw02);
        let m = build_affinity_matrix(&s, 4).unwrap();
        assert_eq!(m.get(1, 2), 0.0);
        assert!((m.get(0, 1) - (raw01 - lo) / (hi - lo)).abs() < 1e-12);
        assert!((m.get(0, 2) - (raw02 - lo) / (hi - lo)).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_anywhere_is_uniform() {
        let s = vec![stats(&[1, 0, 0]), stats(&[0, 1, 0]), stats(&[0, 0, 1])];
        let m = build_affinity_matrix(&s, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn single_client_rejected() {
        assert!(build_affinity_matrix(&[stats(&[1, 2])], 2).is_err());
    }

    #[test]
    fn top_peers_orders_by_affinity() {
        let m = AffinityMatrix::from_rows(vec![
            vec![0.0, 0.2, 0.9, 0.2],
            vec![0.2, 0.0, 0.1, 0.3],
            vec![0.9, 0.1, 0.0, 1.0],
            vec![0.2, 0.3, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(m.top_peers(0, 3), vec![(2, 0.9), (1, 0.2), (3, 0.2)]);
    }

    #[test]
    fn stats_table_parsing() {
        let rows = parse_stats_table("# header\n1 2 3\n\n0 4 0\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].counts(), &[0, 4, 0]);
        match parse_stats_table("1 2 3\n1 x 3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_stats_table("1 2 3\n1 3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_stats_table("").is_err());
        assert!(parse_stats_table("0 0 0\n").is_err());
    }
}
