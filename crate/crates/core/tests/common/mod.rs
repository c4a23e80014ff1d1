//! Independent scalar re-derivations used as test oracles.

#![allow(dead_code)]

use dapfl::model::loss;
use dapfl::{Batch, ParamVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Raw affinity of two count vectors by direct evaluation; `None` when the
/// supports do not overlap.
pub fn oracle_raw(a: &[u64], b: &[u64]) -> Option<f64> {
    let k = a.len() as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&x, &y) in a.iter().zip(b) {
        if x > 0 && y > 0 {
            xs.push(x as f64);
            ys.push(y as f64);
        }
    }
    if xs.is_empty() {
        return None;
    }
    let e = xs.len() as f64;
    let mean = (xs.iter().sum::<f64>() + ys.iter().sum::<f64>()) / (2.0 * e);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for t in 0..xs.len() {
        num += (xs[t] - mean) * (ys[t] - mean);
        dx += (xs[t] - mean) * (xs[t] - mean);
        dy += (ys[t] - mean) * (ys[t] - mean);
    }
    let rho = if dx == 0.0 || dy == 0.0 {
        0.0
    } else {
        num / (dx.sqrt() * dy.sqrt())
    };
    Some(e / k * (2.0 - rho))
}

/// Normalized affinity matrix of a small population.
pub fn oracle_matrix(counts: &[Vec<u64>]) -> Vec<Vec<f64>> {
    let n = counts.len();
    let mut raw = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                raw[i][j] = oracle_raw(&counts[i], &counts[j]);
            }
        }
    }
    let present: Vec<f64> = raw.iter().flatten().flatten().copied().collect();
    let mut out = vec![vec![0.0; n]; n];
    if present.is_empty() {
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 0.0 } else { 1.0 };
            }
        }
        return out;
    }
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let r = raw[i][j].unwrap_or(lo);
            out[i][j] = if hi == lo { 1.0 } else { (r - lo) / (hi - lo) };
        }
    }
    out
}

/// Dynamic aggregation weights of `target` over every other model, with
/// the whole population participating.
pub fn oracle_alpha(
    target: usize,
    counts: &[Vec<u64>],
    models: &[Vec<f64>],
    sigma: f64,
    epsilon: f64,
) -> Vec<(usize, f64)> {
    let c = oracle_matrix(counts);
    let peers: Vec<usize> = (0..counts.len()).filter(|&j| j != target).collect();
    let c_sum: f64 = peers.iter().map(|&j| c[target][j]).sum();
    if c_sum == 0.0 {
        let w = 1.0 / peers.len() as f64;
        return peers.iter().map(|&j| (j, w)).collect();
    }
    let mut theta = Vec::new();
    for &j in &peers {
        let mut d = 0.0;
        for (x, y) in models[target].iter().zip(&models[j]) {
            d += (x - y) * (x - y);
        }
        theta.push(c[target][j] / c_sum * (1.0 - (-(d + epsilon) / sigma).exp()));
    }
    let total: f64 = theta.iter().sum();
    if total == 0.0 {
        let w = 1.0 / peers.len() as f64;
        return peers.iter().map(|&j| (j, w)).collect();
    }
    peers
        .iter()
        .zip(theta)
        .map(|(&j, t)| (j, t / total))
        .collect()
}

/// Central finite-difference gradient of the proximal objective.
pub fn fd_gradient(
    params: &ParamVector,
    batch: &Batch,
    prox: Option<&ParamVector>,
    lambda: f64,
    h: f64,
) -> Vec<f64> {
    let mut probe = params.clone();
    (0..params.len())
        .map(|p| {
            let x = params.values()[p];
            probe.values_mut()[p] = x + h;
            let up = loss(&probe, batch, prox, lambda).unwrap();
            probe.values_mut()[p] = x - h;
            let down = loss(&probe, batch, prox, lambda).unwrap();
            probe.values_mut()[p] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_counts(rng: &mut ChaCha8Rng, k: usize, max: u64) -> Vec<u64> {
    loop {
        let c: Vec<u64> = (0..k)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0
                } else {
                    rng.random_range(0..=max)
                }
            })
            .collect();
        if c.iter().any(|&x| x > 0) {
            return c;
        }
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize, classes: usize) -> Batch {
    let features = (0..rows * dim)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, dim, labels).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
