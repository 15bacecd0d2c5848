use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub seed: u64,
    pub n_clients: usize,
    /// Sorted sample indices per client.
    pub assignments: Vec<Vec<usize>>,
    /// `per_class_counts[client][class]`.
    pub per_class_counts: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Splits sample indices across clients with per-class Dirichlet(alpha) proportions.
///
/// For each class `k` in increasing order, proportions are drawn as normalized Gamma(alpha, 1)
/// variates from a ChaCha20 generator seeded with `seed`, the class's indices are shuffled with
/// the same generator, and client `j` receives the slice between the rounded cumulative shares
/// `round(n_k * (p_0 + .. + p_{j-1}))` and `round(n_k * (p_0 + .. + p_j))`. If every Gamma draw
/// underflows to zero the class is split uniformly. Clients left empty each take one sample
/// from the currently largest client.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionSpec> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DataError::InvalidAlpha(alpha));
    }
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be at least 1".into()));
    }
    if labels.len() < n_clients {
        return Err(DataError::TooFewSamples {
            n_samples: labels.len(),
            n_clients,
        });
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        let slot = by_class.get_mut(c).ok_or_else(|| {
            DataError::InvalidArgument(format!("label {c} outside [0, {classes})"))
        })?;
        slot.push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(DataError::EmptyClass(k));
    }

    let gamma = Gamma::new(alpha, 1.0).map_err(|_| DataError::InvalidAlpha(alpha))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignments = vec![Vec::new(); n_clients];
    for indices in &mut by_class {
        let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let p: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            vec![1.0 / n_clients as f64; n_clients]
        };
        indices.shuffle(&mut rng);
        let n_k = indices.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (j, share) in p.iter().enumerate() {
            cum += share;
            let end = if j + 1 == n_clients {
                n_k
            } else {
                ((n_k as f64 * cum).round() as usize).clamp(start, n_k)
            };
            assignments[j].extend_from_slice(&indices[start..end]);
            start = end;
        }
    }

    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let largest = (0..n_clients)
            .max_by_key(|&j| (assignments[j].len(), std::cmp::Reverse(j)))
            .expect("at least one client");
        let moved = assignments[largest].pop().expect("largest client is non-empty");
        tracing::info!(from = largest, to = empty, sample = moved, "repaired empty client");
        assignments[empty].push(moved);
    }

    let mut per_class_counts = vec![vec![0; classes]; n_clients];
    for (j, a) in assignments.iter_mut().enumerate() {
        a.sort_unstable();
        for &i in a.iter() {
            per_class_counts[j][labels[i]] += 1;
        }
    }
    Ok(PartitionSpec {
        alpha,
        seed,
        n_clients,
        assignments,
        per_class_counts,
    })
}

/// Fraction of each class among `counts`.
pub fn label_distribution(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Mean over clients of the total-variation distance between the client's label distribution
/// and the pooled one.
pub fn tv_heterogeneity(spec: &PartitionSpec) -> f64 {
    let classes = spec.per_class_counts.first().map_or(0, Vec::len);
    let mut pooled = vec![0; classes];
    for counts in &spec.per_class_counts {
        for (p, c) in pooled.iter_mut().zip(counts) {
            *p += c;
        }
    }
    let global = label_distribution(&pooled);
    let total: f64 = spec
        .per_class_counts
        .iter()
        .map(|counts| {
            let local = label_distribution(counts);
            0.5 * local
                .iter()
                .zip(&global)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    total / spec.n_clients as f64
}
