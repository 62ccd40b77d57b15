//! Cohort clustering: adaptive affinity propagation plus the k-means, fuzzy
//! c-means and Ward baselines, silhouette scoring and dispersion metrics.

mod affinity;
mod baselines;

pub use affinity::{
    adap_run, ap_iterate, extract_exemplars, similarity, AdapOptions, AdapOutcome, ConvergenceEvent, MessageState,
    ScanStep, SimilarityMatrix,
};
pub use baselines::{agglomerative, fuzzy_cmeans, fuzzy_cmeans_fit, kmeans, kmeans_fit, FuzzyFit, KMeansFit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{mean, population_sd};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("sample {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("k = {k} invalid for {n} samples")]
    InvalidK { k: usize, n: usize },
    #[error("silhouette needs at least two clusters")]
    SingleCluster,
    #[error("labels length {got} does not match {expected} samples")]
    LabelLength { got: usize, expected: usize },
    #[error("non-finite message at iteration {0}")]
    NonFiniteMessage(usize),
    #[error("all samples coincide; the similarity matrix carries no structure")]
    Degenerate,
    #[error("affinity propagation never converged ({} scan steps)", .trace.len())]
    NoConvergence { trace: Vec<ScanStep> },
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// A hard partition. `labels[i]` indexes `exemplars`, which hold sample
/// indices; `labels[exemplars[c]] == c` for every cluster `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub exemplars: Vec<usize>,
    pub k: usize,
    pub avg_silhouette: Option<f64>,
}

impl ClusterResult {
    /// Builds a result from a per-sample exemplar choice where every chosen
    /// exemplar already points at itself. Clusters are ordered by exemplar index.
    pub(crate) fn from_exemplar_choice(choice: &[usize]) -> Self {
        let mut exemplars: Vec<usize> = choice.to_vec();
        exemplars.sort_unstable();
        exemplars.dedup();
        let labels = choice.iter().map(|e| exemplars.binary_search(e).expect("choice is an exemplar")).collect();
        let k = exemplars.len();
        Self { labels, exemplars, k, avg_silhouette: None }
    }

    /// Builds a result from arbitrary cluster ids, picking as exemplar the
    /// member nearest the cluster mean. Clusters are renumbered by first
    /// appearance.
    pub(crate) fn from_assignment(data: &[Vec<f64>], assign: &[usize]) -> Self {
        let mut map: Vec<(usize, usize)> = Vec::new();
        let labels: Vec<usize> = assign
            .iter()
            .map(|a| match map.iter().find(|(raw, _)| raw == a) {
                Some(&(_, l)) => l,
                None => {
                    map.push((*a, map.len()));
                    map.len() - 1
                }
            })
            .collect();
        let k = map.len();
        let dim = data.first().map_or(0, Vec::len);
        let mut exemplars = Vec::with_capacity(k);
        for c in 0..k {
            let members: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == c).collect();
            let mut centroid = vec![0.0; dim];
            for &i in &members {
                for d in 0..dim {
                    centroid[d] += data[i][d];
                }
            }
            centroid.iter_mut().for_each(|x| *x /= members.len() as f64);
            let nearest = *members
                .iter()
                .min_by(|&&a, &&b| sq_dist(&data[a], &centroid).total_cmp(&sq_dist(&data[b], &centroid)))
                .expect("clusters are non-empty");
            exemplars.push(nearest);
        }
        Self { labels, exemplars, k, avg_silhouette: None }
    }

    pub(crate) fn with_silhouette(mut self, data: &[Vec<f64>]) -> Self {
        self.avg_silhouette = silhouette(data, &self.labels).ok().map(|(_, avg)| avg);
        self
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn validate_data(data: &[Vec<f64>], min_n: usize) -> Result<usize> {
    if data.len() < min_n {
        return Err(ClusterError::TooFewSamples { need: min_n, got: data.len() });
    }
    let dim = data[0].len();
    for (index, x) in data.iter().enumerate() {
        if x.len() != dim || dim == 0 {
            return Err(ClusterError::Dimension { index, got: x.len(), expected: dim });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite(index));
        }
    }
    Ok(dim)
}

/// Per-sample silhouette and its average, with Euclidean dissimilarity.
/// Members of singleton clusters score 0.
pub fn silhouette(data: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<f64>, f64)> {
    let n = data.len();
    if labels.len() != n {
        return Err(ClusterError::LabelLength { got: labels.len(), expected: n });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let sizes: Vec<usize> = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).collect();
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(ClusterError::SingleCluster);
    }
    let mut scores = Vec::with_capacity(n);
    let mut sums = vec![0.0; k];
    for t in 0..n {
        let own = labels[t];
        if sizes[own] == 1 {
            scores.push(0.0);
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for u in 0..n {
            if u != t {
                sums[labels[u]] += sq_dist(&data[t], &data[u]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        scores.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    let avg = mean(&scores);
    Ok((scores, avg))
}

/// Population SD of `values` within each cluster, averaged with equal weight
/// per non-empty cluster.
pub fn avg_cluster_sd(values: &[f64], labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let sds: Vec<f64> = (0..k)
        .filter_map(|c| {
            let members: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l == c).map(|(v, _)| *v).collect();
            (!members.is_empty()).then(|| population_sd(&members))
        })
        .collect();
    mean(&sds)
}

/// Column-wise z-scores; constant columns are left centered at zero.
pub fn standardize(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = data.first().map_or(0, Vec::len);
    let mut out: Vec<Vec<f64>> = data.to_vec();
    for d in 0..dim {
        let col: Vec<f64> = data.iter().map(|x| x[d]).collect();
        let (m, sd) = (mean(&col), population_sd(&col));
        for row in out.iter_mut() {
            row[d] = if sd > 0.0 { (row[d] - m) / sd } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sd_closed_form() {
        let values = [1.0, 3.0, 10.0, 10.0];
        let labels = [0, 0, 1, 1];
        assert_eq!(avg_cluster_sd(&values, &labels), 0.5);
        assert_eq!(avg_cluster_sd(&[4.0; 5], &[0, 1, 1, 2, 2]), 0.0);
    }

    #[test]
    fn silhouette_far_clusters_near_one() {
        let mut data = Vec::new();
        for i in 0..5 {
            data.push(vec![i as f64 * 1e-3]);
            data.push(vec![1e3 + i as f64 * 1e-3]);
        }
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let (_, avg) = silhouette(&data, &labels).unwrap();
        assert!(avg > 0.999);
    }

    #[test]
    fn silhouette_singletons_and_errors() {
        let data = vec![vec![0.0], vec![0.1], vec![5.0]];
        let (s, _) = silhouette(&data, &[0, 0, 1]).unwrap();
        assert_eq!(s[2], 0.0);
        assert_eq!(silhouette(&data, &[0, 0, 0]), Err(ClusterError::SingleCluster));
        assert!(matches!(silhouette(&data, &[0, 1]), Err(ClusterError::LabelLength { .. })));
    }

    fn silhouette_oracle(data: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
        let dist =
            |a: &Vec<f64>, b: &Vec<f64>| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
        let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        (0..data.len())
            .map(|t| {
                let own: Vec<usize> = (0..data.len()).filter(|&u| labels[u] == labels[t]).collect();
                if own.len() == 1 {
                    return 0.0;
                }
                let a = own.iter().filter(|&&u| u != t).map(|&u| dist(&data[t], &data[u])).sum::<f64>()
                    / (own.len() - 1) as f64;
                let b = clusters
                    .iter()
                    .filter(|&&c| c != labels[t])
                    .map(|&c| {
                        let m: Vec<usize> = (0..data.len()).filter(|&u| labels[u] == c).collect();
                        m.iter().map(|&u| dist(&data[t], &data[u])).sum::<f64>() / m.len() as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                (b - a) / a.max(b)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn silhouette_matches_oracle_and_is_label_invariant(
            pts in proptest::collection::vec(proptest::array::uniform2(-5.0f64..5.0), 6..20),
            raw in proptest::collection::vec(0usize..4, 20),
        ) {
            let data: Vec<Vec<f64>> = pts.iter().map(|p| p.to_vec()).collect();
            let labels: Vec<usize> = raw[..data.len()].to_vec();
            prop_assume!(labels.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
            let (s, avg) = silhouette(&data, &labels).unwrap();
            let oracle = silhouette_oracle(&data, &labels);
            for (a, b) in s.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(a));
            }
            let permuted: Vec<usize> = labels.iter().map(|l| (l + 1) % 4).collect();
            let (s2, avg2) = silhouette(&data, &permuted).unwrap();
            prop_assert_eq!(s, s2);
            prop_assert_eq!(avg, avg2);
        }
    }
}
