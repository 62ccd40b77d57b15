//! Fixed-K baselines: k-means, fuzzy c-means and Ward agglomeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sq_dist, validate_data, ClusterError, ClusterResult, Result};

const MAX_ITER: usize = 300;
const FCM_TOLERANCE: f64 = 1e-6;

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    Ok(())
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn plus_plus(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centroids = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub result: ClusterResult,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

pub fn kmeans_fit(data: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansFit> {
    let dim = validate_data(data, 1)?;
    check_k(data.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(data, k, &mut rng);
    let mut assign = vec![usize::MAX; data.len()];
    let mut inertia = Vec::new();

    for _ in 0..MAX_ITER {
        let mut changed = false;
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let (c, d) = nearest(x, &centroids);
            total += d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &c) in data.iter().zip(&assign) {
            counts[c] += 1;
            for d in 0..dim {
                sums[c][d] += x[d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // re-seed empty clusters at the point worst served by its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..data.len())
                    .max_by(|&a, &b| {
                        sq_dist(&data[a], &centroids[assign[a]])
                            .total_cmp(&sq_dist(&data[b], &centroids[assign[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty data");
                centroids[c] = data[far].clone();
                assign[far] = c;
            }
        }
    }
    let result = ClusterResult::from_assignment(data, &assign).with_silhouette(data);
    Ok(KMeansFit { result, centroids, inertia })
}

pub fn kmeans(data: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterResult> {
    kmeans_fit(data, k, seed).map(|f| f.result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyFit {
    pub result: ClusterResult,
    pub centroids: Vec<Vec<f64>>,
    /// Row-stochastic `n × k` membership matrix.
    pub memberships: Vec<Vec<f64>>,
    /// Objective `Σ u^m d²` after each membership update.
    pub objective: Vec<f64>,
}

fn fcm_memberships(data: &[Vec<f64>], centroids: &[Vec<f64>], m: f64) -> Vec<Vec<f64>> {
    let k = centroids.len();
    let expo = 1.0 / (m - 1.0);
    data.iter()
        .map(|x| {
            let d2: Vec<f64> = centroids.iter().map(|c| sq_dist(x, c)).collect();
            if let Some(hit) = d2.iter().position(|&d| d == 0.0) {
                let mut row = vec![0.0; k];
                row[hit] = 1.0;
                return row;
            }
            // u_j = 1 / Σ_l (d_j / d_l)^(2/(m-1)), with squared distances
            d2.iter().map(|&dj| 1.0 / d2.iter().map(|&dl| (dj / dl).powf(expo)).sum::<f64>()).collect()
        })
        .collect()
}

fn fcm_centroids(data: &[Vec<f64>], u: &[Vec<f64>], k: usize, m: f64) -> Vec<Vec<f64>> {
    let dim = data[0].len();
    (0..k)
        .map(|c| {
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for (x, row) in data.iter().zip(u) {
                let w = row[c].powf(m);
                den += w;
                for d in 0..dim {
                    num[d] += w * x[d];
                }
            }
            num.iter().map(|v| v / den.max(f64::MIN_POSITIVE)).collect()
        })
        .collect()
}

fn fcm_objective(data: &[Vec<f64>], centroids: &[Vec<f64>], u: &[Vec<f64>], m: f64) -> f64 {
    data.iter()
        .zip(u)
        .map(|(x, row)| row.iter().zip(centroids).map(|(w, c)| w.powf(m) * sq_dist(x, c)).sum::<f64>())
        .sum()
}

pub fn fuzzy_cmeans_fit(data: &[Vec<f64>], k: usize, fuzzifier: f64, seed: u64) -> Result<FuzzyFit> {
    validate_data(data, 1)?;
    check_k(data.len(), k)?;
    if !(fuzzifier > 1.0) {
        return Err(ClusterError::InvalidOption(format!("fuzzifier {fuzzifier} must exceed 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<Vec<f64>> = data
        .iter()
        .map(|_| {
            let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect();
    let mut centroids = fcm_centroids(data, &u, k, fuzzifier);
    let mut objective = Vec::new();
    for _ in 0..MAX_ITER {
        let next = fcm_memberships(data, &centroids, fuzzifier);
        let delta =
            next.iter().zip(&u).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
        u = next;
        objective.push(fcm_objective(data, &centroids, &u, fuzzifier));
        if delta < FCM_TOLERANCE {
            break;
        }
        centroids = fcm_centroids(data, &u, k, fuzzifier);
    }
    let hard: Vec<usize> = u
        .iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let result = ClusterResult::from_assignment(data, &hard).with_silhouette(data);
    Ok(FuzzyFit { result, centroids, memberships: u, objective })
}

pub fn fuzzy_cmeans(data: &[Vec<f64>], k: usize, fuzzifier: f64, seed: u64) -> Result<ClusterResult> {
    fuzzy_cmeans_fit(data, k, fuzzifier, seed).map(|f| f.result)
}

/// Ward-linkage agglomeration cut at `k` clusters, via Lance–Williams updates
/// on squared Euclidean distances. Ties merge the lowest index pair.
pub fn agglomerative(data: &[Vec<f64>], k: usize) -> Result<ClusterResult> {
    validate_data(data, 1)?;
    let n = data.len();
    check_k(n, k)?;
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&data[i], &data[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut clusters = n;
    while clusters > k {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if active[j] && d[i][j] < best.2 {
                    best = (i, j, d[i][j]);
                }
            }
        }
        let (i, j, dij) = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for m in 0..n {
            if active[m] && m != i && m != j {
                let nm = size[m] as f64;
                let v = ((ni + nm) * d[i][m] + (nj + nm) * d[j][m] - nm * dij) / (ni + nj + nm);
                d[i][m] = v;
                d[m][i] = v;
            }
        }
        size[i] += size[j];
        active[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
        clusters -= 1;
    }
    Ok(ClusterResult::from_assignment(data, &owner).with_silhouette(data))
}
