//! Affinity propagation with an adaptive preference scan.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sq_dist, validate_data, ClusterError, ClusterResult, Result};
use crate::numeric::median;

/// Dense `n × n` similarity matrix; the diagonal holds the preference.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    s: Vec<f64>,
    median: f64,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    /// Median of the off-diagonal similarities (before any tie-break noise).
    pub fn median(&self) -> f64 {
        self.median
    }

    pub fn preference(&self) -> f64 {
        self.s[0]
    }

    pub fn set_preference(&mut self, p: f64) {
        for i in 0..self.n {
            self.s[i * self.n + i] = p;
        }
    }

    /// Adds seeded symmetric noise of relative size `scale` to the off-diagonal.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = scale * self.median.abs().max(f64::MIN_POSITIVE);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let e = amp * rng.random_range(-1.0..1.0);
                self.s[i * self.n + j] += e;
                self.s[j * self.n + i] += e;
            }
        }
    }
}

/// `S(i, j) = -‖x_i - x_j‖²` off the diagonal; the diagonal starts at the
/// median of the off-diagonal values.
pub fn similarity(data: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    validate_data(data, 2)?;
    let n = data.len();
    let mut s = vec![0.0; n * n];
    let mut off = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = -sq_dist(&data[i], &data[j]);
                s[i * n + j] = v;
                off.push(v);
            }
        }
    }
    let med = median(&off);
    let mut m = SimilarityMatrix { n, s, median: med };
    m.set_preference(med);
    Ok(m)
}

/// Responsibility and availability matrices with the current damping factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub n: usize,
    pub r: Vec<f64>,
    pub a: Vec<f64>,
    pub lambda: f64,
    pub iteration: usize,
}

impl MessageState {
    pub fn new(n: usize, lambda: f64) -> Self {
        Self { n, r: vec![0.0; n * n], a: vec![0.0; n * n], lambda, iteration: 0 }
    }

    /// One full update in place: raw responsibilities from the previous
    /// availabilities, raw availabilities from the raw responsibilities, then
    /// both damped as `(1 - λ)·raw + λ·previous`.
    pub fn step(&mut self, s: &SimilarityMatrix) -> Result<()> {
        let n = self.n;
        let lam = self.lambda;
        let mut raw_r = vec![0.0; n * n];
        for i in 0..n {
            let row = i * n;
            // two largest of A(i, ·) + S(i, ·) over every column
            let (mut m1, mut m2, mut arg) = (f64::NEG_INFINITY, f64::NEG_INFINITY, usize::MAX);
            for j in 0..n {
                let v = self.a[row + j] + s.s[row + j];
                if v > m1 {
                    m2 = m1;
                    m1 = v;
                    arg = j;
                } else if v > m2 {
                    m2 = v;
                }
            }
            let mut max_s = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    max_s = max_s.max(s.s[row + j]);
                }
            }
            for j in 0..n {
                raw_r[row + j] =
                    if j == i { s.s[row + j] - max_s } else { s.s[row + j] - if j == arg { m2 } else { m1 } };
            }
        }

        let mut raw_a = vec![0.0; n * n];
        for j in 0..n {
            let mut pos = 0.0;
            for i in 0..n {
                if i != j {
                    pos += raw_r[i * n + j].max(0.0);
                }
            }
            let rjj = raw_r[j * n + j];
            for i in 0..n {
                raw_a[i * n + j] = if i == j { pos } else { (rjj + pos - raw_r[i * n + j].max(0.0)).min(0.0) };
            }
        }

        for k in 0..n * n {
            self.r[k] = (1.0 - lam) * raw_r[k] + lam * self.r[k];
            self.a[k] = (1.0 - lam) * raw_a[k] + lam * self.a[k];
        }
        self.iteration += 1;
        if self.r.iter().chain(&self.a).any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFiniteMessage(self.iteration));
        }
        Ok(())
    }
}

/// Pure form of [`MessageState::step`].
pub fn ap_iterate(state: &MessageState, s: &SimilarityMatrix) -> Result<MessageState> {
    let mut next = state.clone();
    next.step(s)?;
    Ok(next)
}

/// Each sample picks the column maximizing `R + A` in its row; every chosen
/// sample is then made its own exemplar.
pub fn extract_exemplars(state: &MessageState) -> ClusterResult {
    let n = state.n;
    let mut choice: Vec<usize> = (0..n)
        .map(|i| {
            let row = i * n;
            let mut best = 0;
            for j in 1..n {
                if state.r[row + j] + state.a[row + j] > state.r[row + best] + state.a[row + best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let chosen = choice.clone();
    for &e in &chosen {
        choice[e] = e;
    }
    ClusterResult::from_exemplar_choice(&choice)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapOptions {
    /// Iterations an exemplar set must survive to count as converged.
    pub window: usize,
    /// Hard cap on total message-passing iterations.
    pub max_sweeps: usize,
    pub initial_lambda: f64,
    pub lambda_step: f64,
    pub lambda_max: f64,
    /// Relative size of the tie-breaking jitter on the similarities.
    pub noise: f64,
    /// Cluster on z-scored columns instead of raw values.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for AdapOptions {
    fn default() -> Self {
        Self {
            window: 50,
            max_sweeps: 50_000,
            initial_lambda: 0.5,
            lambda_step: 0.05,
            lambda_max: 0.95,
            noise: 1e-12,
            standardize: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanStep {
    pub iteration: usize,
    pub p: f64,
    pub lambda: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceEvent {
    pub iteration: usize,
    pub p: f64,
    pub k: usize,
    pub silhouette: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapOutcome {
    pub best: ClusterResult,
    pub events: Vec<ConvergenceEvent>,
    pub trace: Vec<ScanStep>,
}

/// Number of direction changes in a sequence of cluster counts.
fn direction_changes(ks: &[usize]) -> usize {
    let mut changes = 0;
    let mut last = 0i8;
    for w in ks.windows(2) {
        let d = (w[1] as i64 - w[0] as i64).signum() as i8;
        if d != 0 {
            if last != 0 && d != last {
                changes += 1;
            }
            last = d;
        }
    }
    changes
}

/// Runs affinity propagation while lowering the preference each time the
/// exemplar set settles, and returns the settled clustering with the best
/// average silhouette.
///
/// After the c-th settled state with K exemplars the preference drops by
/// `c · 0.01 · |median| / (0.1 · sqrt(K + 50))`. If K keeps reversing
/// direction within a window the damping factor rises by `lambda_step`.
/// The scan ends once it settles at two or fewer clusters, or when damping is
/// already at its cap and another window oscillates.
pub fn adap_run(data: &[Vec<f64>], options: &AdapOptions) -> Result<AdapOutcome> {
    validate_data(data, 4)?;
    if options.window < 2
        || !(options.initial_lambda >= 0.5 && options.lambda_max <= 0.95)
        || options.initial_lambda > options.lambda_max
    {
        return Err(ClusterError::InvalidOption(format!("{options:?}")));
    }
    let scaled;
    let data = if options.standardize {
        scaled = super::standardize(data);
        &scaled[..]
    } else {
        data
    };
    let mut s = similarity(data)?;
    let p_median = s.median();
    if p_median == 0.0 {
        return Err(ClusterError::Degenerate);
    }
    s.jitter(options.noise, options.seed);

    let mut state = MessageState::new(s.n(), options.initial_lambda);
    let mut p = p_median;
    let mut counter = 0usize;
    let mut stable = 0usize;
    let mut last_exemplars: Vec<usize> = Vec::new();
    let mut recent_k: Vec<usize> = Vec::with_capacity(options.window);
    let mut trace = Vec::new();
    let mut events: Vec<ConvergenceEvent> = Vec::new();
    let mut candidates: Vec<ClusterResult> = Vec::new();

    while state.iteration < options.max_sweeps {
        state.step(&s)?;
        let current = extract_exemplars(&state);
        trace.push(ScanStep { iteration: state.iteration, p, lambda: state.lambda, k: current.k });

        if current.exemplars == last_exemplars {
            stable += 1;
        } else {
            stable = 1;
            last_exemplars = current.exemplars.clone();
        }
        recent_k.push(current.k);
        if recent_k.len() > options.window {
            recent_k.remove(0);
        }

        if stable >= options.window {
            let k = current.k;
            let result = if k >= 2 { current.with_silhouette(data) } else { current };
            events.push(ConvergenceEvent { iteration: state.iteration, p, k, silhouette: result.avg_silhouette });
            if result.avg_silhouette.is_some() {
                candidates.push(result);
            }
            if k <= 2 {
                break;
            }
            counter += 1;
            let q = 0.1 * ((k + 50) as f64).sqrt();
            let p_step = 0.01 * p_median.abs() / q;
            p -= counter as f64 * p_step;
            s.set_preference(p);
            stable = 0;
            last_exemplars.clear();
            recent_k.clear();
        } else if recent_k.len() == options.window && direction_changes(&recent_k) >= 3 {
            if state.lambda >= options.lambda_max {
                break;
            }
            state.lambda = (state.lambda + options.lambda_step).min(options.lambda_max);
            recent_k.clear();
        }
    }

    // best silhouette; ties go to the earlier (larger-K) event
    let best = candidates.into_iter().fold(None::<ClusterResult>, |acc, c| match acc {
        Some(b) if b.avg_silhouette >= c.avg_silhouette => Some(b),
        _ => Some(c),
    });
    match best {
        Some(best) => Ok(AdapOutcome { best, events, trace }),
        None => Err(ClusterError::NoConvergence { trace }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Literal transcription of the message equations with naive loops.
    fn oracle_step(s: &[Vec<f64>], r: &mut [Vec<f64>], a: &mut [Vec<f64>], lam: f64) {
        let n = s.len();
        let mut rr = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    let mut m = f64::NEG_INFINITY;
                    for jp in 0..n {
                        if jp != j {
                            m = m.max(s[j][jp]);
                        }
                    }
                    rr[j][j] = s[j][j] - m;
                } else {
                    let mut m = f64::NEG_INFINITY;
                    for jp in 0..n {
                        if jp != j {
                            m = m.max(a[i][jp] + s[i][jp]);
                        }
                    }
                    rr[i][j] = s[i][j] - m;
                }
            }
        }
        let mut aa = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    let mut sum = 0.0;
                    for ip in 0..n {
                        if ip != j {
                            sum += rr[ip][j].max(0.0);
                        }
                    }
                    aa[j][j] = sum;
                } else {
                    let mut sum = 0.0;
                    for ip in 0..n {
                        if ip != i && ip != j {
                            sum += rr[ip][j].max(0.0);
                        }
                    }
                    aa[i][j] = (rr[j][j] + sum).min(0.0);
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                r[i][j] = (1.0 - lam) * rr[i][j] + lam * r[i][j];
                a[i][j] = (1.0 - lam) * aa[i][j] + lam * a[i][j];
            }
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..3).map(|_| rng.random_range(0.0..10.0)).collect()).collect()
    }

    #[test]
    fn similarity_closed_form() {
        let s = similarity(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(s.get(0, 1), -9.0);
        assert_eq!(s.get(1, 0), -9.0);
        assert_eq!(s.get(0, 2), 0.0);
        // off-diagonal values: -9, 0, -9, -9, 0, -9 → median -9
        assert_eq!(s.preference(), -9.0);
        assert!(similarity(&[vec![1.0]]).is_err());
        assert!(similarity(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn similarity_symmetric_non_positive() {
        let data = random_points(12, 4);
        let s = similarity(&data).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    assert_eq!(s.get(i, j), s.get(j, i));
                    assert!(s.get(i, j) <= 0.0);
                    assert_eq!(s.get(i, j), -sq_dist(&data[i], &data[j]));
                }
            }
        }
    }

    #[test]
    fn first_iteration_from_zero() {
        let data = random_points(6, 1);
        let s = similarity(&data).unwrap();
        let st = ap_iterate(&MessageState::new(6, 0.5), &s).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let m = (0..6).filter(|&k| k != j).map(|k| s.get(i, k)).fold(f64::NEG_INFINITY, f64::max);
                let m = if i == j {
                    (0..6).filter(|&k| k != j).map(|k| s.get(j, k)).fold(f64::NEG_INFINITY, f64::max)
                } else {
                    m
                };
                assert!((st.r[i * 6 + j] - 0.5 * (s.get(i, j) - m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_damping_freezes_messages() {
        let data = random_points(5, 2);
        let s = similarity(&data).unwrap();
        let mut st = MessageState::new(5, 0.5);
        for _ in 0..3 {
            st.step(&s).unwrap();
        }
        st.lambda = 1.0;
        let next = ap_iterate(&st, &s).unwrap();
        assert_eq!(next.r, st.r);
        assert_eq!(next.a, st.a);
    }

    #[test]
    fn matches_literal_oracle() {
        for (seed, n, lam) in [(7u64, 5usize, 0.5), (8, 10, 0.7), (9, 8, 0.9)] {
            let data = random_points(n, seed);
            let mut s = similarity(&data).unwrap();
            s.jitter(1e-12, seed);
            let sm: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| s.get(i, j)).collect()).collect();
            let mut st = MessageState::new(n, lam);
            let mut r = vec![vec![0.0; n]; n];
            let mut a = vec![vec![0.0; n]; n];
            for _ in 0..100 {
                st.step(&s).unwrap();
                oracle_step(&sm, &mut r, &mut a, lam);
                for i in 0..n {
                    for j in 0..n {
                        assert!((st.r[i * n + j] - r[i][j]).abs() <= 1e-12 * r[i][j].abs().max(1.0));
                        assert!((st.a[i * n + j] - a[i][j]).abs() <= 1e-12 * a[i][j].abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn high_preference_makes_everyone_an_exemplar() {
        let data = random_points(8, 3);
        let mut s = similarity(&data).unwrap();
        s.set_preference(1e6);
        let mut st = MessageState::new(8, 0.5);
        for _ in 0..200 {
            st.step(&s).unwrap();
        }
        assert_eq!(extract_exemplars(&st).k, 8);
    }

    #[test]
    fn low_preference_collapses() {
        // twice the most negative similarity; far beyond that the diagonal
        // responsibility (which ignores availabilities) stops discriminating
        let data = random_points(8, 3);
        let mut s = similarity(&data).unwrap();
        let min = (0..8)
            .flat_map(|i| (0..8).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| s.get(i, j))
            .fold(0.0, f64::min);
        s.set_preference(2.0 * min);
        s.jitter(1e-12, 0);
        let mut st = MessageState::new(8, 0.5);
        for _ in 0..300 {
            st.step(&s).unwrap();
        }
        assert!(extract_exemplars(&st).k <= 2);
    }

    #[test]
    fn two_tight_pairs() {
        let data = vec![vec![0.0, 0.0], vec![10.0, 10.0], vec![0.1, 0.0], vec![10.0, 10.1]];
        let mut s = similarity(&data).unwrap();
        s.jitter(1e-12, 0);
        let mut st = MessageState::new(4, 0.5);
        for _ in 0..300 {
            st.step(&s).unwrap();
        }
        let res = extract_exemplars(&st);
        assert_eq!(res.k, 2);
        assert_eq!(res.labels[0], res.labels[2]);
        assert_eq!(res.labels[1], res.labels[3]);
        assert_ne!(res.labels[0], res.labels[1]);
        for (c, &e) in res.exemplars.iter().enumerate() {
            assert_eq!(res.labels[e], c);
        }
    }

    pub(crate) fn blobs(seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centers = [[0.0, 0.0, 0.0], [40.0, 0.0, 0.0], [0.0, 40.0, 10.0]];
        let mut out = Vec::new();
        for c in centers {
            for _ in 0..30 {
                out.push(c.iter().map(|x| x + noise.sample(&mut rng)).collect());
            }
        }
        out
    }

    #[test]
    fn scan_finds_three_blobs() {
        let data = blobs(21);
        let out = adap_run(&data, &AdapOptions::default()).unwrap();
        assert_eq!(out.best.k, 3);
        assert!(out.best.avg_silhouette.unwrap() > 0.6);
        for b in 0..3 {
            let l = out.best.labels[b * 30];
            assert!(out.best.labels[b * 30..(b + 1) * 30].iter().all(|&x| x == l));
        }
        // the scan runs down to two clusters and its preference only falls
        assert!(out.events.last().unwrap().k <= 2);
        assert!(out.events.windows(2).all(|w| w[1].p < w[0].p));
        assert!(out.trace.windows(2).all(|w| w[1].p <= w[0].p && w[1].lambda >= w[0].lambda));
        assert!(out.trace.iter().all(|t| t.lambda <= 0.95));
    }

    #[test]
    fn oscillation_counter() {
        assert_eq!(direction_changes(&[3, 4, 3, 4, 3]), 3);
        assert_eq!(direction_changes(&[5, 5, 4, 4, 3]), 0);
        assert_eq!(direction_changes(&[5, 6, 6, 5]), 1);
    }
}
