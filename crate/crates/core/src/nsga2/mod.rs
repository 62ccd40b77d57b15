//! NSGA-II: fast non-dominated sorting, crowding distance, crowded binary
//! tournaments and (rank, crowding) elitist truncation.
//!
//! Infeasible individuals are handled by constraint domination: they form a
//! last front below every feasible individual and lose every tournament
//! against a feasible opponent.

mod cnn_search;

pub use cnn_search::{cnn_search_problem, CnnSearchProblem, SearchBudget, SEARCH_GENES};

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::derive_seed;

#[derive(Debug, Error)]
pub enum NsgaError {
    #[error("objective vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("invalid bounds for gene {0}")]
    InvalidBounds(usize),
    #[error("individual is not ranked")]
    Unranked,
    #[error("every one of the {population} initial individuals is infeasible")]
    AllInfeasible { population: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NsgaError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genes: Vec<f64>,
    /// Empty when infeasible.
    pub objectives: Vec<f64>,
    /// Front index starting at 1; 0 until ranked.
    pub rank: usize,
    pub crowding: f64,
    pub feasible: bool,
}

impl Individual {
    fn unranked(genes: Vec<f64>, objectives: Option<Vec<f64>>) -> Self {
        let feasible = objectives.as_ref().is_some_and(|o| o.iter().all(|v| v.is_finite()));
        Self {
            genes,
            objectives: if feasible { objectives.unwrap_or_default() } else { Vec::new() },
            rank: 0,
            crowding: 0.0,
            feasible,
        }
    }
}

/// A problem the optimizer can search. `evaluate` must be a pure function of
/// its arguments; `None` marks the candidate infeasible.
pub trait MooProblem: Sync {
    type Candidate;

    fn bounds(&self) -> &[(f64, f64)];
    fn objective_count(&self) -> usize;
    fn decode(&self, genes: &[f64]) -> Self::Candidate;
    fn evaluate(&self, candidate: &Self::Candidate, seed: u64) -> Option<Vec<f64>>;

    /// Named, printable fields of a decoded candidate, for front exports.
    fn describe(&self, _candidate: &Self::Candidate) -> Vec<(String, String)> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NsgaOptions {
    pub population: usize,
    pub generations: usize,
    pub crossover_fraction: f64,
    pub pareto_fraction: f64,
    pub sbx_eta: f64,
    pub mutation_eta: f64,
    /// Per-gene mutation probability; `None` means 1/genes.
    pub mutation_rate: Option<f64>,
    pub seed: u64,
}

impl Default for NsgaOptions {
    fn default() -> Self {
        Self {
            population: 200,
            generations: 20,
            crossover_fraction: 0.8,
            pareto_fraction: 0.2,
            sbx_eta: 15.0,
            mutation_eta: 20.0,
            mutation_rate: None,
            seed: 0,
        }
    }
}

impl NsgaOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NsgaError::InvalidOptions(m.into()));
        if self.population < 4 || self.population % 2 != 0 {
            return bad("population must be even and at least 4");
        }
        for (name, f) in [("crossover_fraction", self.crossover_fraction), ("pareto_fraction", self.pareto_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return bad(&format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.sbx_eta >= 0.0 && self.mutation_eta >= 0.0) {
            return bad("distribution indices must be non-negative");
        }
        if let Some(r) = self.mutation_rate {
            if !(0.0..=1.0).contains(&r) {
                return bad("mutation_rate must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsgaResult {
    pub population: Vec<Individual>,
    /// Rank-1 feasible members of the final population.
    pub pareto: Vec<Individual>,
    pub evaluations: usize,
}

/// Pareto dominance for minimization.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(NsgaError::LengthMismatch(a.len(), b.len()));
    }
    Ok(dominates_unchecked(a, b))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strictly |= x < y;
    }
    strictly
}

/// Deb's fast non-dominated sort. Fronts are returned best first, each in
/// ascending index order.
pub fn non_dominated_sort(objectives: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let n = objectives.len();
    let mut dominated_by_me: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for p in 0..n {
        for q in (p + 1)..n {
            if dominates_unchecked(&objectives[p], &objectives[q]) {
                dominated_by_me[p].push(q);
                count[q] += 1;
            } else if dominates_unchecked(&objectives[q], &objectives[p]) {
                dominated_by_me[q].push(p);
                count[p] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated_by_me[p] {
                count[q] -= 1;
                if count[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of one front. Boundary members of every
/// objective get +inf; a degenerate objective contributes nothing.
pub fn crowding_distance(front: &[Vec<f64>]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let k = front[0].len();
    let mut dist = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..k {
        order.sort_by(|&a, &b| front[a][j].total_cmp(&front[b][j]).then(a.cmp(&b)));
        let (lo, hi) = (front[order[0]][j], front[order[n - 1]][j]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            dist[order[w]] += (front[order[w + 1]][j] - front[order[w - 1]][j]) / span;
        }
    }
    dist
}

/// Feasibility, then rank, then crowding; a full tie is a fair coin flip.
/// Returns `true` when `a` wins.
pub fn crowded_tournament<R: Rng>(a: &Individual, b: &Individual, rng: &mut R) -> Result<bool> {
    if a.rank == 0 || b.rank == 0 {
        return Err(NsgaError::Unranked);
    }
    Ok(match compare(a, b) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => rng.random::<bool>(),
    })
}

/// `Less` means `a` is preferred.
fn compare(a: &Individual, b: &Individual) -> Ordering {
    b.feasible.cmp(&a.feasible).then(a.rank.cmp(&b.rank)).then(b.crowding.total_cmp(&a.crowding))
}

/// Assigns rank and crowding to every individual and returns the fronts.
/// Infeasible individuals share the last front with zero crowding.
fn rank_population(pop: &mut [Individual]) -> Vec<Vec<usize>> {
    let feasible: Vec<usize> = (0..pop.len()).filter(|&i| pop[i].feasible).collect();
    let objs: Vec<Vec<f64>> = feasible.iter().map(|&i| pop[i].objectives.clone()).collect();
    let mut fronts: Vec<Vec<usize>> =
        non_dominated_sort(&objs).into_iter().map(|f| f.into_iter().map(|i| feasible[i]).collect()).collect();
    for (r, front) in fronts.iter().enumerate() {
        let fo: Vec<Vec<f64>> = front.iter().map(|&i| pop[i].objectives.clone()).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&fo)) {
            pop[i].rank = r + 1;
            pop[i].crowding = d;
        }
    }
    let infeasible: Vec<usize> = (0..pop.len()).filter(|&i| !pop[i].feasible).collect();
    if !infeasible.is_empty() {
        for &i in &infeasible {
            pop[i].rank = fronts.len() + 1;
            pop[i].crowding = 0.0;
        }
        fronts.push(infeasible);
    }
    fronts
}

/// Picks `target` survivors from a ranked pool. The first front keeps at most
/// `round(pareto_fraction * target)` members while lower fronts can fill the
/// rest; within the front that overflows, larger crowding wins.
fn truncate(pool: &[Individual], fronts: &[Vec<usize>], target: usize, pareto_fraction: f64) -> Vec<usize> {
    let by_crowding = |front: &[usize]| {
        let mut f = front.to_vec();
        f.sort_by(|&a, &b| pool[b].crowding.total_cmp(&pool[a].crowding).then(a.cmp(&b)));
        f
    };
    let mut chosen = Vec::with_capacity(target);
    let first_len = fronts.first().map_or(0, Vec::len);
    let others = pool.len() - first_len;
    let cap =
        ((pareto_fraction * target as f64).round() as usize).max(1).max(target.saturating_sub(others)).min(target);
    for (r, front) in fronts.iter().enumerate() {
        let room = if r == 0 { cap } else { target - chosen.len() };
        if front.len() <= room {
            chosen.extend_from_slice(front);
        } else {
            chosen.extend(by_crowding(front).into_iter().take(room));
        }
        if chosen.len() == target {
            break;
        }
    }
    chosen
}

fn sbx_pair<R: Rng>(p1: &[f64], p2: &[f64], bounds: &[(f64, f64)], eta: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = p1.to_vec();
    let mut c2 = p2.to_vec();
    for (g, &(lo, hi)) in bounds.iter().enumerate() {
        if rng.random::<f64>() > 0.5 || (p1[g] - p2[g]).abs() <= 1e-14 || hi <= lo {
            continue;
        }
        let (y1, y2) = if p1[g] < p2[g] { (p1[g], p2[g]) } else { (p2[g], p1[g]) };
        let u: f64 = rng.random();
        let spread = |beta: f64| {
            let alpha = 2.0 - beta.powf(-(eta + 1.0));
            if u <= 1.0 / alpha {
                (u * alpha).powf(1.0 / (eta + 1.0))
            } else {
                (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
            }
        };
        let bq1 = spread(1.0 + 2.0 * (y1 - lo) / (y2 - y1));
        let bq2 = spread(1.0 + 2.0 * (hi - y2) / (y2 - y1));
        let mut a = (0.5 * ((y1 + y2) - bq1 * (y2 - y1))).clamp(lo, hi);
        let mut b = (0.5 * ((y1 + y2) + bq2 * (y2 - y1))).clamp(lo, hi);
        if rng.random::<bool>() {
            std::mem::swap(&mut a, &mut b);
        }
        c1[g] = a;
        c2[g] = b;
    }
    (c1, c2)
}

fn polynomial_mutation<R: Rng>(genes: &mut [f64], bounds: &[(f64, f64)], eta: f64, rate: f64, rng: &mut R) {
    for (y, &(lo, hi)) in genes.iter_mut().zip(bounds) {
        if rng.random::<f64>() >= rate || hi <= lo {
            continue;
        }
        let span = hi - lo;
        let (d1, d2) = ((*y - lo) / span, (hi - *y) / span);
        let r: f64 = rng.random();
        let pow = 1.0 / (eta + 1.0);
        let dq = if r < 0.5 {
            let v = 2.0 * r + (1.0 - 2.0 * r) * (1.0 - d1).powf(eta + 1.0);
            v.powf(pow) - 1.0
        } else {
            let v = 2.0 * (1.0 - r) + 2.0 * (r - 0.5) * (1.0 - d2).powf(eta + 1.0);
            1.0 - v.powf(pow)
        };
        *y = (*y + dq * span).clamp(lo, hi);
    }
}

fn evaluate_all<P: MooProblem>(problem: &P, genes: Vec<Vec<f64>>, generation_seed: u64) -> Vec<Individual> {
    genes
        .into_par_iter()
        .enumerate()
        .map(|(i, g)| {
            let candidate = problem.decode(&g);
            let objectives = problem.evaluate(&candidate, derive_seed(generation_seed, i as u64));
            let objectives = objectives.filter(|o| o.len() == problem.objective_count());
            Individual::unranked(g, objectives)
        })
        .collect()
}

pub fn evolve<P: MooProblem>(problem: &P, options: &NsgaOptions) -> Result<NsgaResult> {
    evolve_observed(problem, options, |_, _| {})
}

/// Like [`evolve`], calling `observe(generation, population)` after the
/// initial ranking (generation 0) and after every survivor selection.
pub fn evolve_observed<P, F>(problem: &P, options: &NsgaOptions, mut observe: F) -> Result<NsgaResult>
where
    P: MooProblem,
    F: FnMut(usize, &[Individual]),
{
    options.validate()?;
    let bounds = problem.bounds();
    for (g, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(NsgaError::InvalidBounds(g));
        }
    }
    let n = options.population;
    let rate = options.mutation_rate.unwrap_or(1.0 / bounds.len().max(1) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let eval_seed = |generation: usize| derive_seed(options.seed, generation as u64);

    let init: Vec<Vec<f64>> =
        (0..n).map(|_| bounds.iter().map(|&(lo, hi)| lo + rng.random::<f64>() * (hi - lo)).collect()).collect();
    let mut pop = evaluate_all(problem, init, eval_seed(0));
    let mut evaluations = n;
    if pop.iter().all(|i| !i.feasible) {
        return Err(NsgaError::AllInfeasible { population: n });
    }
    rank_population(&mut pop);
    observe(0, &pop);

    for generation in 1..=options.generations {
        let mut parents = Vec::with_capacity(n);
        for _ in 0..n {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let a_wins = crowded_tournament(&pop[a], &pop[b], &mut rng)?;
            parents.push(if a_wins { a } else { b });
        }
        let mut children = Vec::with_capacity(n);
        for pair in parents.chunks_exact(2) {
            let (p1, p2) = (&pop[pair[0]].genes, &pop[pair[1]].genes);
            if rng.random::<f64>() < options.crossover_fraction {
                let (c1, c2) = sbx_pair(p1, p2, bounds, options.sbx_eta, &mut rng);
                children.push(c1);
                children.push(c2);
            } else {
                for p in [p1, p2] {
                    let mut c = p.clone();
                    polynomial_mutation(&mut c, bounds, options.mutation_eta, rate, &mut rng);
                    children.push(c);
                }
            }
        }
        let offspring = evaluate_all(problem, children, eval_seed(generation));
        evaluations += n;

        let mut pool = pop;
        pool.extend(offspring);
        let fronts = rank_population(&mut pool);
        let keep = truncate(&pool, &fronts, n, options.pareto_fraction);
        let mut next: Vec<Individual> = keep.into_iter().map(|i| pool[i].clone()).collect();
        rank_population(&mut next);
        pop = next;
        observe(generation, &pop);
    }

    let pareto = pop.iter().filter(|i| i.feasible && i.rank == 1).cloned().collect();
    Ok(NsgaResult { population: pop, pareto, evaluations })
}

/// Writes one CSV row per individual: genes, objectives, then the decoded
/// candidate's described fields.
pub fn write_front_csv<P: MooProblem, W: Write>(problem: &P, front: &[Individual], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let genes = problem.bounds().len();
    let k = problem.objective_count();
    let described = front.first().map(|i| problem.describe(&problem.decode(&i.genes)));
    let mut header: Vec<String> = (0..genes).map(|g| format!("gene_{g}")).collect();
    header.extend((1..=k).map(|j| format!("f{j}")));
    if let Some(fields) = &described {
        header.extend(fields.iter().map(|(name, _)| name.clone()));
    }
    w.write_record(&header)?;
    for ind in front {
        let mut row: Vec<String> = ind.genes.iter().map(|g| g.to_string()).collect();
        if ind.feasible {
            row.extend(ind.objectives.iter().map(|o| o.to_string()));
        } else {
            row.extend(std::iter::repeat_n(String::new(), k));
        }
        row.extend(problem.describe(&problem.decode(&ind.genes)).into_iter().map(|(_, v)| v));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
