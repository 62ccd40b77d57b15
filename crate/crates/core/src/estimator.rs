//! Recovers electrode aging parameters from differential feature charges.
//!
//! A candidate [`Eaps`] defines a full-cell OCV curve. Its lower-cutoff root
//! anchors the feature points: the i-th point sits at the anchor plus the
//! running sum of the supplied charge differences, and should read the i-th
//! feature voltage. The squared voltage mismatch is minimized with a particle
//! swarm whose worst members are re-bred by a small genetic step each
//! generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrode::{CellModel, Eaps, ElectrodeError, FRESH_EAPS, LOWER_CUTOFF_V, UPPER_CUTOFF_V};
use crate::numeric::derive_seed;
use crate::signal::{feature_voltages, FeaturePointSet, OcvCurve, SignalError, FEATURE_COUNT};

/// Bisection tolerance on the anchor, mAh.
pub const ANCHOR_TOLERANCE_MAH: f64 = 1e-6;

/// Loss added for each anchored feature point outside the curve's domain, V².
pub const POINT_PENALTY: f64 = 1.0;

/// Loss of a candidate whose curve never reaches the lower cutoff, V².
pub const ANCHOR_PENALTY: f64 = FEATURE_COUNT as f64 * POINT_PENALTY;

/// Spacing of reconstructed curves, mAh.
pub const RECONSTRUCT_STEP_MAH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("curve never reaches the {0} V anchor voltage")]
    InfeasibleAnchor(f64),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid swarm options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Electrode(#[from] ElectrodeError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

/// Inclusive search intervals for `q_pe`, `q_ne` and `q_offset` (mAh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EapBounds {
    pub q_pe: [f64; 2],
    pub q_ne: [f64; 2],
    pub q_offset: [f64; 2],
}

impl EapBounds {
    /// `[0.5, 1.5]×` the fresh electrode capacities, offset in `[0, 0.5·q_pe]`.
    pub fn around(fresh: &Eaps) -> Self {
        Self {
            q_pe: [0.5 * fresh.q_pe, 1.5 * fresh.q_pe],
            q_ne: [0.5 * fresh.q_ne, 1.5 * fresh.q_ne],
            q_offset: [0.0, 0.5 * fresh.q_pe],
        }
    }

    pub fn point(eaps: &Eaps) -> Self {
        Self { q_pe: [eaps.q_pe; 2], q_ne: [eaps.q_ne; 2], q_offset: [eaps.q_offset; 2] }
    }

    fn as_array(&self) -> [[f64; 2]; 3] {
        [self.q_pe, self.q_ne, self.q_offset]
    }

    /// A collapsed interval (`low == high`) pins that parameter.
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in ["q_pe", "q_ne", "q_offset"].iter().zip(self.as_array()) {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
                return Err(EstimatorError::InvalidBounds(format!("{name}: [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, eaps: &Eaps) -> bool {
        self.as_array().iter().zip(eaps.as_array()).all(|([lo, hi], x)| *lo <= x && x <= *hi)
    }
}

impl Default for EapBounds {
    fn default() -> Self {
        Self::around(&FRESH_EAPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoGaOptions {
    pub swarm_size: usize,
    pub max_iterations: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub ga_fraction: f64,
    pub tournament_size: usize,
    /// Gaussian mutation SD as a fraction of each parameter's range.
    pub mutation_scale: f64,
    pub stall_tolerance: f64,
    pub stall_iterations: usize,
    /// Extra runs from fresh swarms when a run stalls above `restart_loss`.
    pub restarts: usize,
    pub restart_loss: f64,
    pub seed: u64,
}

impl Default for PsoGaOptions {
    fn default() -> Self {
        Self {
            swarm_size: 60,
            max_iterations: 300,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            ga_fraction: 0.25,
            tournament_size: 2,
            mutation_scale: 0.02,
            stall_tolerance: 1e-10,
            stall_iterations: 30,
            restarts: 2,
            restart_loss: 1e-5,
            seed: 0,
        }
    }
}

impl PsoGaOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EstimatorError::InvalidOptions(m.to_string()));
        if self.swarm_size < 2 || self.tournament_size < 2 || self.max_iterations < 1 {
            return bad("swarm size and tournament size must be >= 2, iterations >= 1");
        }
        if !(self.ga_fraction > 0.0 && self.ga_fraction < 1.0) {
            return bad("ga_fraction must lie in (0, 1)");
        }
        if !(self.mutation_scale > 0.0 && self.mutation_scale < 1.0) {
            return bad("mutation_scale must lie in (0, 1)");
        }
        let coefs = [self.inertia, self.cognitive, self.social, self.stall_tolerance, self.restart_loss];
        if coefs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return bad("coefficients must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EapEstimate {
    pub eaps: Eaps,
    pub loss: f64,
    pub iterations: usize,
    pub capacity_mah: f64,
    pub converged: bool,
}

/// Charge coordinate where the curve of `eaps` reads `v_cut`.
pub fn anchor_q0(cell: &CellModel, eaps: &Eaps, v_cut: f64) -> Result<f64> {
    eaps.validate()?;
    cell.charge_at_voltage(eaps, v_cut, ANCHOR_TOLERANCE_MAH).map_err(|e| match e {
        ElectrodeError::InfeasibleWindow { .. } => EstimatorError::InfeasibleAnchor(v_cut),
        other => other.into(),
    })
}

/// Feature voltages read at the anchored charges; `None` marks a point that
/// falls outside the curve's domain.
pub fn predicted_feature_voltages(cell: &CellModel, eaps: &Eaps, dq_fp: &[f64]) -> Result<Vec<Option<f64>>> {
    let q0 = anchor_q0(cell, eaps, LOWER_CUTOFF_V)?;
    Ok(anchored_voltages(cell, eaps, q0, dq_fp))
}

fn anchored_voltages(cell: &CellModel, eaps: &Eaps, q0: f64, dq_fp: &[f64]) -> Vec<Option<f64>> {
    let mut q = q0;
    dq_fp
        .iter()
        .map(|d| {
            q += d;
            cell.ocv_at(eaps, q).ok()
        })
        .collect()
}

/// Mean squared mismatch against the feature grid over the feasible points,
/// plus [`POINT_PENALTY`] for each infeasible point. A candidate without an
/// anchor (or not a valid parameter triple) scores [`ANCHOR_PENALTY`].
pub fn eap_loss(cell: &CellModel, eaps: &Eaps, dq_fp: &[f64]) -> f64 {
    let q0 = match anchor_q0(cell, eaps, LOWER_CUTOFF_V) {
        Ok(q0) => q0,
        Err(_) => return ANCHOR_PENALTY,
    };
    let reference = feature_voltages();
    let mut sse = 0.0;
    let mut penalty = 0.0;
    for (v, r) in anchored_voltages(cell, eaps, q0, dq_fp).into_iter().zip(reference) {
        match v {
            Some(v) => sse += (v - r) * (v - r),
            None => penalty += POINT_PENALTY,
        }
    }
    sse / FEATURE_COUNT as f64 + penalty
}

/// Exact feature points of the curve defined by `eaps`, measured from its
/// lower-cutoff anchor.
pub fn exact_feature_points(cell: &CellModel, eaps: &Eaps) -> Result<FeaturePointSet> {
    let q0 = anchor_q0(cell, eaps, LOWER_CUTOFF_V)?;
    let (_, hi) = cell.domain(eaps).expect("anchor implies a domain");
    let mut q = [0.0; FEATURE_COUNT];
    for (slot, v) in q.iter_mut().zip(feature_voltages()) {
        let root =
            cell.charge_at_voltage_within(eaps, v, q0, hi, 1e-9).map_err(|_| EstimatorError::InfeasibleAnchor(v))?;
        *slot = root - q0;
    }
    Ok(FeaturePointSet::from_charges(q)?)
}

/// The usable window sampled every [`RECONSTRUCT_STEP_MAH`] from the lower
/// cutoff, with charge measured from that cutoff, plus the window capacity.
pub fn reconstruct(cell: &CellModel, eaps: &Eaps, v_lo: f64, v_hi: f64) -> Result<(OcvCurve, f64)> {
    let window = cell.usable_window(eaps, v_lo, v_hi)?;
    let steps = (window.capacity / RECONSTRUCT_STEP_MAH).floor() as usize;
    let mut charge = Vec::with_capacity(steps + 2);
    let mut voltage = Vec::with_capacity(steps + 2);
    // The window ends are roots of OCV = cutoff; the cutoffs themselves are
    // recorded so the curve spans them exactly.
    for k in 0..=steps {
        let dq = k as f64 * RECONSTRUCT_STEP_MAH;
        if dq >= window.capacity {
            break;
        }
        charge.push(dq);
        voltage.push(if k == 0 { v_lo } else { cell.ocv_at(eaps, window.q_start + dq)? });
    }
    charge.push(window.capacity);
    voltage.push(v_hi);
    Ok((OcvCurve::from_raw(charge, voltage)?, window.capacity))
}

/// Reconstruction between the standard cutoffs.
pub fn reconstruct_standard(cell: &CellModel, eaps: &Eaps) -> Result<(OcvCurve, f64)> {
    reconstruct(cell, eaps, LOWER_CUTOFF_V, UPPER_CUTOFF_V)
}

#[derive(Clone)]
struct Particle {
    x: [f64; 3],
    v: [f64; 3],
    loss: f64,
    best_x: [f64; 3],
    best_loss: f64,
}

fn reflect(x: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *x = lo;
        *v = 0.0;
        return;
    }
    if *x < lo {
        *x = lo + (lo - *x);
        *v = -*v;
    } else if *x > hi {
        *x = hi - (*x - hi);
        *v = -*v;
    }
    *x = x.clamp(lo, hi);
}

/// Hybrid PSO-GA search for the triple minimizing [`eap_loss`].
pub fn estimate(cell: &CellModel, dq_fp: &[f64], bounds: &EapBounds, options: &PsoGaOptions) -> Result<EapEstimate> {
    bounds.validate()?;
    options.validate()?;
    let b = bounds.as_array();
    let (mut g_x, mut g_loss, mut iterations, mut converged) = swarm_search(cell, dq_fp, &b, options, options.seed);
    for r in 1..=options.restarts {
        if g_loss <= options.restart_loss {
            break;
        }
        let (x, loss, its, conv) = swarm_search(cell, dq_fp, &b, options, derive_seed(options.seed, r as u64));
        iterations += its;
        if loss < g_loss {
            (g_x, g_loss, converged) = (x, loss, conv);
        }
    }

    let eaps = Eaps::from_array(g_x);
    let capacity_mah = cell.standard_window(&eaps).map(|w| w.capacity).unwrap_or(f64::NAN);
    Ok(EapEstimate { eaps, loss: g_loss, iterations, capacity_mah, converged })
}

/// One PSO-GA run: best point, its loss, iterations used, stall flag.
fn swarm_search(
    cell: &CellModel,
    dq_fp: &[f64],
    b: &[[f64; 2]; 3],
    options: &PsoGaOptions,
    seed: u64,
) -> ([f64; 3], f64, usize, bool) {
    let range: [f64; 3] = std::array::from_fn(|d| b[d][1] - b[d][0]);
    let loss_of = |x: &[f64; 3]| eap_loss(cell, &Eaps::from_array(*x), dq_fp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut swarm: Vec<Particle> = (0..options.swarm_size)
        .map(|_| {
            let x: [f64; 3] = std::array::from_fn(|d| b[d][0] + rng.random::<f64>() * range[d]);
            let v: [f64; 3] = std::array::from_fn(|d| 0.1 * range[d] * rng.random_range(-1.0..=1.0));
            let loss = loss_of(&x);
            Particle { x, v, loss, best_x: x, best_loss: loss }
        })
        .collect();

    let (mut g_x, mut g_loss) = best_of(&swarm);
    let n_ga = ((options.ga_fraction * options.swarm_size as f64).round() as usize).clamp(1, options.swarm_size - 1);
    let mut stall_ref = g_loss;
    let mut stall_count = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iterations {
        iterations += 1;

        for p in swarm.iter_mut() {
            for d in 0..3 {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let vmax = range[d];
                p.v[d] = (options.inertia * p.v[d]
                    + options.cognitive * r1 * (p.best_x[d] - p.x[d])
                    + options.social * r2 * (g_x[d] - p.x[d]))
                    .clamp(-vmax, vmax);
                p.x[d] += p.v[d];
                reflect(&mut p.x[d], &mut p.v[d], b[d][0], b[d][1]);
            }
            p.loss = loss_of(&p.x);
            if p.loss < p.best_loss {
                p.best_loss = p.loss;
                p.best_x = p.x;
            }
        }

        // Re-breed the worst members from the personal bests of the others.
        let mut order: Vec<usize> = (0..swarm.len()).collect();
        order.sort_by(|&i, &j| swarm[i].loss.total_cmp(&swarm[j].loss).then(i.cmp(&j)));
        let (survivors, replaced) = order.split_at(swarm.len() - n_ga);
        let survivors = survivors.to_vec();
        let pick = |rng: &mut ChaCha8Rng| {
            let mut best = survivors[rng.random_range(0..survivors.len())];
            for _ in 1..options.tournament_size {
                let c = survivors[rng.random_range(0..survivors.len())];
                if swarm[c].best_loss < swarm[best].best_loss {
                    best = c;
                }
            }
            best
        };
        let mut children = Vec::with_capacity(n_ga);
        for _ in replaced {
            let (pa, pb) = (pick(&mut rng), pick(&mut rng));
            let alpha: f64 = rng.random();
            let mut x: [f64; 3] =
                std::array::from_fn(|d| alpha * swarm[pa].best_x[d] + (1.0 - alpha) * swarm[pb].best_x[d]);
            for d in 0..3 {
                if range[d] > 0.0 {
                    x[d] += Normal::new(0.0, options.mutation_scale * range[d]).expect("positive sd").sample(&mut rng);
                }
                // the blend can round off a collapsed interval, so always re-seat
                let mut v = 0.0;
                reflect(&mut x[d], &mut v, b[d][0], b[d][1]);
            }
            children.push(x);
        }
        for (&slot, x) in replaced.iter().zip(children) {
            let loss = loss_of(&x);
            swarm[slot] = Particle { x, v: [0.0; 3], loss, best_x: x, best_loss: loss };
        }

        let (bx, bl) = best_of(&swarm);
        if bl < g_loss {
            g_loss = bl;
            g_x = bx;
        }
        if stall_ref - g_loss > options.stall_tolerance {
            stall_ref = g_loss;
            stall_count = 0;
        } else {
            stall_count += 1;
            if stall_count >= options.stall_iterations {
                converged = true;
                break;
            }
        }
    }

    (g_x, g_loss, iterations, converged)
}

fn best_of(swarm: &[Particle]) -> ([f64; 3], f64) {
    let mut best = 0;
    for (i, p) in swarm.iter().enumerate() {
        if p.best_loss < swarm[best].best_loss {
            best = i;
        }
    }
    (swarm[best].best_x, swarm[best].best_loss)
}
