//! Synthetic retired-battery cohorts with ground truth.
//!
//! A degradation path starts from a (possibly jittered) fresh cell and moves
//! in a straight line set by five mechanism rates. Cohort cells are snapshots
//! of a few such paths, the way a pack's retired cells share a handful of
//! usage histories: each cell picks a path and a target capacity, and the
//! aging level along the path is bisected until the usable capacity hits it.
//! With `paths = 0` every cell draws its own path instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::electrode::{
    degrade, CellModel, DegradationDelta, Eaps, FRESH_EAPS, LOWER_CUTOFF_V, NOMINAL_CAPACITY_MAH, UPPER_CUTOFF_V,
};
use crate::estimator::{exact_feature_points, reconstruct_standard, EapBounds};
use crate::numeric::derive_seed;
use crate::signal::{
    ic_peak_features, ic_segment, incremental_capacity, ChargingRecord, Direction, IcCurve, IcPeakFeatures, OcvCurve,
    Sample, FEATURE_COUNT, IC_STEP_V, IC_WINDOW_V,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_cells: usize,
    pub fresh: Eaps,
    /// Per-mechanism rate ranges `[lo, hi]` in mAh per unit aging level,
    /// ordered lli, lam_li_pe, lam_de_pe, lam_li_ne, lam_de_ne.
    pub rates: [[f64; 2]; 5],
    /// Number of shared degradation paths; 0 gives every cell its own.
    pub paths: usize,
    /// Relative half-width of the uniform jitter applied to each path's
    /// fresh EAPs (cell-to-cell manufacturing spread).
    pub fresh_spread: f64,
    /// Target capacity as a fraction of nominal.
    pub span: [f64; 2],
    /// Resistive offset added to the OCV to mimic a 1-C charge (V).
    pub ir_offset_v: f64,
    pub current_ma: f64,
    pub sample_period_s: f64,
    /// Redraws allowed per cell before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_cells: 150,
            fresh: FRESH_EAPS,
            rates: [[0.3, 1.0], [0.0, 0.6], [0.0, 0.6], [0.0, 0.6], [0.0, 0.6]],
            paths: 5,
            fresh_spread: 0.01,
            span: [0.77, 0.995],
            ir_offset_v: 0.05,
            current_ma: NOMINAL_CAPACITY_MAH,
            sample_period_s: 1.0,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.n_cells < 2 {
            return bad("cohort needs at least two cells".into());
        }
        let [lo, hi] = self.span;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("capacity span [{lo}, {hi}] must lie in (0, 1]"));
        }
        if self.rates.iter().any(|[a, b]| !(a.is_finite() && b.is_finite() && *a >= 0.0 && a <= b)) {
            return bad("rate ranges must be finite, non-negative and ordered".into());
        }
        if !(self.fresh_spread >= 0.0 && self.fresh_spread < 0.5) {
            return bad(format!("fresh_spread {} must lie in [0, 0.5)", self.fresh_spread));
        }
        if !(self.current_ma > 0.0 && self.sample_period_s > 0.0 && self.ir_offset_v >= 0.0) {
            return bad("current, sample period and offset must be positive".into());
        }
        self.fresh.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    fn zero_rates(&self) -> bool {
        self.rates.iter().all(|[_, hi]| *hi == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortCell {
    pub id: usize,
    pub eaps: Eaps,
    pub capacity_mah: f64,
    /// Degradation path the cell was drawn from and that path's fresh EAPs.
    pub path: usize,
    pub fresh: Eaps,
    pub delta: DegradationDelta,
    /// Position along the cell's degradation path.
    pub aging_level: f64,
    pub record: ChargingRecord,
    pub pseudo_ocv: OcvCurve,
    pub dq_fp: [f64; FEATURE_COUNT],
}

/// A simulated constant-current charge from the lower cutoff: the model OCV
/// plus a constant offset, sampled until the terminal voltage would exceed
/// the upper cutoff.
pub fn simulate_charge(cell: &CellModel, eaps: &Eaps, spec: &CohortSpec) -> Result<ChargingRecord> {
    let window = cell.usable_window(eaps, LOWER_CUTOFF_V, UPPER_CUTOFF_V - spec.ir_offset_v)?;
    let dq = spec.current_ma * spec.sample_period_s / 3600.0;
    let n = (window.capacity / dq).floor() as usize;
    let mut samples = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let v = cell.ocv_at(eaps, window.q_start + k as f64 * dq)? + spec.ir_offset_v;
        samples.push(Sample { time_s: k as f64 * spec.sample_period_s, current_ma: spec.current_ma, voltage_v: v });
    }
    Ok(ChargingRecord::new(samples, Direction::Charge)?)
}

/// IC of a charging record on the 1 mV grid.
pub fn record_ic(record: &ChargingRecord) -> Result<IcCurve> {
    Ok(incremental_capacity(&record.to_curve()?, IC_STEP_V)?)
}

/// IC values over the whole 3.5–4.0 V window: the superset every CNN input
/// window is sliced from.
pub fn window_ic(record: &ChargingRecord) -> Result<Vec<f64>> {
    Ok(ic_segment(&record_ic(record)?, IC_WINDOW_V.0, IC_WINDOW_V.1)?)
}

pub fn peak_features(record: &ChargingRecord) -> Result<IcPeakFeatures> {
    Ok(ic_peak_features(&record_ic(record)?)?)
}

fn capacity_of(cell: &CellModel, fresh: &Eaps, delta: &DegradationDelta) -> Option<(Eaps, f64)> {
    let eaps = degrade(fresh, delta).ok()?;
    let w = cell.standard_window(&eaps).ok()?;
    Some((eaps, w.capacity))
}

/// Aging level along `rates` at which capacity reaches `target`, or `None`
/// when the path breaks down first.
fn level_for_target(cell: &CellModel, fresh: &Eaps, rates: &DegradationDelta, target: f64) -> Option<f64> {
    let above = |s: f64| capacity_of(cell, fresh, &rates.scaled(s)).is_some_and(|(_, c)| c > target);
    if !above(0.0) {
        return None;
    }
    let mut hi = 1.0;
    while above(hi) {
        hi *= 2.0;
        if hi > 1e6 {
            return None;
        }
    }
    capacity_of(cell, fresh, &rates.scaled(hi))?;
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if above(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Some(hi)
}

/// Start point and mechanism rates of one degradation path.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Path {
    fresh: Eaps,
    rates: DegradationDelta,
}

fn draw_path(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Path {
    let f = spec.fresh;
    let fresh = if spec.fresh_spread > 0.0 {
        let mut jitter = |x: f64| x * (1.0 + spec.fresh_spread * rng.random_range(-1.0..=1.0));
        Eaps { q_pe: jitter(f.q_pe), q_ne: jitter(f.q_ne), q_offset: jitter(f.q_offset) }
    } else {
        f
    };
    let rates = DegradationDelta::from_array(std::array::from_fn(|k| {
        let [lo, hi] = spec.rates[k];
        lo + rng.random::<f64>() * (hi - lo)
    }));
    Path { fresh, rates }
}

// Streams below this offset are per-cell; shared paths draw above it.
const PATH_STREAM: u64 = 1 << 40;

struct Ctx<'a> {
    cell: &'a CellModel,
    spec: &'a CohortSpec,
    bounds: EapBounds,
}

impl Ctx<'_> {
    fn finish(&self, id: usize, path: usize, p: &Path, level: f64) -> Result<CohortCell> {
        let (cell, spec) = (self.cell, self.spec);
        let delta = p.rates.scaled(level);
        let eaps = degrade(&p.fresh, &delta)?;
        let (pseudo_ocv, capacity_mah) = reconstruct_standard(cell, &eaps)?;
        let record = simulate_charge(cell, &eaps, spec)?;
        let dq_fp = exact_feature_points(cell, &eaps)?.dq_fp;
        // Every CNN window must be computable from the record.
        window_ic(&record)?;
        Ok(CohortCell {
            id,
            eaps,
            capacity_mah,
            path,
            fresh: p.fresh,
            delta,
            aging_level: level,
            record,
            pseudo_ocv,
            dq_fp,
        })
    }

    /// The cell on `p` at capacity `fraction` of nominal, if it is valid.
    fn at_fraction(&self, id: usize, path: usize, p: &Path, fraction: f64) -> Option<CohortCell> {
        let level = level_for_target(self.cell, &p.fresh, &p.rates, fraction * NOMINAL_CAPACITY_MAH)?;
        let drawn = self.finish(id, path, p, level).ok()?;
        let frac = drawn.capacity_mah / NOMINAL_CAPACITY_MAH;
        // the bisection lands within rounding of a span end
        let [lo, hi] = self.spec.span;
        let inside = frac >= lo * (1.0 - 1e-9) && frac <= hi * (1.0 + 1e-9);
        (self.bounds.contains(&drawn.eaps) && inside).then_some(drawn)
    }

    /// A shared path that stays valid across the whole capacity span.
    fn shared_path(&self, index: usize) -> Result<Path> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, PATH_STREAM + index as u64));
        let [lo, hi] = self.spec.span;
        for _ in 0..self.spec.max_retries {
            let p = draw_path(self.spec, &mut rng);
            if self.at_fraction(0, index, &p, lo).is_some() && self.at_fraction(0, index, &p, hi).is_some() {
                return Ok(p);
            }
        }
        Err(PipelineError::PathExhausted { path: index, retries: self.spec.max_retries })
    }

    fn cell(&self, id: usize, paths: &[Path]) -> Result<CohortCell> {
        let spec = self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, id as u64));
        let fraction = |rng: &mut ChaCha8Rng| spec.span[0] + rng.random::<f64>() * (spec.span[1] - spec.span[0]);
        for _ in 0..spec.max_retries {
            let drawn = if paths.is_empty() {
                let p = draw_path(spec, &mut rng);
                let f = fraction(&mut rng);
                self.at_fraction(id, id, &p, f)
            } else {
                let k = rng.random_range(0..paths.len());
                let f = fraction(&mut rng);
                self.at_fraction(id, k, &paths[k], f)
            };
            if let Some(c) = drawn {
                return Ok(c);
            }
        }
        Err(PipelineError::SamplerExhausted { cell: id, retries: spec.max_retries })
    }
}

/// Deterministic in the spec alone; cells are independent given the paths,
/// so they are generated in parallel.
pub fn synth_cohort(cell: &CellModel, spec: &CohortSpec) -> Result<Vec<CohortCell>> {
    use rayon::prelude::*;
    spec.validate()?;
    let ctx = Ctx { cell, spec, bounds: EapBounds::around(&spec.fresh) };
    if spec.zero_rates() {
        let p = Path { fresh: spec.fresh, rates: DegradationDelta::default() };
        return (0..spec.n_cells).into_par_iter().map(|id| ctx.finish(id, 0, &p, 0.0)).collect();
    }
    let paths: Vec<Path> = (0..spec.paths).into_par_iter().map(|k| ctx.shared_path(k)).collect::<Result<_>>()?;
    (0..spec.n_cells).into_par_iter().map(|id| ctx.cell(id, &paths)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::population_sd;

    fn small(seed: u64, n: usize) -> Vec<CohortCell> {
        synth_cohort(&CellModel::reference(), &CohortSpec { n_cells: n, seed, ..CohortSpec::default() }).unwrap()
    }

    #[test]
    fn cells_land_in_span_and_are_self_consistent() {
        let cell = CellModel::reference();
        let cohort = small(3, 24);
        for c in &cohort {
            let f = c.capacity_mah / NOMINAL_CAPACITY_MAH;
            assert!((0.77..=0.995).contains(&f), "{f}");
            let w = cell.standard_window(&c.eaps).unwrap();
            assert_eq!(w.capacity, c.capacity_mah);
            assert_eq!(degrade(&c.fresh, &c.delta).unwrap(), c.eaps);
            assert!(c.path < 5);
            let total: f64 = c.dq_fp.iter().sum();
            assert!((total - c.capacity_mah).abs() < 1e-6);
        }
        let caps: Vec<f64> = cohort.iter().map(|c| c.capacity_mah).collect();
        assert!(population_sd(&caps) > 20.0);
    }

    #[test]
    fn cells_share_a_few_paths() {
        let cohort = small(9, 40);
        let paths: std::collections::BTreeSet<usize> = cohort.iter().map(|c| c.path).collect();
        assert!(paths.len() > 1 && paths.iter().all(|&p| p < 5));
        for a in &cohort {
            for b in cohort.iter().filter(|b| b.path == a.path) {
                assert_eq!(a.fresh, b.fresh);
                // same direction, different distance along it
                let (da, db) = (a.delta.as_array(), b.delta.as_array());
                let k = a.aging_level / b.aging_level;
                for (x, y) in da.iter().zip(db) {
                    assert!((x - k * y).abs() <= 1e-9 * x.abs().max(1.0));
                }
            }
        }
        let spec = CohortSpec { n_cells: 6, paths: 0, seed: 9, ..CohortSpec::default() };
        let own = synth_cohort(&CellModel::reference(), &spec).unwrap();
        assert!(own.iter().all(|c| c.path == c.id));
    }

    #[test]
    fn cohort_is_deterministic() {
        assert_eq!(small(5, 6), small(5, 6));
        assert_ne!(small(5, 6)[0].eaps, small(6, 6)[0].eaps);
    }

    #[test]
    fn zero_rates_give_fresh_cells() {
        let spec = CohortSpec { n_cells: 3, rates: [[0.0; 2]; 5], ..CohortSpec::default() };
        let cohort = synth_cohort(&CellModel::reference(), &spec).unwrap();
        for c in &cohort {
            assert_eq!(c.eaps, FRESH_EAPS);
            assert!(c.delta.is_zero());
        }
        assert_eq!(cohort[0].record, cohort[2].record);
    }

    #[test]
    fn charge_record_is_offset_ocv() {
        let cell = CellModel::reference();
        let spec = CohortSpec::default();
        let rec = simulate_charge(&cell, &FRESH_EAPS, &spec).unwrap();
        let s = rec.samples();
        assert!((s[0].voltage_v - (LOWER_CUTOFF_V + 0.05)).abs() < 1e-6);
        assert!(s.last().unwrap().voltage_v <= UPPER_CUTOFF_V + 1e-12);
        assert!(s.windows(2).all(|w| w[1].voltage_v > w[0].voltage_v));
        assert_eq!(s[1].time_s - s[0].time_s, 1.0);
        assert_eq!(window_ic(&rec).unwrap().len(), 501);
    }

    #[test]
    fn unreachable_span_exhausts_retries() {
        let spec = CohortSpec { n_cells: 2, span: [0.05, 0.06], max_retries: 3, ..CohortSpec::default() };
        let err = synth_cohort(&CellModel::reference(), &spec).unwrap_err();
        assert!(matches!(err, PipelineError::PathExhausted { retries: 3, .. }));
        let own = CohortSpec { paths: 0, ..spec };
        let err = synth_cohort(&CellModel::reference(), &own).unwrap_err();
        assert!(matches!(err, PipelineError::SamplerExhausted { retries: 3, .. }));
    }
}
