//! Half-cell OCV models and the full-cell composition used throughout the crate.
//!
//! Each electrode is described by a five-term sum of logistic steps mapping
//! electrode potential to stoichiometry:
//!
//! ```text
//! x(E) = Σ dx_i / (1 + exp((E - e0_i) · zeta_i · e / (k_B · T)))
//! ```
//!
//! A full cell is positioned on a shared charge axis whose origin is the
//! left start of the positive-electrode curve. Given the electrode aging
//! parameters ([`Eaps`]) the stoichiometries at charge coordinate `q` are
//! `x_pe = 1 - q / q_pe` and `x_ne = (q - q_offset) / q_ne`, and the cell OCV
//! is `f_pe(x_pe) - f_ne(x_ne)`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::bisect_increasing;

pub const BOLTZMANN_J_PER_K: f64 = 1.380_649e-23;
pub const ELEMENTARY_CHARGE_C: f64 = 1.602_176_634e-19;

/// Ambient temperature of the reference data set (40 °C).
pub const REFERENCE_TEMPERATURE_K: f64 = 313.15;

/// Nominal capacity of the reference cell.
pub const NOMINAL_CAPACITY_MAH: f64 = 740.0;
pub const LOWER_CUTOFF_V: f64 = 2.7;
pub const UPPER_CUTOFF_V: f64 = 4.2;

/// Stoichiometries closer than this to 0 or to `Σdx` are outside the
/// invertible range (the potential diverges at the boundaries).
pub const SOC_MARGIN: f64 = 1e-6;

/// Number of logistic terms per electrode.
pub const TERM_COUNT: usize = 5;

const SOC_TOLERANCE: f64 = 1e-12;
const POTENTIAL_TOLERANCE_V: f64 = 1e-10;
const WINDOW_TOLERANCE_MAH: f64 = 1e-6;
const TABLE_POINTS: usize = 257;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElectrodeError {
    #[error("expected {TERM_COUNT} OCV terms, got {0}")]
    TermCount(usize),
    #[error("term {index}: zeta must be strictly positive, got {zeta}")]
    NonPositiveZeta { index: usize, zeta: f64 },
    #[error("term {index}: occupied-site fraction must be positive, got {dx}")]
    NonPositiveFraction { index: usize, dx: f64 },
    #[error("occupied-site fractions sum to {0}, outside (0, 1.0001]")]
    StoichiometryBudget(f64),
    #[error("temperature must be positive, got {0} K")]
    Temperature(f64),
    #[error("non-finite model parameter")]
    NonFinite,
    #[error("stoichiometry {x} outside invertible range [{lo}, {hi}]")]
    SocOutOfRange { x: f64, lo: f64, hi: f64 },
    #[error("{electrode} electrode exhausted at q = {q} mAh (stoichiometry {x})")]
    Domain { electrode: Electrode, q: f64, x: f64 },
    #[error("cutoff {voltage} V not attained on [{q_lo}, {q_hi}] mAh")]
    InfeasibleWindow { voltage: f64, q_lo: f64, q_hi: f64 },
    #[error("invalid electrode aging parameters: {0}")]
    InvalidEaps(String),
    #[error("degradation delta components must be non-negative: {0}")]
    InvalidDelta(String),
    #[error("degradation overflow: {0}")]
    DegradationOverflow(String),
    #[error("parameter file line {line}: {message}")]
    ParamFile { line: usize, message: String },
    #[error("reading parameter file {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ElectrodeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Electrode {
    Positive,
    Negative,
}

impl fmt::Display for Electrode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Electrode::Positive => f.write_str("positive"),
            Electrode::Negative => f.write_str("negative"),
        }
    }
}

/// One logistic term: occupied-site fraction, standard redox potential (V)
/// and the dimensionless fitting parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcvTerm {
    pub dx: f64,
    pub e0: f64,
    pub zeta: f64,
}

impl OcvTerm {
    pub const fn new(dx: f64, e0: f64, zeta: f64) -> Self {
        Self { dx, e0, zeta }
    }
}

/// Synthetic LCO/NCO-like positive electrode, ~3.4–4.4 V vs Li.
pub const REFERENCE_PE_TERMS: [OcvTerm; TERM_COUNT] = [
    OcvTerm::new(0.10, 3.55, 0.35),
    OcvTerm::new(0.30, 3.78, 1.2),
    OcvTerm::new(0.25, 3.93, 1.5),
    OcvTerm::new(0.20, 4.08, 1.0),
    OcvTerm::new(0.15, 4.30, 0.5),
];

/// Synthetic graphite-like negative electrode with staged plateaus near
/// 0.21, 0.14, 0.12 and 0.085 V and a broad dilute region above them.
pub const REFERENCE_NE_TERMS: [OcvTerm; TERM_COUNT] = [
    OcvTerm::new(0.08, 0.40, 0.20),
    OcvTerm::new(0.12, 0.21, 1.0),
    OcvTerm::new(0.10, 0.14, 2.0),
    OcvTerm::new(0.30, 0.120, 3.0),
    OcvTerm::new(0.39, 0.085, 3.0),
];

/// Fresh reference cell, calibrated so the [2.7, 4.2] V window holds ~740 mAh.
pub const FRESH_EAPS: Eaps = Eaps { q_pe: 861.1, q_ne: 904.1, q_offset: 43.0 };

/// Validated five-term electrode OCV model.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeOcvModel {
    terms: [OcvTerm; TERM_COUNT],
    temperature: f64,
    /// zeta · e / (k_B T) per term, in 1/V.
    slopes: [f64; TERM_COUNT],
    span: f64,
    /// Coarse (potential, stoichiometry) table for bracketing inversions;
    /// potentials ascending, stoichiometries descending.
    table_e: Vec<f64>,
    table_x: Vec<f64>,
}

impl ElectrodeOcvModel {
    pub fn new(terms: &[OcvTerm], temperature: f64) -> Result<Self> {
        if terms.len() != TERM_COUNT {
            return Err(ElectrodeError::TermCount(terms.len()));
        }
        if !(temperature.is_finite()) {
            return Err(ElectrodeError::NonFinite);
        }
        if temperature <= 0.0 {
            return Err(ElectrodeError::Temperature(temperature));
        }
        for (index, t) in terms.iter().enumerate() {
            if !(t.dx.is_finite() && t.e0.is_finite() && t.zeta.is_finite()) {
                return Err(ElectrodeError::NonFinite);
            }
            if t.zeta <= 0.0 {
                return Err(ElectrodeError::NonPositiveZeta { index, zeta: t.zeta });
            }
            if t.dx <= 0.0 {
                return Err(ElectrodeError::NonPositiveFraction { index, dx: t.dx });
            }
        }
        let span: f64 = terms.iter().map(|t| t.dx).sum();
        if !(span > 0.0 && span <= 1.0001) {
            return Err(ElectrodeError::StoichiometryBudget(span));
        }
        if span <= 2.0 * SOC_MARGIN {
            return Err(ElectrodeError::StoichiometryBudget(span));
        }

        let thermal = ELEMENTARY_CHARGE_C / (BOLTZMANN_J_PER_K * temperature);
        let mut fixed = [terms[0]; TERM_COUNT];
        fixed.copy_from_slice(terms);
        let mut slopes = [0.0; TERM_COUNT];
        for (s, t) in slopes.iter_mut().zip(terms) {
            *s = t.zeta * thermal;
        }

        // Potentials beyond which every term is within SOC_MARGIN/50 of its limit.
        let reach = |t: &OcvTerm, s: f64| (50.0 * t.dx / SOC_MARGIN).ln().max(1.0) / s;
        let e_hi = fixed.iter().zip(&slopes).map(|(t, &s)| t.e0 + reach(t, s)).fold(f64::NEG_INFINITY, f64::max);
        let e_lo = fixed.iter().zip(&slopes).map(|(t, &s)| t.e0 - reach(t, s)).fold(f64::INFINITY, f64::min);

        let mut model = Self { terms: fixed, temperature, slopes, span, table_e: Vec::new(), table_x: Vec::new() };
        let step = (e_hi - e_lo) / (TABLE_POINTS - 1) as f64;
        model.table_e = (0..TABLE_POINTS).map(|k| e_lo + step * k as f64).collect();
        model.table_x = model.table_e.iter().map(|&e| model.soc_from_potential(e)).collect();
        Ok(model)
    }

    pub fn reference_positive() -> Self {
        Self::new(&REFERENCE_PE_TERMS, REFERENCE_TEMPERATURE_K).expect("reference PE table is valid")
    }

    pub fn reference_negative() -> Self {
        Self::new(&REFERENCE_NE_TERMS, REFERENCE_TEMPERATURE_K).expect("reference NE table is valid")
    }

    pub fn terms(&self) -> &[OcvTerm; TERM_COUNT] {
        &self.terms
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Total stoichiometry budget `Σdx`.
    pub fn span(&self) -> f64 {
        self.span
    }

    /// Smallest invertible stoichiometry.
    pub fn soc_min(&self) -> f64 {
        SOC_MARGIN
    }

    /// Largest invertible stoichiometry.
    pub fn soc_max(&self) -> f64 {
        self.span - SOC_MARGIN
    }

    pub fn soc_from_potential(&self, potential: f64) -> f64 {
        self.terms.iter().zip(&self.slopes).map(|(t, &s)| t.dx / (1.0 + ((potential - t.e0) * s).exp())).sum()
    }

    /// Stoichiometry and its derivative with respect to potential.
    fn soc_and_slope(&self, potential: f64) -> (f64, f64) {
        let mut x = 0.0;
        let mut dx_de = 0.0;
        for (t, &s) in self.terms.iter().zip(&self.slopes) {
            let occ = 1.0 / (1.0 + ((potential - t.e0) * s).exp());
            x += t.dx * occ;
            dx_de -= t.dx * s * occ * (1.0 - occ);
        }
        (x, dx_de)
    }

    /// Inverts `soc_from_potential`. Stoichiometries within `SOC_MARGIN` of
    /// either boundary are rejected.
    pub fn potential_from_soc(&self, x: f64) -> Result<f64> {
        let (lo_x, hi_x) = (self.soc_min(), self.soc_max());
        if !x.is_finite() || x < lo_x - SOC_TOLERANCE || x > hi_x + SOC_TOLERANCE {
            return Err(ElectrodeError::SocOutOfRange { x, lo: lo_x, hi: hi_x });
        }
        let x = x.clamp(lo_x, hi_x);

        // table_x is descending; find the bracketing cell.
        let k = self.table_x.partition_point(|&v| v > x);
        let (mut e_lo, mut e_hi) = match k {
            0 => (self.table_e[0] - 1.0, self.table_e[0]),
            k if k >= TABLE_POINTS => (self.table_e[TABLE_POINTS - 1], self.table_e[TABLE_POINTS - 1] + 1.0),
            k => (self.table_e[k - 1], self.table_e[k]),
        };

        // Safeguarded Newton: every iterate stays inside a shrinking bracket,
        // falling back to bisection whenever the Newton step would leave it.
        let mut e = 0.5 * (e_lo + e_hi);
        for _ in 0..200 {
            let (xe, slope) = self.soc_and_slope(e);
            let residual = xe - x;
            if residual > 0.0 {
                e_lo = e;
            } else {
                e_hi = e;
            }
            if e_hi - e_lo < POTENTIAL_TOLERANCE_V {
                return Ok(0.5 * (e_lo + e_hi));
            }
            let newton = if slope < 0.0 { e - residual / slope } else { f64::NAN };
            let next = if newton > e_lo && newton < e_hi { newton } else { 0.5 * (e_lo + e_hi) };
            if (next - e).abs() < 1e-13 {
                return Ok(next);
            }
            e = next;
        }
        Ok(e)
    }

    /// Parses a parameter table: `temperature = <K>` (optional) and exactly
    /// five `term = dx, e0, zeta` lines. `#` starts a comment.
    pub fn from_param_str(text: &str) -> Result<Self> {
        let mut terms = Vec::new();
        let mut temperature = REFERENCE_TEMPERATURE_K;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ElectrodeError::ParamFile {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let parse = |s: &str| {
                s.trim().parse::<f64>().map_err(|_| ElectrodeError::ParamFile {
                    line: line_no,
                    message: format!("not a number: `{}`", s.trim()),
                })
            };
            match key.trim() {
                "temperature" => temperature = parse(value)?,
                "term" => {
                    let parts: Vec<&str> = value.split(',').collect();
                    if parts.len() != 3 {
                        return Err(ElectrodeError::ParamFile {
                            line: line_no,
                            message: "term needs three values: dx, e0, zeta".into(),
                        });
                    }
                    terms.push(OcvTerm::new(parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
                }
                other => {
                    return Err(ElectrodeError::ParamFile { line: line_no, message: format!("unknown key `{other}`") })
                }
            }
        }
        Self::new(&terms, temperature)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ElectrodeError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_param_str(&text)
    }

    pub fn to_param_string(&self) -> String {
        let mut out = String::from("# dx, e0 (V), zeta\n");
        out.push_str(&format!("temperature = {:.6}\n", self.temperature));
        for t in &self.terms {
            out.push_str(&format!("term = {:.8}, {:.8}, {:.8}\n", t.dx, t.e0, t.zeta));
        }
        out
    }
}

/// Electrode aging parameters in mAh: positive- and negative-electrode
/// capacities and the offset of the NE left start from the PE left start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eaps {
    pub q_pe: f64,
    pub q_ne: f64,
    pub q_offset: f64,
}

impl Eaps {
    pub fn new(q_pe: f64, q_ne: f64, q_offset: f64) -> Result<Self> {
        let eaps = Self { q_pe, q_ne, q_offset };
        eaps.validate()?;
        Ok(eaps)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { q_pe, q_ne, q_offset } = *self;
        if !(q_pe.is_finite() && q_ne.is_finite() && q_offset.is_finite()) {
            return Err(ElectrodeError::InvalidEaps("non-finite value".into()));
        }
        if q_pe <= 0.0 || q_ne <= 0.0 {
            return Err(ElectrodeError::InvalidEaps(format!(
                "capacities must be positive (q_pe = {q_pe}, q_ne = {q_ne})"
            )));
        }
        if q_offset < 0.0 {
            return Err(ElectrodeError::InvalidEaps(format!("q_offset = {q_offset} < 0")));
        }
        if q_offset >= q_pe {
            return Err(ElectrodeError::InvalidEaps(format!(
                "no electrode overlap: q_offset = {q_offset} >= q_pe = {q_pe}"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.q_pe, self.q_ne, self.q_offset]
    }

    pub fn from_array(v: [f64; 3]) -> Self {
        Self { q_pe: v[0], q_ne: v[1], q_offset: v[2] }
    }
}

/// Capacity lost per aging mechanism, in mAh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationDelta {
    pub lli: f64,
    pub lam_li_pe: f64,
    pub lam_de_pe: f64,
    pub lam_li_ne: f64,
    pub lam_de_ne: f64,
}

impl DegradationDelta {
    pub fn as_array(&self) -> [f64; 5] {
        [self.lli, self.lam_li_pe, self.lam_de_pe, self.lam_li_ne, self.lam_de_ne]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self { lli: v[0], lam_li_pe: v[1], lam_de_pe: v[2], lam_li_ne: v[3], lam_de_ne: v[4] }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut v = self.as_array();
        v.iter_mut().for_each(|c| *c *= factor);
        Self::from_array(v)
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|&c| c == 0.0)
    }
}

impl std::ops::Add for DegradationDelta {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let (a, b) = (self.as_array(), rhs.as_array());
        Self::from_array(std::array::from_fn(|i| a[i] + b[i]))
    }
}

/// Applies aging bookkeeping. LAM of delithiated PE and of lithiated NE
/// removes material from the left of the charge axis, so the NE start moves
/// relative to the re-anchored PE origin.
pub fn degrade(eaps: &Eaps, delta: &DegradationDelta) -> Result<Eaps> {
    if delta.as_array().iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(ElectrodeError::InvalidDelta(format!("{delta:?}")));
    }
    let next = Eaps {
        q_pe: eaps.q_pe - delta.lam_li_pe - delta.lam_de_pe,
        q_ne: eaps.q_ne - delta.lam_de_ne - delta.lam_li_ne,
        q_offset: eaps.q_offset + delta.lli - delta.lam_de_pe + delta.lam_li_ne,
    };
    next.validate().map_err(|e| ElectrodeError::DegradationOverflow(e.to_string()))?;
    Ok(next)
}

/// Charge-axis coordinates bounded by the two cutoff voltages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsableWindow {
    pub q_start: f64,
    pub q_end: f64,
    pub capacity: f64,
}

/// A pair of half-cell models composed into a full cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellModel {
    pub pe: ElectrodeOcvModel,
    pub ne: ElectrodeOcvModel,
}

impl Default for CellModel {
    fn default() -> Self {
        Self::reference()
    }
}

impl CellModel {
    pub fn new(pe: ElectrodeOcvModel, ne: ElectrodeOcvModel) -> Self {
        Self { pe, ne }
    }

    pub fn reference() -> Self {
        Self::new(ElectrodeOcvModel::reference_positive(), ElectrodeOcvModel::reference_negative())
    }

    /// Jointly valid charge interval where both stoichiometries are invertible.
    /// Returns `None` when the interval is empty.
    pub fn domain(&self, eaps: &Eaps) -> Option<(f64, f64)> {
        let pe_lo = eaps.q_pe * (1.0 - self.pe.soc_max());
        let pe_hi = eaps.q_pe * (1.0 - self.pe.soc_min());
        let ne_lo = eaps.q_offset + eaps.q_ne * self.ne.soc_min();
        let ne_hi = eaps.q_offset + eaps.q_ne * self.ne.soc_max();
        let lo = pe_lo.max(ne_lo);
        let hi = pe_hi.min(ne_hi);
        (lo.is_finite() && hi.is_finite() && lo < hi).then_some((lo, hi))
    }

    /// Cell OCV at charge coordinate `q` (mAh).
    pub fn ocv_at(&self, eaps: &Eaps, q: f64) -> Result<f64> {
        let x_pe = 1.0 - q / eaps.q_pe;
        let x_ne = (q - eaps.q_offset) / eaps.q_ne;
        let e_pe = self.pe.potential_from_soc(x_pe).map_err(|_| ElectrodeError::Domain {
            electrode: Electrode::Positive,
            q,
            x: x_pe,
        })?;
        let e_ne = self.ne.potential_from_soc(x_ne).map_err(|_| ElectrodeError::Domain {
            electrode: Electrode::Negative,
            q,
            x: x_ne,
        })?;
        Ok(e_pe - e_ne)
    }

    /// OCV at `q`, assuming `q` lies inside [`Self::domain`].
    fn ocv_in_domain(&self, eaps: &Eaps, q: f64) -> f64 {
        self.ocv_at(eaps, q).unwrap_or(f64::NAN)
    }

    /// Charge coordinate at which the OCV equals `voltage`, searched over the
    /// full domain, to `tol` mAh.
    pub fn charge_at_voltage(&self, eaps: &Eaps, voltage: f64, tol: f64) -> Result<f64> {
        let (lo, hi) = self
            .domain(eaps)
            .ok_or_else(|| ElectrodeError::InvalidEaps(format!("empty electrode overlap for {eaps:?}")))?;
        self.charge_at_voltage_within(eaps, voltage, lo, hi, tol)
    }

    /// Like [`Self::charge_at_voltage`] on a caller-supplied sub-interval of the domain.
    pub fn charge_at_voltage_within(&self, eaps: &Eaps, voltage: f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
        let v_lo = self.ocv_in_domain(eaps, lo);
        let v_hi = self.ocv_in_domain(eaps, hi);
        if !(v_lo <= voltage && voltage <= v_hi) {
            return Err(ElectrodeError::InfeasibleWindow { voltage, q_lo: lo, q_hi: hi });
        }
        Ok(bisect_increasing(|q| self.ocv_in_domain(eaps, q), voltage, lo, hi, tol))
    }

    pub fn usable_window(&self, eaps: &Eaps, v_lo: f64, v_hi: f64) -> Result<UsableWindow> {
        if !(v_lo < v_hi) {
            return Err(ElectrodeError::InfeasibleWindow { voltage: v_lo, q_lo: f64::NAN, q_hi: f64::NAN });
        }
        eaps.validate()?;
        let q_start = self.charge_at_voltage(eaps, v_lo, WINDOW_TOLERANCE_MAH)?;
        let (_, hi) = self.domain(eaps).expect("domain checked above");
        let q_end = self.charge_at_voltage_within(eaps, v_hi, q_start, hi, WINDOW_TOLERANCE_MAH)?;
        Ok(UsableWindow { q_start, q_end, capacity: q_end - q_start })
    }

    /// Usable window between the standard 2.7 V and 4.2 V cutoffs.
    pub fn standard_window(&self, eaps: &Eaps) -> Result<UsableWindow> {
        self.usable_window(eaps, LOWER_CUTOFF_V, UPPER_CUTOFF_V)
    }
}
