//! Measured-curve processing: records, pseudo-OCV, IC curves and feature points.

mod features;
mod ic;
mod savgol;

pub use features::{cum_charge, diff_charge, extract_feature_points, feature_voltages, FeaturePointSet, FEATURE_COUNT};
pub use ic::{ic_peak_features, ic_segment, incremental_capacity, IcCurve, IcPeakFeatures};
pub use savgol::{savgol_smooth, DEFAULT_ORDER, DEFAULT_WINDOW};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VOLTAGE_BAND_V: (f64, f64) = (2.0, 4.5);

/// IC segment bounds must lie inside this window.
pub const IC_WINDOW_V: (f64, f64) = (3.5, 4.0);

/// IC grid step.
pub const IC_STEP_V: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SignalError {
    #[error("Savitzky-Golay window {window} / order {order} invalid for {len} samples")]
    SavgolParams { window: usize, order: usize, len: usize },
    #[error("record needs at least two samples")]
    TooShort,
    #[error("time not strictly increasing at sample {0}")]
    NonMonotoneTime(usize),
    #[error("charge not strictly increasing at point {0}")]
    NonMonotoneCharge(usize),
    #[error("voltage decreases at point {0}")]
    NonMonotoneVoltage(usize),
    #[error("voltage {voltage} V at sample {index} outside [{lo}, {hi}] V")]
    VoltageOutOfBand { index: usize, voltage: f64, lo: f64, hi: f64 },
    #[error("non-finite value at sample {0}")]
    NonFinite(usize),
    #[error("branches do not overlap: {0}")]
    DisjointBranches(String),
    #[error("curve does not reach feature voltages {0:?}")]
    MissingFeatureVoltages(Vec<f64>),
    #[error("charge vector must be strictly increasing (index {0})")]
    NonIncreasingCharge(usize),
    #[error("differential charge at index {0} must be positive")]
    NonPositiveDelta(usize),
    #[error("segment bounds [{v1}, {v2}] V invalid: need {lo} <= v1 < v2 <= {hi}")]
    SegmentBounds { v1: f64, v2: f64, lo: f64, hi: f64 },
    #[error("segment [{v1}, {v2}] V outside the IC curve span [{lo}, {hi}] V")]
    SegmentOutsideCurve { v1: f64, v2: f64, lo: f64, hi: f64 },
    #[error("IC curve does not cover the peak window")]
    PeakWindowUncovered,
    #[error("found {0} local maxima in the peak window, need two")]
    TooFewPeaks(usize),
    #[error("voltage span too narrow for a 1 mV grid")]
    NarrowSpan,
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Charge,
    Discharge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub time_s: f64,
    pub current_ma: f64,
    pub voltage_v: f64,
}

/// A constant-current record sampled in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingRecord {
    samples: Vec<Sample>,
    direction: Direction,
}

impl ChargingRecord {
    pub fn new(samples: Vec<Sample>, direction: Direction) -> Result<Self> {
        if samples.len() < 2 {
            return Err(SignalError::TooShort);
        }
        let (lo, hi) = VOLTAGE_BAND_V;
        for (index, s) in samples.iter().enumerate() {
            if !(s.time_s.is_finite() && s.current_ma.is_finite() && s.voltage_v.is_finite()) {
                return Err(SignalError::NonFinite(index));
            }
            if s.voltage_v < lo || s.voltage_v > hi {
                return Err(SignalError::VoltageOutOfBand { index, voltage: s.voltage_v, lo, hi });
            }
            if index > 0 && s.time_s <= samples[index - 1].time_s {
                return Err(SignalError::NonMonotoneTime(index));
            }
        }
        Ok(Self { samples, direction })
    }

    /// Builds a record whose direction follows the sign of the mean current
    /// (negative means discharge).
    pub fn infer(samples: Vec<Sample>) -> Result<Self> {
        let mean_i: f64 = samples.iter().map(|s| s.current_ma).sum::<f64>();
        let dir = if mean_i < 0.0 { Direction::Discharge } else { Direction::Charge };
        Self::new(samples, dir)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Coulomb-counted charge throughput at each sample (trapezoidal, mAh).
    pub fn throughput(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(self.samples.len());
        let mut acc = 0.0;
        q.push(0.0);
        for w in self.samples.windows(2) {
            let dt_h = (w[1].time_s - w[0].time_s) / 3600.0;
            acc += 0.5 * (w[0].current_ma.abs() + w[1].current_ma.abs()) * dt_h;
            q.push(acc);
        }
        q
    }

    /// Voltage against charge measured from the empty end: charge records
    /// count up from their first sample, discharge records are reversed so
    /// their last sample sits at zero.
    pub fn to_curve(&self) -> Result<OcvCurve> {
        let q = self.throughput();
        let (charge, voltage): (Vec<f64>, Vec<f64>) = match self.direction {
            Direction::Charge => (q, self.samples.iter().map(|s| s.voltage_v).collect()),
            Direction::Discharge => {
                let total = *q.last().expect("at least two samples");
                q.iter().zip(&self.samples).rev().map(|(q, s)| (total - q, s.voltage_v)).unzip()
            }
        };
        OcvCurve::from_raw(charge, voltage)
    }
}

/// Voltage against charge, charge strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcvCurve {
    charge: Vec<f64>,
    voltage: Vec<f64>,
}

impl OcvCurve {
    /// Accepts any finite voltage sequence over strictly increasing charge.
    pub fn from_raw(charge: Vec<f64>, voltage: Vec<f64>) -> Result<Self> {
        if charge.len() < 2 || charge.len() != voltage.len() {
            return Err(SignalError::TooShort);
        }
        for i in 0..charge.len() {
            if !(charge[i].is_finite() && voltage[i].is_finite()) {
                return Err(SignalError::NonFinite(i));
            }
            if i > 0 && charge[i] <= charge[i - 1] {
                return Err(SignalError::NonMonotoneCharge(i));
            }
        }
        Ok(Self { charge, voltage })
    }

    /// Like [`Self::from_raw`] but also requires non-decreasing voltage.
    pub fn new(charge: Vec<f64>, voltage: Vec<f64>) -> Result<Self> {
        if let Some(i) = (1..voltage.len()).find(|&i| voltage[i] < voltage[i - 1]) {
            return Err(SignalError::NonMonotoneVoltage(i));
        }
        Self::from_raw(charge, voltage)
    }

    pub fn charge(&self) -> &[f64] {
        &self.charge
    }

    pub fn voltage(&self) -> &[f64] {
        &self.voltage
    }

    pub fn len(&self) -> usize {
        self.charge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charge.is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        self.voltage.windows(2).all(|w| w[1] >= w[0])
    }

    /// SG-smooths the voltage and clips any residual ripple with a running
    /// maximum so the result is non-decreasing.
    pub fn smoothed(&self, window_len: usize, poly_order: usize) -> Result<Self> {
        let mut v = savgol_smooth(&self.voltage, window_len, poly_order)?;
        for i in 1..v.len() {
            if v[i] < v[i - 1] {
                v[i] = v[i - 1];
            }
        }
        Ok(Self { charge: self.charge.clone(), voltage: v })
    }

    /// Voltage at `q` by linear interpolation; `None` outside the span.
    pub fn voltage_at(&self, q: f64) -> Option<f64> {
        crate::numeric::interp_monotone(&self.charge, &self.voltage, q)
    }

    /// Charge at which the (non-decreasing) voltage first reaches `v`, by
    /// linear interpolation between the bracketing samples.
    pub fn charge_at(&self, v: f64) -> Option<f64> {
        let n = self.voltage.len();
        if v < self.voltage[0] || v > self.voltage[n - 1] {
            return None;
        }
        let j = self.voltage.partition_point(|&x| x < v);
        if j == 0 {
            return Some(self.charge[0]);
        }
        let (v0, v1) = (self.voltage[j - 1], self.voltage[j]);
        let t = (v - v0) / (v1 - v0);
        Some(self.charge[j - 1] + t * (self.charge[j] - self.charge[j - 1]))
    }
}

/// Averages two branches already expressed against charge-from-empty on a
/// common grid of `step` mAh, without smoothing.
pub fn midline(charge: &OcvCurve, discharge: &OcvCurve, step: f64) -> Result<OcvCurve> {
    let lo = charge.charge[0].max(discharge.charge[0]);
    let hi = charge.charge[charge.len() - 1].min(discharge.charge[discharge.len() - 1]);
    if !(hi - lo >= step) || !(step > 0.0) {
        return Err(SignalError::DisjointBranches(format!(
            "common charge range [{lo}, {hi}] mAh shorter than one {step} mAh step"
        )));
    }
    let (cv_lo, cv_hi) = (charge.voltage[0], charge.voltage[charge.len() - 1]);
    let (dv_lo, dv_hi) = (discharge.voltage[0], discharge.voltage[discharge.len() - 1]);
    if cv_hi.min(dv_hi) <= cv_lo.max(dv_lo) {
        return Err(SignalError::DisjointBranches(format!(
            "voltage ranges [{cv_lo}, {cv_hi}] and [{dv_lo}, {dv_hi}] V do not overlap"
        )));
    }
    let n = ((hi - lo) / step).floor() as usize + 1;
    let mut q = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for k in 0..n {
        let x = (lo + k as f64 * step).min(hi);
        let a = charge.voltage_at(x).expect("inside common range");
        let b = discharge.voltage_at(x).expect("inside common range");
        q.push(x);
        v.push(0.5 * (a + b));
    }
    OcvCurve::from_raw(q, v)
}

/// Pseudo-OCV from a slow charge and a slow discharge record: both branches
/// are resampled onto a common `step` mAh grid, averaged, then smoothed.
pub fn pseudo_ocv(
    charge: &ChargingRecord,
    discharge: &ChargingRecord,
    step: f64,
    window_len: usize,
    poly_order: usize,
) -> Result<OcvCurve> {
    let mid = midline(&charge.to_curve()?, &discharge.to_curve()?, step)?;
    mid.smoothed(window_len, poly_order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(direction: Direction, current: f64, f: impl Fn(f64) -> f64, n: usize) -> ChargingRecord {
        let samples = (0..n)
            .map(|k| {
                let t = k as f64;
                // charge coordinate of this sample, counted from empty
                let q = match direction {
                    Direction::Charge => current.abs() * t / 3600.0,
                    Direction::Discharge => current.abs() * (n - 1 - k) as f64 / 3600.0,
                };
                Sample { time_s: t, current_ma: current, voltage_v: f(q) }
            })
            .collect();
        ChargingRecord::new(samples, direction).unwrap()
    }

    #[test]
    fn record_validation() {
        let s = |t: f64, v: f64| Sample { time_s: t, current_ma: 1.0, voltage_v: v };
        assert_eq!(ChargingRecord::new(vec![s(0.0, 3.0)], Direction::Charge), Err(SignalError::TooShort));
        assert_eq!(
            ChargingRecord::new(vec![s(0.0, 3.0), s(0.0, 3.1)], Direction::Charge),
            Err(SignalError::NonMonotoneTime(1))
        );
        assert!(matches!(
            ChargingRecord::new(vec![s(0.0, 3.0), s(1.0, 4.6)], Direction::Charge),
            Err(SignalError::VoltageOutOfBand { index: 1, .. })
        ));
    }

    #[test]
    fn discharge_curve_is_reversed() {
        let rec = record(Direction::Discharge, -36.0, |q| 3.0 + q / 10.0, 101);
        let c = rec.to_curve().unwrap();
        assert_eq!(c.charge()[0], 0.0);
        assert!((c.charge()[100] - 1.0).abs() < 1e-12);
        assert!((c.voltage()[0] - 3.0).abs() < 1e-12);
        assert!(c.is_monotone());
    }

    #[test]
    fn identical_branches_give_the_same_curve() {
        let f = |q: f64| 3.0 + 0.01 * q;
        let ch = record(Direction::Charge, 36.0, f, 2001);
        let dis = record(Direction::Discharge, -36.0, f, 2001);
        let out = pseudo_ocv(&ch, &dis, 0.1, 25, 3).unwrap();
        for (q, v) in out.charge().iter().zip(out.voltage()) {
            assert!((v - f(*q)).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_hysteresis_cancels() {
        let mid = |q: f64| 3.0 + 0.05 * q - 0.001 * q * q;
        let h = 0.03;
        let ch = record(Direction::Charge, 36.0, |q| mid(q) + h, 2001);
        let dis = record(Direction::Discharge, -36.0, |q| mid(q) - h, 2001);
        let out = pseudo_ocv(&ch, &dis, 0.05, 25, 3).unwrap();
        for (q, v) in out.charge().iter().zip(out.voltage()) {
            assert!((v - mid(*q)).abs() < 1e-9);
        }
    }

    #[test]
    fn midline_matches_dense_interpolation_oracle() {
        let f = |q: f64| 3.2 + 0.3 * (q / 4.0).sin().abs() + 0.05 * q;
        let ch = record(Direction::Charge, 50.0, f, 501).to_curve().unwrap();
        let dis = record(Direction::Discharge, -40.0, |q| f(q) - 0.02, 601).to_curve().unwrap();
        let out = midline(&ch, &dis, 0.37).unwrap();
        for (&q, &v) in out.charge().iter().zip(out.voltage()) {
            // oracle: locate the bracketing samples by linear search
            let lin = |c: &OcvCurve| {
                let k = (1..c.len()).find(|&k| c.charge()[k] >= q).unwrap();
                let (q0, q1) = (c.charge()[k - 1], c.charge()[k]);
                let (v0, v1) = (c.voltage()[k - 1], c.voltage()[k]);
                v0 + (q - q0) / (q1 - q0) * (v1 - v0)
            };
            assert!((v - 0.5 * (lin(&ch) + lin(&dis))).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_branches_error() {
        let a = OcvCurve::new(vec![0.0, 1.0], vec![3.0, 3.1]).unwrap();
        let b = OcvCurve::new(vec![5.0, 6.0], vec![3.0, 3.1]).unwrap();
        assert!(matches!(midline(&a, &b, 0.1), Err(SignalError::DisjointBranches(_))));
        let c = OcvCurve::new(vec![0.0, 1.0], vec![3.5, 3.6]).unwrap();
        assert!(matches!(midline(&a, &c, 0.1), Err(SignalError::DisjointBranches(_))));
    }

    #[test]
    fn charge_at_handles_flat_runs() {
        let c = OcvCurve::new(vec![0.0, 1.0, 2.0, 3.0], vec![3.0, 3.5, 3.5, 4.0]).unwrap();
        assert_eq!(c.charge_at(3.5), Some(1.0));
        assert_eq!(c.charge_at(3.75), Some(2.5));
        assert_eq!(c.charge_at(4.1), None);
    }
}
