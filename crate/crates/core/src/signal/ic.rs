//! Incremental-capacity curves on a uniform voltage grid.

use serde::{Deserialize, Serialize};

use super::{savgol_smooth, OcvCurve, Result, SignalError, DEFAULT_ORDER, DEFAULT_WINDOW, IC_WINDOW_V};

const BOUND_SLACK_V: f64 = 1e-9;

/// Maxima less prominent than this fraction of the tallest value are
/// rounding ripple, not peaks.
const PROMINENCE_FLOOR: f64 = 1e-6;

/// IC values at voltages `(start_index + k) · step`, in mAh/V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcCurve {
    pub start_index: i64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl IcCurve {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voltage(&self, k: usize) -> f64 {
        (self.start_index + k as i64) as f64 * self.step
    }

    pub fn voltages(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.voltage(k)).collect()
    }

    pub fn first_voltage(&self) -> f64 {
        self.voltage(0)
    }

    pub fn last_voltage(&self) -> f64 {
        self.voltage(self.len().saturating_sub(1))
    }

    /// Position of the grid voltage nearest `v`, if it lies on the curve.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        let k = (v / self.step).round() as i64 - self.start_index;
        (k >= 0 && (k as usize) < self.len()).then_some(k as usize)
    }

    pub fn value_at(&self, v: f64) -> Option<f64> {
        self.index_of(v).map(|k| self.values[k])
    }
}

/// Central charge differences of a non-decreasing curve on a `dv` grid:
/// `IC(V_k) = (Q(V_k + dv/2) - Q(V_k - dv/2)) / dv`, with `Q(V)` the linear
/// inverse of the curve. Summing `IC · dv` telescopes to the charge between
/// the outermost half-steps.
pub fn incremental_capacity(curve: &OcvCurve, dv: f64) -> Result<IcCurve> {
    if let Some(i) = (1..curve.len()).find(|&i| curve.voltage()[i] < curve.voltage()[i - 1]) {
        return Err(SignalError::NonMonotoneVoltage(i));
    }
    let v = curve.voltage();
    let (vmin, vmax) = (v[0], v[v.len() - 1]);
    let first = (vmin / dv + 0.5).ceil() as i64;
    let last = (vmax / dv - 0.5).floor() as i64;
    if last < first {
        return Err(SignalError::NarrowSpan);
    }
    let q_at = |x: f64| curve.charge_at(x.clamp(vmin, vmax)).expect("clamped into span");
    let values = (first..=last)
        .map(|k| {
            let center = k as f64 * dv;
            let lo = q_at(center - 0.5 * dv);
            let hi = q_at(center + 0.5 * dv);
            (hi - lo) / dv
        })
        .collect();
    Ok(IcCurve { start_index: first, step: dv, values })
}

/// IC values at the grid voltages from `v1` to `v2` inclusive.
pub fn ic_segment(ic: &IcCurve, v1: f64, v2: f64) -> Result<Vec<f64>> {
    let (lo, hi) = IC_WINDOW_V;
    if !(v1 < v2) || v1 < lo - BOUND_SLACK_V || v2 > hi + BOUND_SLACK_V {
        return Err(SignalError::SegmentBounds { v1, v2, lo, hi });
    }
    let len = ((v2 - v1) / ic.step).round() as usize + 1;
    let outside = || SignalError::SegmentOutsideCurve { v1, v2, lo: ic.first_voltage(), hi: ic.last_voltage() };
    let start = ic.index_of(v1).ok_or_else(outside)?;
    if start + len > ic.len() {
        return Err(outside());
    }
    Ok(ic.values[start..start + len].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcPeakFeatures {
    pub peak1_height: f64,
    pub peak2_height: f64,
    pub valley_height: f64,
    pub peak1_v: f64,
    pub peak2_v: f64,
    pub valley_v: f64,
}

impl IcPeakFeatures {
    pub fn heights(&self) -> [f64; 3] {
        [self.peak1_height, self.peak2_height, self.valley_height]
    }
}

/// The two largest local maxima inside the peak window, ordered by voltage,
/// and the lowest point between them, all read from the SG-smoothed curve.
pub fn ic_peak_features(ic: &IcCurve) -> Result<IcPeakFeatures> {
    let (lo, hi) = IC_WINDOW_V;
    if ic.first_voltage() > lo + BOUND_SLACK_V || ic.last_voltage() < hi - BOUND_SLACK_V {
        return Err(SignalError::PeakWindowUncovered);
    }
    let s = if ic.len() >= DEFAULT_WINDOW {
        savgol_smooth(&ic.values, DEFAULT_WINDOW, DEFAULT_ORDER)?
    } else {
        ic.values.clone()
    };
    let a = ic.index_of(lo).ok_or(SignalError::PeakWindowUncovered)?;
    let b = ic.index_of(hi).ok_or(SignalError::PeakWindowUncovered)?;

    let (first, last) = (a.max(1), b.min(s.len() - 2));
    let scale = s[first..=last].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut maxima: Vec<usize> = (first..=last)
        .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1])
        .filter(|&i| prominence(&s[first..=last], i - first) > PROMINENCE_FLOOR * scale)
        .collect();
    if maxima.len() < 2 {
        return Err(SignalError::TooFewPeaks(maxima.len()));
    }
    // tallest first; equal heights keep the lower voltage
    maxima.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let (mut p1, mut p2) = (maxima[0], maxima[1]);
    if p2 < p1 {
        std::mem::swap(&mut p1, &mut p2);
    }
    let valley = (p1 + 1..p2).min_by(|&i, &j| s[i].total_cmp(&s[j]).then(i.cmp(&j))).unwrap_or(p1);
    Ok(IcPeakFeatures {
        peak1_height: s[p1],
        peak2_height: s[p2],
        valley_height: s[valley],
        peak1_v: ic.voltage(p1),
        peak2_v: ic.voltage(p2),
        valley_v: ic.voltage(valley),
    })
}

/// Height of `s[i]` above the higher of the two lowest points separating it
/// from taller samples (or from the slice ends).
fn prominence(s: &[f64], i: usize) -> f64 {
    let h = s[i];
    let mut left_min = h;
    for j in (0..i).rev() {
        if s[j] > h {
            break;
        }
        left_min = left_min.min(s[j]);
    }
    let mut right_min = h;
    for &x in &s[i + 1..] {
        if x > h {
            break;
        }
        right_min = right_min.min(x);
    }
    h - left_min.max(right_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear_curve(slope: f64, v0: f64, v1: f64) -> OcvCurve {
        let n = 2000;
        let q_end = (v1 - v0) / slope;
        let q: Vec<f64> = (0..=n).map(|k| q_end * k as f64 / n as f64).collect();
        let v: Vec<f64> = q.iter().map(|q| v0 + slope * q).collect();
        OcvCurve::new(q, v).unwrap()
    }

    #[test]
    fn linear_curve_gives_constant_ic() {
        let slope = 0.002; // V per mAh
        let ic = incremental_capacity(&linear_curve(slope, 2.7, 4.2), 0.001).unwrap();
        assert_eq!(ic.step, 0.001);
        for v in &ic.values {
            assert!((v - 1.0 / slope).abs() < 1e-9 * (1.0 / slope));
        }
        assert!(ic.first_voltage() >= 2.7 && ic.last_voltage() <= 4.2);
    }

    #[test]
    fn rejects_decreasing_curve() {
        let c = OcvCurve::from_raw(vec![0.0, 1.0, 2.0], vec![3.0, 3.2, 3.1]).unwrap();
        assert_eq!(incremental_capacity(&c, 0.001), Err(SignalError::NonMonotoneVoltage(2)));
    }

    #[test]
    fn integral_telescopes_to_charge_span() {
        let q: Vec<f64> = (0..=3000).map(|k| k as f64 * 0.25).collect();
        let v: Vec<f64> = q.iter().map(|q| 3.0 + 0.4 * (q / 750.0) + 0.2 * (q / 750.0).powi(3)).collect();
        let curve = OcvCurve::new(q, v).unwrap();
        let ic = incremental_capacity(&curve, 0.001).unwrap();
        let integral: f64 = ic.values.iter().sum::<f64>() * ic.step;
        assert!(ic.values.iter().all(|&x| x >= 0.0));
        assert!((integral - 750.0).abs() / 750.0 < 0.005, "{integral}");
    }

    fn gaussian_ic() -> (IcCurve, impl Fn(f64) -> f64) {
        let f = |v: f64| {
            200.0
                + 1000.0 * (-((v - 3.65) / 0.02).powi(2) / 2.0).exp()
                + 800.0 * (-((v - 3.85) / 0.02).powi(2) / 2.0).exp()
                - 150.0 * (-((v - 3.76) / 0.03).powi(2) / 2.0).exp()
        };
        let start = 3400;
        let values = (0..=700).map(|k| f((start + k) as f64 * 0.001)).collect();
        (IcCurve { start_index: start, step: 0.001, values }, f)
    }

    #[test]
    fn twin_bump_heights() {
        let (ic, f) = gaussian_ic();
        let p = ic_peak_features(&ic).unwrap();
        let dense_min = (0..=2000).map(|k| f(3.65 + 0.2 * k as f64 / 2000.0)).fold(f64::INFINITY, f64::min);
        assert!((p.peak1_height - f(3.65)).abs() / f(3.65) < 0.01);
        assert!((p.peak2_height - f(3.85)).abs() / f(3.85) < 0.01);
        assert!((p.valley_height - dense_min).abs() / dense_min < 0.01);
        assert!((p.peak1_v - 3.65).abs() < 0.002 && (p.peak2_v - 3.85).abs() < 0.002);
        assert!(p.peak1_v < p.valley_v && p.valley_v < p.peak2_v);
    }

    #[test]
    fn single_bump_is_too_few() {
        let values =
            (0..=700).map(|k| 100.0 + 500.0 * (-(((3400 + k) as f64 * 0.001 - 3.7) / 0.03).powi(2)).exp()).collect();
        let ic = IcCurve { start_index: 3400, step: 0.001, values };
        assert_eq!(ic_peak_features(&ic), Err(SignalError::TooFewPeaks(1)));
    }

    #[test]
    fn segment_matches_grid_lookup() {
        let (ic, _) = gaussian_ic();
        let seg = ic_segment(&ic, 3.695, 3.822).unwrap();
        assert_eq!(seg.len(), 128);
        for (k, &x) in seg.iter().enumerate() {
            let v = 3.695 + k as f64 * 0.001;
            assert_eq!(Some(x), ic.value_at(v));
            assert_eq!(x, ic.values[(3695 + k) - 3400]);
        }
    }

    #[test]
    fn segment_bound_errors() {
        let (ic, _) = gaussian_ic();
        assert!(matches!(ic_segment(&ic, 3.7, 3.7), Err(SignalError::SegmentBounds { .. })));
        assert!(matches!(ic_segment(&ic, 3.4, 3.7), Err(SignalError::SegmentBounds { .. })));
        assert!(matches!(ic_segment(&ic, 3.7, 4.05), Err(SignalError::SegmentBounds { .. })));
        let short = IcCurve { start_index: 3600, step: 0.001, values: vec![1.0; 100] };
        assert!(matches!(ic_segment(&short, 3.5, 3.65), Err(SignalError::SegmentOutsideCurve { .. })));
    }

    proptest! {
        #[test]
        fn peaks_match_exhaustive_scan(
            h1 in 200.0f64..1500.0, h2 in 200.0f64..1500.0,
            c1 in 3.56f64..3.70, c2 in 3.80f64..3.94,
        ) {
            let f = |v: f64| 50.0 + h1 * (-((v - c1) / 0.015).powi(2)).exp() + h2 * (-((v - c2) / 0.015).powi(2)).exp();
            let values: Vec<f64> = (0..=800).map(|k| f((3400 + k) as f64 * 0.001)).collect();
            let ic = IcCurve { start_index: 3400, step: 0.001, values };
            let p = ic_peak_features(&ic).unwrap();
            // oracle: scan every smoothed sample in the window for strict-left local maxima
            let s = savgol_smooth(&ic.values, DEFAULT_WINDOW, DEFAULT_ORDER).unwrap();
            let mut peaks = Vec::new();
            for i in 100..=600 {
                if s[i] > s[i - 1] && s[i] >= s[i + 1] {
                    peaks.push((s[i], i));
                }
            }
            peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
            let (mut i1, mut i2) = (peaks[0].1, peaks[1].1);
            if i1 > i2 { std::mem::swap(&mut i1, &mut i2); }
            let mut lowest = f64::INFINITY;
            for i in i1 + 1..i2 {
                lowest = lowest.min(s[i]);
            }
            prop_assert_eq!(p.peak1_height, s[i1]);
            prop_assert_eq!(p.peak2_height, s[i2]);
            prop_assert_eq!(p.valley_height, lowest);
        }
    }
}
