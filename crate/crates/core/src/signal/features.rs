//! OCV feature points and the differential charges between them.

use serde::{Deserialize, Serialize};

use super::{OcvCurve, Result, SignalError};

pub const FEATURE_COUNT: usize = 15;

/// 2.8, 2.9, …, 4.2 V.
pub fn feature_voltages() -> [f64; FEATURE_COUNT] {
    std::array::from_fn(|i| (28 + i) as f64 / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePointSet {
    pub voltages: [f64; FEATURE_COUNT],
    pub q_fp: [f64; FEATURE_COUNT],
    pub dq_fp: [f64; FEATURE_COUNT],
}

impl FeaturePointSet {
    pub fn from_charges(q_fp: [f64; FEATURE_COUNT]) -> Result<Self> {
        let dq = diff_charge(&q_fp)?;
        Ok(Self { voltages: feature_voltages(), q_fp, dq_fp: dq.try_into().expect("same length") })
    }
}

/// Charges at which the curve crosses each feature voltage. The curve's own
/// charge axis is used, so a curve starting at the lower cutoff with zero
/// charge yields charges measured from the start of charging.
pub fn extract_feature_points(curve: &OcvCurve) -> Result<FeaturePointSet> {
    let volts = feature_voltages();
    let mut q = [0.0; FEATURE_COUNT];
    let mut missing = Vec::new();
    for (slot, &v) in q.iter_mut().zip(&volts) {
        match curve.charge_at(v) {
            Some(c) => *slot = c,
            None => missing.push(v),
        }
    }
    if !missing.is_empty() {
        return Err(SignalError::MissingFeatureVoltages(missing));
    }
    FeaturePointSet::from_charges(q)
}

/// `dq[0] = q[0]`, `dq[i] = q[i] - q[i-1]`.
pub fn diff_charge(q_fp: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = (1..q_fp.len()).find(|&i| !(q_fp[i] > q_fp[i - 1])) {
        return Err(SignalError::NonIncreasingCharge(i));
    }
    let mut out = Vec::with_capacity(q_fp.len());
    let mut prev = 0.0;
    for &q in q_fp {
        out.push(q - prev);
        prev = q;
    }
    Ok(out)
}

/// Prefix sums of `dq_fp`; every element must be positive.
pub fn cum_charge(dq_fp: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = dq_fp.iter().position(|&d| !(d > 0.0)) {
        return Err(SignalError::NonPositiveDelta(i));
    }
    let mut acc = 0.0;
    Ok(dq_fp
        .iter()
        .map(|&d| {
            acc += d;
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_curve_closed_form() {
        let q: Vec<f64> = (0..=160).map(|k| k as f64).collect();
        let v: Vec<f64> = q.iter().map(|q| 2.7 + q / 100.0).collect();
        let fp = extract_feature_points(&OcvCurve::new(q, v).unwrap()).unwrap();
        assert!((fp.q_fp[0] - 10.0).abs() < 1e-9);
        assert!((fp.q_fp[14] - 150.0).abs() < 1e-9);
        assert!(fp.q_fp.windows(2).all(|w| w[1] > w[0]));
        assert!(fp.dq_fp.iter().skip(1).all(|d| (d - 10.0).abs() < 1e-9));
    }

    #[test]
    fn short_curve_lists_missing_voltages() {
        let q: Vec<f64> = (0..=100).map(|k| k as f64).collect();
        let v: Vec<f64> = q.iter().map(|q| 2.7 + q / 100.0).collect();
        match extract_feature_points(&OcvCurve::new(q, v).unwrap()) {
            Err(SignalError::MissingFeatureVoltages(m)) => {
                assert_eq!(m.len(), 5);
                assert!((m[0] - 3.8).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unit_steps() {
        let q: Vec<f64> = (1..=15).map(f64::from).collect();
        assert_eq!(diff_charge(&q).unwrap(), vec![1.0; 15]);
        assert_eq!(cum_charge(&[1.0; 15]).unwrap(), q);
    }

    #[test]
    fn rejects_invalid_vectors() {
        assert_eq!(diff_charge(&[1.0, 2.0, 2.0]), Err(SignalError::NonIncreasingCharge(2)));
        assert_eq!(cum_charge(&[1.0, 0.0]), Err(SignalError::NonPositiveDelta(1)));
    }

    proptest! {
        #[test]
        fn diff_matches_subtraction_and_inverts(steps in proptest::collection::vec(1e-3f64..50.0, 15)) {
            let mut q = Vec::new();
            let mut acc = 0.0;
            for s in &steps {
                acc += s;
                q.push(acc);
            }
            let dq = diff_charge(&q).unwrap();
            prop_assert_eq!(dq[0], q[0]);
            for i in 1..15 {
                prop_assert_eq!(dq[i], q[i] - q[i - 1]);
            }
            // the prefix sum of the differences reproduces q exactly
            prop_assert_eq!(cum_charge(&dq).unwrap(), q);
        }

        #[test]
        fn cum_matches_prefix_sum(dq in proptest::collection::vec(1e-3f64..50.0, 15)) {
            let q = cum_charge(&dq).unwrap();
            for i in 0..15 {
                let oracle: f64 = dq[..=i].iter().sum();
                prop_assert!((q[i] - oracle).abs() <= 1e-12 * oracle);
            }
        }
    }
}
