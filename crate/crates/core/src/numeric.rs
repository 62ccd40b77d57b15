//! Small numerical helpers shared across modules.

/// Finds `x` in `[lo, hi]` with `f(x) = target` for an increasing `f`,
/// stopping once the bracket is narrower than `tol`.
///
/// The caller guarantees `f(lo) <= target <= f(hi)`.
pub fn bisect_increasing<F>(mut f: F, target: f64, mut lo: f64, mut hi: f64, tol: f64) -> f64
where
    F: FnMut(f64) -> f64,
{
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Linear interpolation of `ys` over strictly increasing `xs` at `x`.
/// Returns `None` outside `[xs[0], xs[last]]`.
pub fn interp_monotone(xs: &[f64], ys: &[f64], x: f64) -> Option<f64> {
    let n = xs.len();
    if n < 2 || x < xs[0] || x > xs[n - 1] {
        return None;
    }
    // index of the first element > x
    let upper = xs.partition_point(|&v| v <= x);
    if upper == 0 {
        return Some(ys[0]);
    }
    if upper >= n {
        return Some(ys[n - 1]);
    }
    let (x0, x1) = (xs[upper - 1], xs[upper]);
    let t = (x - x0) / (x1 - x0);
    Some(ys[upper - 1] + t * (ys[upper] - ys[upper - 1]))
}

/// SplitMix64 finalizer; used to derive independent sub-seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn population_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Median of a slice (average of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bisect_finds_sqrt_two() {
        let r = bisect_increasing(|x| x * x, 2.0, 0.0, 2.0, 1e-12);
        assert!((r - 2f64.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn interp_edges_and_interior() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [0.0, 10.0, 30.0];
        assert_eq!(interp_monotone(&xs, &ys, 0.0), Some(0.0));
        assert_eq!(interp_monotone(&xs, &ys, 3.0), Some(30.0));
        assert_eq!(interp_monotone(&xs, &ys, 2.0), Some(20.0));
        assert_eq!(interp_monotone(&xs, &ys, 3.5), None);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
