//! Savitzky–Golay smoothing with shrunken one-sided fits at the edges.

use super::{Result, SignalError};

pub const DEFAULT_WINDOW: usize = 25;
pub const DEFAULT_ORDER: usize = 3;

/// Weights `w` such that `Σ w_k · y_k` is the value at offset 0 of the
/// least-squares polynomial of degree `order` through `(offsets_k, y_k)`.
///
/// Offsets are divided by their largest magnitude before forming the normal
/// equations, which keeps the system well conditioned for small orders.
fn fit_weights(offsets: &[f64], order: usize) -> Vec<f64> {
    let m = order + 1;
    let scale = offsets.iter().fold(1.0f64, |a, &o| a.max(o.abs()));
    let powers: Vec<Vec<f64>> = offsets
        .iter()
        .map(|&o| {
            let t = o / scale;
            let mut row = Vec::with_capacity(m);
            let mut p = 1.0;
            for _ in 0..m {
                row.push(p);
                p *= t;
            }
            row
        })
        .collect();

    // G = VᵀV; solve G z = e0, then w = V z.
    let mut g = vec![vec![0.0; m + 1]; m];
    for row in &powers {
        for a in 0..m {
            for b in 0..m {
                g[a][b] += row[a] * row[b];
            }
        }
    }
    g[0][m] = 1.0;
    let z = solve_augmented(g);
    powers.iter().map(|row| row.iter().zip(&z).map(|(p, c)| p * c).sum()).collect()
}

/// Gaussian elimination with partial pivoting on an `m × (m+1)` augmented matrix.
pub(crate) fn solve_augmented(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let m = a.len();
    for col in 0..m {
        let pivot = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap_or(col);
        a.swap(col, pivot);
        let d = a[col][col];
        for row in col + 1..m {
            let f = a[row][col] / d;
            if f != 0.0 {
                for k in col..=m {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let mut s = a[row][m];
        for k in row + 1..m {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    x
}

/// Smooths `series` with a centered window of `window_len` samples.
///
/// Near the ends the window is truncated to the samples that exist; if the
/// truncated window has fewer than `poly_order + 1` samples it is extended
/// inward so the fit stays determined.
pub fn savgol_smooth(series: &[f64], window_len: usize, poly_order: usize) -> Result<Vec<f64>> {
    let n = series.len();
    if window_len % 2 == 0 || window_len <= poly_order || window_len > n {
        return Err(SignalError::SavgolParams { window: window_len, order: poly_order, len: n });
    }
    let half = window_len / 2;
    let mut out = vec![0.0; n];

    let center: Vec<f64> = (0..window_len).map(|k| k as f64 - half as f64).collect();
    let center_w = fit_weights(&center, poly_order);

    for i in 0..n {
        let (lo, hi) = if i >= half && i + half < n {
            (i - half, i + half)
        } else {
            let mut lo = i.saturating_sub(half);
            let mut hi = (i + half).min(n - 1);
            while hi - lo < poly_order {
                if lo > 0 {
                    lo -= 1;
                } else {
                    hi += 1;
                }
            }
            (lo, hi)
        };
        out[i] = if hi - lo + 1 == window_len && lo + half == i {
            center_w.iter().zip(&series[lo..=hi]).map(|(w, y)| w * y).sum()
        } else {
            let offsets: Vec<f64> = (lo..=hi).map(|k| k as f64 - i as f64).collect();
            let w = fit_weights(&offsets, poly_order);
            w.iter().zip(&series[lo..=hi]).map(|(w, y)| w * y).sum()
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Independent oracle: orthogonalize the monomials over the window with
    /// modified Gram–Schmidt and project the data onto them.
    fn lsq_value_oracle(xs: &[f64], ys: &[f64], order: usize, at: f64) -> f64 {
        let n = xs.len();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut basis_at: Vec<f64> = Vec::new();
        for d in 0..=order {
            let mut v: Vec<f64> = xs.iter().map(|&x| (x - at).powi(d as i32)).collect();
            let mut v_at = if d == 0 { 1.0 } else { 0.0 };
            for (b, &b_at) in basis.iter().zip(&basis_at) {
                let c: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                for k in 0..n {
                    v[k] -= c * b[k];
                }
                v_at -= c * b_at;
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            basis.push(v.iter().map(|a| a / norm).collect());
            basis_at.push(v_at / norm);
        }
        basis.iter().zip(&basis_at).map(|(b, &b_at)| b.iter().zip(ys).map(|(p, y)| p * y).sum::<f64>() * b_at).sum()
    }

    #[test]
    fn rejects_bad_parameters() {
        let s = vec![0.0; 10];
        assert!(savgol_smooth(&s, 4, 2).is_err());
        assert!(savgol_smooth(&s, 3, 3).is_err());
        assert!(savgol_smooth(&s, 11, 3).is_err());
    }

    #[test]
    fn constant_is_unchanged() {
        let s = vec![3.7; 40];
        for v in savgol_smooth(&s, 25, 3).unwrap() {
            assert!((v - 3.7).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_ramp_matches_window_fit_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let ys: Vec<f64> = (0..80).map(|i| 0.05 * i as f64 + rng.random_range(-0.2..0.2)).collect();
        let (w, order) = (11, 3);
        let out = savgol_smooth(&ys, w, order).unwrap();
        let half = w / 2;
        for i in 0..ys.len() {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(ys.len() - 1);
            let xs: Vec<f64> = (lo..=hi).map(|k| k as f64).collect();
            let expect = lsq_value_oracle(&xs, &ys[lo..=hi], order, i as f64);
            assert!((out[i] - expect).abs() < 1e-10, "i = {i}: {} vs {expect}", out[i]);
        }
    }

    #[test]
    fn small_window_edges_extend_inward() {
        // window 5 with order 3 leaves only 3 samples at the first index
        let ys: Vec<f64> = (0..12).map(|i| (i as f64).powi(3) - 2.0 * i as f64).collect();
        let out = savgol_smooth(&ys, 5, 3).unwrap();
        for (a, b) in out.iter().zip(&ys) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn reproduces_low_degree_polynomials(
            coef in proptest::array::uniform4(-2.0f64..2.0),
            order in 0usize..4,
            half in 2usize..14,
            n in 30usize..90,
        ) {
            let window = 2 * half + 1;
            prop_assume!(window > order && window <= n);
            let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|&x| (0..=order).map(|d| coef[d] * x.powi(d as i32)).sum())
                .collect();
            let out = savgol_smooth(&ys, window, order).unwrap();
            for (a, b) in out.iter().zip(&ys) {
                prop_assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
            }
        }
    }
}
