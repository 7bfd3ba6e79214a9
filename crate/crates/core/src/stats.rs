//! Small numeric helpers shared across modules.

use crate::error::{Result, S2skError};

/// Linear-interpolation quantile of an ascending slice, `p` in percent.
///
/// Uses the rank rule `h = (n - 1) * p / 100` with interpolation between the
/// neighbouring order statistics (the default rule of most array libraries).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(S2skError::invalid("quantile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(S2skError::invalid(format!("percentile {p} outside [0, 100]")));
    }
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Sorts a scratch copy and evaluates [`quantile_sorted`].
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// SplitMix64 finalizer, used to derive independent seeds from a master seed.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `index` under `master`: `splitmix64(master ^ splitmix64(index))`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// FNV-1a over the bit patterns of a float sequence. Used for cheap identity checks.
pub fn fingerprint<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Solves `m x = rhs` for symmetric positive definite `m` via Cholesky.
/// `None` when `m` is not numerically positive definite.
pub fn cholesky_solve(m: &ndarray::Array2<f64>, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    if m.dim() != (n, n) {
        return None;
    }
    let mut l = ndarray::Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(sum > 0.0) {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[[i, k]] * y[k]).sum();
        y[i] = (rhs[i] - s) / l[[i, i]];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[[k, i]] * x[k]).sum();
        x[i] = (y[i] - s) / l[[i, i]];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_spd_system() {
        let m = ndarray::array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let x = cholesky_solve(&m, &[1.0, 2.0, 3.0]).unwrap();
        let back = m.dot(&ndarray::Array1::from(x));
        for (a, b) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cholesky_solve(&ndarray::array![[1.0, 2.0], [2.0, 1.0]], &[1.0, 1.0]).is_none());
    }

    #[test]
    fn linear_rule_on_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile_sorted(&v, 95.0).unwrap() - 95.05).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile_sorted(&v, 100.0).unwrap(), 100.0);
    }

    #[test]
    fn empty_quantile_is_error() {
        assert!(quantile(&[], 50.0).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, 0));
    }
}
