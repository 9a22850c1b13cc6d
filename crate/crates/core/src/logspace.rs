//! Log-domain arithmetic shared by the FSA algorithms, losses and search.

/// `ln(exp(a) + exp(b))`, exact for `-inf` operands.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-sum-exp over an iterator; `-inf` for an empty input.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// In-place log-softmax over one row.
pub fn log_softmax_f32(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
    let norm = max + sum.ln();
    for v in row.iter_mut() {
        *v -= norm;
    }
}

/// In-place log-softmax over one row, 64-bit.
pub fn log_softmax_f64(row: &mut [f64]) {
    let norm = log_sum_exp(row.iter().copied());
    for v in row.iter_mut() {
        *v -= norm;
    }
}

/// `exp(x)` that maps `-inf` (and NaN produced by `-inf - -inf`) to zero.
#[inline]
pub(crate) fn safe_exp(x: f64) -> f64 {
    if x.is_nan() || x == f64::NEG_INFINITY {
        0.0
    } else {
        x.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_identities() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.5), -1.5);
        assert_eq!(log_add(-1.5, f64::NEG_INFINITY), -1.5);
        assert!((log_add(0.5f64.ln(), 0.5f64.ln())).abs() < 1e-15);
        assert_eq!(log_sum_exp(std::iter::empty()), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut row = vec![1.0f32, -2.0, 3.5, 0.0];
        log_softmax_f32(&mut row);
        let total: f32 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
}
