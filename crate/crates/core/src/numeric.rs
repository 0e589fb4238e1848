//! Small numeric helpers shared across modules.

/// `ln(sum(exp(x)))` over the finite entries of `terms`; `-inf` when none are finite.
pub(crate) fn log_sum_exp(terms: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = terms
        .clone()
        .into_iter()
        .filter(|t| t.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms
        .into_iter()
        .filter(|t| t.is_finite())
        .map(|t| (t - max).exp())
        .sum();
    max + sum.ln()
}

/// `|a - b| / max(|a|, |b|)`, zero when both are zero.
pub(crate) fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One coordinate of the generalized KL divergence, `x ln(x/y) - x + y`.
///
/// Written as `y f(r)` with `r = (x - y) / y` and `f(r) = (1 + r) ln(1 + r) - r`;
/// small `r` uses the series of `f` to avoid cancellation.
pub(crate) fn kl_term(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        return y;
    }
    let r = (x - y) / y;
    let f = if r.abs() < 1e-3 {
        let r2 = r * r;
        r2 * (0.5 - r / 6.0 + r2 / 12.0 - r2 * r / 20.0 + r2 * r2 / 30.0)
    } else {
        (1.0 + r) * r.ln_1p() - r
    };
    y * f
}

/// Generalized KL divergence `sum x ln(x/y) - x + y` (unit scale).
pub(crate) fn generalized_kl(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&xi, &yi)| kl_term(xi, yi)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_large_terms() {
        let v = log_sum_exp([1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp([f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn kl_term_series_matches_direct_formula() {
        for (x, y) in [(1.0005, 1.0), (2.0, 1.0), (0.999, 1.0), (3.0, 7.0)] {
            let direct = x * (x / y as f64).ln() - x + y;
            assert!((kl_term(x, y) - direct).abs() < 1e-13, "{x} {y}");
        }
        let x = 1.0 + 1e-10;
        let r = x - 1.0;
        let tiny = kl_term(x, 1.0);
        assert!((tiny - 0.5 * r * r).abs() < 1e-9 * tiny);
        assert_eq!(kl_term(0.0, 2.0), 2.0);
    }

    #[test]
    fn kl_is_zero_on_diagonal() {
        assert_eq!(generalized_kl(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!(generalized_kl(&[1.0, 2.0], &[2.0, 1.0]) > 0.0);
    }
}
