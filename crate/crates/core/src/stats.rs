//! Small statistical helpers shared by the engines, the validation checks
//! and the test suites: summary statistics, Kolmogorov-Smirnov distances and
//! adaptive Simpson quadrature.

/// Asymptotic Kolmogorov-Smirnov critical coefficient at alpha = 0.01:
/// reject when D > 1.628 / sqrt(n) (one-sample) or
/// D > 1.628 * sqrt((n1 + n2) / (n1 * n2)) (two-sample).
pub const KS_COEF_ALPHA01: f64 = 1.628;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Linear-interpolation quantile (R type 7) of an unsorted sample.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty sample");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in quantile input"));
    quantile_sorted(&v, q)
}

/// Same estimator on an already-sorted sample (no copy).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!((0.0..=1.0).contains(&q), "quantile level must be in [0,1]");
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// One-sample KS distance between a sample and the Uniform(0,1) CDF.
pub fn ks_uniform(sample: &[f64]) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in KS input"));
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, u) in v.iter().enumerate() {
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((u - lo).abs()).max((hi - u).abs());
    }
    d
}

/// One-sample KS distance against an arbitrary CDF.
pub fn ks_cdf(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let transformed: Vec<f64> = sample.iter().map(|&x| cdf(x)).collect();
    ks_uniform(&transformed)
}

/// KS critical value for a one-sample test at alpha = 0.01.
pub fn ks_crit_alpha01(n: usize) -> f64 {
    KS_COEF_ALPHA01 / (n as f64).sqrt()
}

/// Two-sample KS distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "empty KS sample");
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(|p, q| p.partial_cmp(q).expect("no NaN"));
    y.sort_by(|p, q| p.partial_cmp(q).expect("no NaN"));
    let (na, nb) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let xv = x[i];
        let yv = y[j];
        if xv <= yv {
            i += 1;
        }
        if yv <= xv {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Two-sample KS critical value at alpha = 0.01.
pub fn ks_two_sample_crit_alpha01(n1: usize, n2: usize) -> f64 {
    KS_COEF_ALPHA01 * ((n1 + n2) as f64 / (n1 as f64 * n2 as f64)).sqrt()
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`. Panics on NaN endpoints; depth-capped so pathological integrands
/// terminate.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn summary_statistics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(mean(&xs), 2.5);
        assert_relative_eq!(sample_sd(&xs), (5.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(quantile(&xs, 0.5), 2.5);
        assert_relative_eq!(quantile(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile(&xs, 1.0), 4.0);
    }

    #[test]
    fn ks_uniform_detects_shift_and_accepts_grid() {
        // A perfectly spaced grid has D = 1/(2n) + tiny; well under the cutoff.
        let n = 1000;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!(ks_uniform(&grid) < ks_crit_alpha01(n));
        let shifted: Vec<f64> = grid.iter().map(|u| u * 0.8).collect();
        assert!(ks_uniform(&shifted) > ks_crit_alpha01(n));
    }

    #[test]
    fn ks_two_sample_matches_hand_value() {
        // F and G cross maximally at 0.5 apart here.
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [0.35, 0.45, 0.55, 0.65];
        // At x = 0.4: F = 1.0, G = 0.25 -> D = 0.75.
        assert_relative_eq!(ks_two_sample(&a, &b), 0.75);
    }

    #[test]
    fn simpson_integrates_smooth_functions() {
        let val = adaptive_simpson(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-10);
        assert_relative_eq!(val, 2.0, epsilon = 1e-9);
        let val = adaptive_simpson(&|x: f64| (-x * x / 2.0).exp(), -8.0, 8.0, 1e-11);
        assert_relative_eq!(val, (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-9);
    }
}
