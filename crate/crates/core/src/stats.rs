//! Sampling primitives and small statistical tests.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, numerical, Result};
use crate::harmonic::{CoefMatrix, CoefVector, STATE_DIM};

/// Draw from Inverse-Gamma(shape, rate): density ∝ x^(−shape−1) e^(−rate/x).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
        return Err(numerical(format!("inverse-gamma parameters must be positive, got shape={shape} rate={rate}")));
    }
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| numerical(format!("gamma: {e}")))?;
    Ok(1.0 / g.sample(rng))
}

/// Gaussian with precision `Q = LLᵀ` and mean `Q⁻¹ a`, for the 8-dim
/// coefficient blocks.
#[derive(Debug, Clone)]
pub struct CanonicalGaussian8 {
    pub mean: CoefVector,
    pub precision_chol: nalgebra::Cholesky<f64, nalgebra::Const<STATE_DIM>>,
}

impl CanonicalGaussian8 {
    pub fn new(precision: CoefMatrix, linear: CoefVector, what: &str) -> Result<Self> {
        let chol = nalgebra::Cholesky::new(precision)
            .ok_or_else(|| numerical(format!("{what}: precision not positive definite")))?;
        let mean = chol.solve(&linear);
        Ok(Self { mean, precision_chol: chol })
    }

    pub fn covariance(&self) -> CoefMatrix {
        self.precision_chol.inverse()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CoefVector {
        let z = CoefVector::from_fn(|_, _| rng.sample(StandardNormal));
        // x = μ + L⁻ᵀ z
        let lt = self.precision_chol.l().transpose();
        let e = lt.solve_upper_triangular(&z).expect("factor has a positive diagonal");
        self.mean + e
    }
}

/// Dynamic-size version of [`CanonicalGaussian8`].
#[derive(Debug, Clone)]
pub struct CanonicalGaussian {
    pub mean: DVector<f64>,
    pub precision_chol: Cholesky<f64, Dyn>,
}

impl CanonicalGaussian {
    pub fn new(precision: DMatrix<f64>, linear: &DVector<f64>, what: &str) -> Result<Self> {
        let chol = Cholesky::new(precision).ok_or_else(|| numerical(format!("{what}: precision not positive definite")))?;
        let mean = chol.solve(linear);
        Ok(Self { mean, precision_chol: chol })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision_chol.inverse()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.mean.len();
        let z = DVector::from_fn(n, |_, _| rng.sample(StandardNormal));
        let lt = self.precision_chol.l().transpose();
        let e = lt.solve_upper_triangular(&z).expect("factor has a positive diagonal");
        &self.mean + e
    }
}

/// Draw Σ ~ Inverse-Wishart(Λ, ν), with E[Σ] = Λ/(ν − d − 1).
///
/// With Λ = UUᵀ and A the Bartlett factor of a standard Wishart(I, ν),
/// Σ = (U A⁻ᵀ)(U A⁻ᵀ)ᵀ.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(scale: &DMatrix<f64>, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = scale.nrows();
    if scale.ncols() != d || d == 0 {
        return Err(invalid("inverse-Wishart scale must be square and non-empty"));
    }
    if !(df > (d as f64) - 1.0) {
        return Err(numerical(format!("inverse-Wishart needs df > d − 1, got df={df}, d={d}")));
    }
    let u = Cholesky::new(scale.clone())
        .ok_or_else(|| numerical("inverse-Wishart scale not positive definite"))?
        .l();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| numerical(format!("chi-squared: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    // B = U A⁻ᵀ  ⇔  A Bᵀ = Uᵀ.
    let bt = a
        .solve_lower_triangular(&u.transpose())
        .ok_or_else(|| numerical("Bartlett factor singular"))?;
    let sigma = bt.tr_mul(&bt);
    Ok((&sigma + sigma.transpose()) * 0.5)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior mean and equal-tailed interval at `level` (e.g. 0.95).
pub fn summarize(values: &[f64], level: f64) -> (f64, f64, f64) {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (mean(values), quantile_sorted(&s, tail), quantile_sorted(&s, 1.0 - tail))
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of a KS statistic with Stephens' small-sample correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as i64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_test(samples: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let d = ks_statistic(samples, cdf);
    (d, ks_p_value(d, samples.len()))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Result of a two-sample Welch t-test of `second − first`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub difference: f64,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Two-sided critical value of t at the requested level.
    pub critical: f64,
}

/// Welch unequal-variance t-test of mean(second) − mean(first) with a
/// two-sided `level` interval.
pub fn welch_t_test(first: &[f64], second: &[f64], level: f64) -> Result<WelchTest> {
    if first.len() < 2 || second.len() < 2 {
        return Err(invalid("Welch test needs at least two observations per group"));
    }
    let (n1, n2) = (first.len() as f64, second.len() as f64);
    let diff = mean(second) - mean(first);
    let (v1, v2) = (variance(first) / n1, variance(second) / n2);
    let se2 = v1 + v2;
    if se2 == 0.0 {
        // Both groups constant: no sampling variability to test against.
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        let p = if diff == 0.0 { 1.0 } else { 0.0 };
        let df = n1 + n2 - 2.0;
        let crit = students_t(df)?.inverse_cdf(0.5 + level / 2.0);
        return Ok(WelchTest { difference: diff, t, df, p_value: p, lower: diff, upper: diff, critical: crit });
    }
    let se = se2.sqrt();
    let df = se2 * se2 / (v1 * v1 / (n1 - 1.0) + v2 * v2 / (n2 - 1.0));
    let t = diff / se;
    let dist = students_t(df)?;
    let p = 2.0 * dist.sf(t.abs());
    let crit = dist.inverse_cdf(0.5 + level / 2.0);
    Ok(WelchTest { difference: diff, t, df, p_value: p.min(1.0), lower: diff - crit * se, upper: diff + crit * se, critical: crit })
}

fn students_t(df: f64) -> Result<StudentsT> {
    StudentsT::new(0.0, 1.0, df).map_err(|e| numerical(format!("Student t: {e}")))
}

/// Standard error of the mean of a correlated series by non-overlapping batch means.
pub fn batch_means_se(x: &[f64], n_batches: usize) -> f64 {
    let b = x.len() / n_batches;
    let means: Vec<f64> = (0..n_batches).map(|k| mean(&x[k * b..(k + 1) * b])).collect();
    (variance(&means) / n_batches as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use statrs::function::gamma::gamma_ur;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn inverse_gamma_matches_cdf() {
        let mut r = rng(1);
        let (a, b) = (3.5, 2.0);
        let xs: Vec<f64> = (0..10_000).map(|_| sample_inverse_gamma(a, b, &mut r).unwrap()).collect();
        let (_, p) = ks_test(&xs, |x| gamma_ur(a, b / x));
        assert!(p > 0.01, "p = {p}");
        assert!(sample_inverse_gamma(0.0, 1.0, &mut r).is_err());
    }

    #[test]
    fn one_by_one_inverse_wishart_is_inverse_gamma() {
        let mut r = rng(2);
        let (lambda, nu) = (3.0, 7.0);
        let scale = DMatrix::from_element(1, 1, lambda);
        let xs: Vec<f64> = (0..10_000).map(|_| sample_inverse_wishart(&scale, nu, &mut r).unwrap()[(0, 0)]).collect();
        let (_, p) = ks_test(&xs, |x| gamma_ur(nu / 2.0, lambda / 2.0 / x));
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn inverse_wishart_mean() {
        let mut r = rng(3);
        let d = 3;
        let scale = DMatrix::from_fn(d, d, |i, j| if i == j { 2.0 } else { 0.5 });
        let nu = 12.0;
        let n = 20_000;
        let mut acc = DMatrix::zeros(d, d);
        for _ in 0..n {
            acc += sample_inverse_wishart(&scale, nu, &mut r).unwrap();
        }
        let got = acc / n as f64;
        let want = &scale / (nu - d as f64 - 1.0);
        assert!((got - want).abs().max() < 0.01);
    }

    #[test]
    fn canonical_gaussian_moments() {
        let mut r = rng(4);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let a = DVector::from_vec(vec![1.0, -1.0]);
        let g = CanonicalGaussian::new(q.clone(), &a, "test").unwrap();
        let cov = q.clone().try_inverse().unwrap();
        let mu = &cov * &a;
        assert!((&g.mean - &mu).abs().max() < 1e-12);
        let n = 40_000;
        let xs: Vec<DVector<f64>> = (0..n).map(|_| g.sample(&mut r)).collect();
        let m: DVector<f64> = xs.iter().fold(DVector::zeros(2), |s, x| s + x) / n as f64;
        assert!((&m - &mu).abs().max() < 0.02);
        let c: DMatrix<f64> = xs.iter().fold(DMatrix::zeros(2, 2), |s, x| s + (x - &m) * (x - &m).transpose()) / n as f64;
        assert!((c - cov).abs().max() < 0.02);
    }

    #[test]
    fn quantiles_and_summary() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
        let (m, lo, hi) = summarize(&[7.0; 10], 0.95);
        assert_eq!((m, lo, hi), (7.0, 7.0, 7.0));
    }

    #[test]
    fn ks_detects_mismatch() {
        let mut r = rng(5);
        let xs: Vec<f64> = (0..5000).map(|_| r.sample::<f64, _>(StandardNormal) + 0.2).collect();
        assert!(ks_test(&xs, normal_cdf).1 < 1e-6);
        let ys: Vec<f64> = (0..5000).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        assert!(ks_test(&ys, normal_cdf).1 > 0.01);
    }

    #[test]
    fn welch_reference_values() {
        // Values cross-checked with scipy.stats.ttest_ind(equal_var=False).
        let a = [19.8, 20.4, 19.6, 17.8, 18.5, 18.9, 18.3, 18.9, 19.5, 22.0];
        let b = [28.2, 26.6, 20.1, 23.3, 25.2, 22.1, 17.7, 27.6, 20.6, 13.7, 23.2, 17.5, 20.6, 18.0, 23.9, 21.6, 24.3, 20.4, 24.0, 13.2];
        let w = welch_t_test(&a, &b, 0.95).unwrap();
        assert!((w.t - 2.2192409158236233).abs() < 1e-10, "{w:?}");
        assert!((w.df - 24.496223124201244).abs() < 1e-8, "{w:?}");
        assert!((w.p_value - 0.03597227102979685).abs() < 1e-8, "{w:?}");
        let z = welch_t_test(&a, &a, 0.95).unwrap();
        assert_eq!(z.t, 0.0);
        assert!(welch_t_test(&a[..1], &b, 0.95).is_err());
    }
}
