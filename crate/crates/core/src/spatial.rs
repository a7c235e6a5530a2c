//! Exponential covariance, knot grids and the predictive-process basis.
//!
//! The low-rank field at site s is `w(s) = c(s)ᵀ C*⁻¹ w*`, with `w*` the
//! process values at the knots. All processes share one decay φ, and
//! σ² cancels in `C·C*⁻¹`, so a single basis serves every process. The
//! basis is built from correlations only; σ² enters through
//! [`PredictiveBasis::knot_cov_chol`] and the per-process prior precision.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Result};

/// Planar projected coordinates, same distance unit as the decay φ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Self {
        Self { x_min, x_max, y_min, y_max }
    }

    /// Bounding box of `sites`. A zero-width axis is padded by one unit on each side.
    pub fn enclosing(sites: &[Location]) -> Result<Self> {
        if sites.is_empty() {
            return Err(invalid("no sites"));
        }
        let mut b = Bounds::new(f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in sites {
            b.x_min = b.x_min.min(s.x);
            b.x_max = b.x_max.max(s.x);
            b.y_min = b.y_min.min(s.y);
            b.y_max = b.y_max.max(s.y);
        }
        if b.x_max == b.x_min {
            b.x_min -= 1.0;
            b.x_max += 1.0;
        }
        if b.y_max == b.y_min {
            b.y_min -= 1.0;
            b.y_max += 1.0;
        }
        Ok(b)
    }

    pub fn diagonal(&self) -> f64 {
        (self.x_max - self.x_min).hypot(self.y_max - self.y_min)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(invalid(format!("degenerate domain bounds {self:?}")));
        }
        Ok(())
    }
}

/// Default decay: one third of the domain diagonal, so correlation across
/// the whole domain is e⁻³.
pub fn default_decay(bounds: &Bounds) -> f64 {
    bounds.diagonal() / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sigma2: f64,
    pub phi: f64,
}

impl CovarianceParams {
    pub fn new(sigma2: f64, phi: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite() && phi > 0.0 && phi.is_finite()) {
            return Err(invalid(format!("covariance parameters must be positive, got sigma2={sigma2} phi={phi}")));
        }
        Ok(Self { sigma2, phi })
    }
}

/// σ² exp(−d/φ).
pub fn exp_cov(d: f64, p: &CovarianceParams) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(invalid(format!("distance must be non-negative, got {d}")));
    }
    Ok(p.sigma2 * (-d / p.phi).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    knots: Vec<Location>,
}

impl KnotSet {
    pub fn new(knots: Vec<Location>) -> Result<Self> {
        if knots.is_empty() {
            return Err(invalid("knot set is empty"));
        }
        for (i, a) in knots.iter().enumerate() {
            if !(a.x.is_finite() && a.y.is_finite()) {
                return Err(invalid(format!("knot {i} has non-finite coordinates")));
            }
            if knots[..i].iter().any(|b| b == a) {
                return Err(invalid(format!("knot {i} duplicates an earlier knot at {a:?}")));
            }
        }
        Ok(Self { knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn locations(&self) -> &[Location] {
        &self.knots
    }
}

/// `mx·my` knots at the cell midpoints of a regular grid over `bounds`,
/// x varying fastest.
pub fn build_knot_grid(bounds: &Bounds, counts: (usize, usize)) -> Result<KnotSet> {
    bounds.validate()?;
    let (mx, my) = counts;
    if mx == 0 || my == 0 {
        return Err(invalid(format!("knot counts must be positive, got {counts:?}")));
    }
    let dx = (bounds.x_max - bounds.x_min) / mx as f64;
    let dy = (bounds.y_max - bounds.y_min) / my as f64;
    let mut knots = Vec::with_capacity(mx * my);
    for iy in 0..my {
        for ix in 0..mx {
            knots.push(Location::new(
                bounds.x_min + (ix as f64 + 0.5) * dx,
                bounds.y_min + (iy as f64 + 0.5) * dy,
            ));
        }
    }
    KnotSet::new(knots)
}

pub const DEFAULT_JITTER: f64 = 1e-8;
pub const MAX_JITTER: f64 = 1e-4;

/// Interpolation machinery shared by all processes.
#[derive(Debug, Clone)]
pub struct PredictiveBasis {
    /// n×m interpolation matrix `C·C*⁻¹`.
    h: DMatrix<f64>,
    /// Lower factor of the jittered knot correlation `R* + jI`.
    rstar_chol: DMatrix<f64>,
    rstar_inv: DMatrix<f64>,
    /// HᵀH, used by the knot-process update.
    hth: DMatrix<f64>,
    params: CovarianceParams,
    jitter: f64,
}

fn correlation_matrix(a: &[Location], b: &[Location], phi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, k| (-a[i].distance(&b[k]) / phi).exp())
}

impl PredictiveBasis {
    /// Build the basis for `sites` against `knots`. The diagonal of C* gets
    /// `jitter·σ²`; on factorization failure the jitter grows tenfold up to
    /// 1e−4·σ².
    pub fn build(sites: &[Location], knots: &KnotSet, params: CovarianceParams, jitter: f64) -> Result<Self> {
        if sites.is_empty() {
            return Err(invalid("predictive basis needs at least one site"));
        }
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(invalid(format!("jitter must be non-negative, got {jitter}")));
        }
        let params = CovarianceParams::new(params.sigma2, params.phi)?;
        let k = knots.locations();
        let r = correlation_matrix(k, k, params.phi);
        let mut j = jitter;
        let (chol, jitter) = loop {
            let mut rj = r.clone();
            for a in 0..rj.nrows() {
                rj[(a, a)] += j;
            }
            if let Some(c) = Cholesky::new(rj) {
                break (c, j);
            }
            let next = if j == 0.0 { DEFAULT_JITTER } else { j * 10.0 };
            if next > MAX_JITTER * (1.0 + 1e-12) {
                let min_sep = k
                    .iter()
                    .enumerate()
                    .flat_map(|(i, a)| k[..i].iter().map(move |b| a.distance(b)))
                    .fold(f64::INFINITY, f64::min);
                return Err(numerical(format!(
                    "knot correlation matrix not positive definite after jitter {j:e} (m={}, phi={}, min knot separation={min_sep})",
                    k.len(),
                    params.phi
                )));
            }
            j = next;
        };
        let cross = correlation_matrix(sites, k, params.phi);
        // H = c R⁻¹  ⇔  R Hᵀ = cᵀ. The jittered factor leaves a bias of
        // order j·‖R⁻¹‖; one refinement step against the unjittered R
        // reduces it to order j².
        let mut ht = chol.solve(&cross.transpose());
        if jitter > 0.0 {
            let resid = cross.transpose() - &r * &ht;
            ht += chol.solve(&resid);
        }
        let h = ht.transpose();
        let rstar_inv = chol.inverse();
        let hth = h.tr_mul(&h);
        Ok(Self { h, rstar_chol: chol.l(), rstar_inv, hth, params, jitter })
    }

    pub fn n_sites(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_knots(&self) -> usize {
        self.h.ncols()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn hth(&self) -> &DMatrix<f64> {
        &self.hth
    }

    pub fn rstar_chol(&self) -> &DMatrix<f64> {
        &self.rstar_chol
    }

    pub fn rstar_inv(&self) -> &DMatrix<f64> {
        &self.rstar_inv
    }

    pub fn params(&self) -> CovarianceParams {
        self.params
    }

    pub fn phi(&self) -> f64 {
        self.params.phi
    }

    /// Jitter actually applied, relative to σ².
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower factor of `C* = σ²(R* + jI)` for the given σ².
    pub fn knot_cov_chol(&self, sigma2: f64) -> DMatrix<f64> {
        &self.rstar_chol * sigma2.sqrt()
    }

    /// wᵀ(R* + jI)⁻¹w via a triangular solve.
    pub fn correlation_quadratic_form(&self, w: &[f64]) -> f64 {
        let v = DVector::from_column_slice(w);
        let l = self.rstar_chol.view((0, 0), (w.len(), w.len()));
        let y = l.solve_lower_triangular(&v).expect("factor has a positive diagonal");
        y.norm_squared()
    }

    /// H × knot_values.
    pub fn interpolate(&self, knot_values: &DVector<f64>) -> Result<DVector<f64>> {
        if knot_values.len() != self.n_knots() {
            return Err(invalid(format!(
                "expected {} knot values, got {}",
                self.n_knots(),
                knot_values.len()
            )));
        }
        Ok(&self.h * knot_values)
    }

    /// Interpolate several processes at once: `H · W` for an m×k matrix.
    pub fn interpolate_many(&self, knot_values: &DMatrix<f64>) -> DMatrix<f64> {
        &self.h * knot_values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn unit() -> Bounds {
        Bounds::new(0.0, 1.0, 0.0, 1.0)
    }

    #[test]
    fn kernel_values() {
        let p = CovarianceParams::new(1.0, 2.0).unwrap();
        assert_eq!(exp_cov(0.0, &p).unwrap(), 1.0);
        assert!((exp_cov(2.0, &p).unwrap() - 0.36787944117144233).abs() < 1e-15);
        let p2 = CovarianceParams::new(2.0, 2.0).unwrap();
        assert!((exp_cov(20.0, &p2).unwrap() - 2.0 * (-10.0f64).exp()).abs() < 1e-20);
        assert!(exp_cov(-1.0, &p).is_err());
        assert!(CovarianceParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn knot_grids() {
        let one = build_knot_grid(&unit(), (1, 1)).unwrap();
        assert_eq!(one.locations(), &[Location::new(0.5, 0.5)]);
        let four = build_knot_grid(&unit(), (2, 2)).unwrap();
        let want = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (k, (x, y)) in four.locations().iter().zip(want) {
            assert_eq!((k.x, k.y), (x, y));
        }
        let b = Bounds::new(-2.3e6, 2.1e6, -1.5e6, 1.6e6);
        let grid = build_knot_grid(&b, (12, 12)).unwrap();
        assert_eq!(grid.len(), 144);
        assert!(grid.locations().iter().all(|k| k.x > b.x_min && k.x < b.x_max && k.y > b.y_min && k.y < b.y_max));
        assert!(build_knot_grid(&Bounds::new(0.0, 0.0, 0.0, 1.0), (2, 2)).is_err());
        assert!(KnotSet::new(vec![Location::new(0.0, 0.0), Location::new(0.0, 0.0)]).is_err());
    }

    #[test]
    fn knots_reproduce_themselves() {
        let knots = build_knot_grid(&unit(), (3, 3)).unwrap();
        let p = CovarianceParams::new(1.7, 0.4).unwrap();
        let basis = PredictiveBasis::build(knots.locations(), &knots, p, DEFAULT_JITTER).unwrap();
        let eye = DMatrix::<f64>::identity(9, 9);
        assert!((basis.h() - eye).abs().max() < 1e-8);
        let v = DVector::from_fn(9, |i, _| (i as f64 * 0.7).sin() * 3.0);
        assert!((basis.interpolate(&v).unwrap() - &v).abs().max() < 1e-8);
        assert!(basis.interpolate(&DVector::zeros(9)).unwrap().iter().all(|&x| x == 0.0));
        assert!(basis.interpolate(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn single_knot_closed_form() {
        let knots = KnotSet::new(vec![Location::new(0.0, 0.0)]).unwrap();
        let p = CovarianceParams::new(3.0, 2.0).unwrap();
        let site = Location::new(3.0, 4.0);
        let jitter = 1e-3;
        let basis = PredictiveBasis::build(&[site], &knots, p, jitter).unwrap();
        // First solve gives c/(1+j); refinement adds c·j/(1+j)².
        let want = (-5.0f64 / 2.0).exp() * (1.0 + 2.0 * jitter) / (1.0 + jitter).powi(2);
        assert!((basis.h()[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn dense_solve_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let sites: Vec<_> = (0..20).map(|_| Location::new(rng.random(), rng.random())).collect();
        let knots = KnotSet::new((0..5).map(|_| Location::new(rng.random(), rng.random())).collect()).unwrap();
        let p = CovarianceParams::new(2.5, 0.3).unwrap();
        let jitter = 1e-8;
        let basis = PredictiveBasis::build(&sites, &knots, p, jitter).unwrap();
        let w = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
        // C* α = w̃ by LU on the exact kernel, then w(s) = c(s)ᵀ α.
        let k = knots.locations();
        let exact = DMatrix::from_fn(5, 5, |a, b| exp_cov(k[a].distance(&k[b]), &p).unwrap());
        let alpha = exact.clone().lu().solve(&w).unwrap();
        let mut cstar = exact;
        for a in 0..5 {
            cstar[(a, a)] += jitter * p.sigma2;
        }
        let got = basis.interpolate(&w).unwrap();
        for (i, s) in sites.iter().enumerate() {
            let want: f64 = (0..5).map(|a| exp_cov(s.distance(&k[a]), &p).unwrap() * alpha[a]).sum();
            assert!((got[i] - want).abs() < 1e-10);
        }
        // Naive triple-loop matrix product.
        for i in 0..20 {
            let mut acc = 0.0;
            for a in 0..5 {
                acc += basis.h()[(i, a)] * w[a];
            }
            assert!((got[i] - acc).abs() < 1e-12);
        }
        // Factor of C* reproduces C*.
        let l = basis.knot_cov_chol(p.sigma2);
        let rel = (&l * l.transpose() - &cstar).norm() / cstar.norm();
        assert!(rel < 1e-8);
    }

    #[test]
    fn jitter_escalates_for_coincident_knots() {
        // Nearly coincident knots: R* is numerically singular without jitter.
        let knots = KnotSet::new(vec![Location::new(0.0, 0.0), Location::new(1e-17, 0.0)]).unwrap();
        let p = CovarianceParams::new(1.0, 1.0).unwrap();
        let basis = PredictiveBasis::build(&[Location::new(0.5, 0.5)], &knots, p, 0.0).unwrap();
        assert!(basis.jitter() > 0.0 && basis.jitter() <= MAX_JITTER);
    }

    proptest! {
        #[test]
        fn basis_invariant_to_variance(scale in 1e-3..1e3f64, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sites: Vec<_> = (0..12).map(|_| Location::new(rng.random(), rng.random())).collect();
            let knots = build_knot_grid(&unit(), (2, 3)).unwrap();
            let a = PredictiveBasis::build(&sites, &knots, CovarianceParams::new(1.3, 0.5).unwrap(), DEFAULT_JITTER).unwrap();
            let b = PredictiveBasis::build(&sites, &knots, CovarianceParams::new(1.3 * scale, 0.5).unwrap(), DEFAULT_JITTER).unwrap();
            prop_assert_eq!(a.h(), b.h());
        }

        #[test]
        fn predictive_variance_never_exceeds_parent(x in -1.0..2.0f64, y in -1.0..2.0f64, phi in 0.05..3.0f64) {
            let knots = build_knot_grid(&unit(), (3, 3)).unwrap();
            let p = CovarianceParams::new(2.0, phi).unwrap();
            let s = Location::new(x, y);
            let basis = PredictiveBasis::build(&[s], &knots, p, DEFAULT_JITTER).unwrap();
            // c(s)ᵀC*⁻¹c(s) = σ² · h(s)ᵀ r(s)
            let r: Vec<f64> = knots.locations().iter().map(|k| (-s.distance(k) / phi).exp()).collect();
            let q: f64 = (0..9).map(|a| basis.h()[(0, a)] * r[a]).sum::<f64>() * p.sigma2;
            prop_assert!(q <= p.sigma2 * (1.0 + 1e-12));
        }

        #[test]
        fn kernel_monotone(d1 in 0.0..10.0f64, d2 in 0.0..10.0f64) {
            let p = CovarianceParams::new(1.5, 0.7).unwrap();
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(exp_cov(lo, &p).unwrap() >= exp_cov(hi, &p).unwrap());
        }
    }
}
