//! Hierarchical model state and the Gibbs sampler.
//!
//! Model, for variable j, year ℓ = 1..L and site s:
//!
//! ```text
//! z_jℓ(s) = X_ℓ β_jℓ(s) + ε,            ε ~ N(0, σ²_ε,j(s) I)
//! β_ℓ(s)  = β_{ℓ−1}(s) + w_ℓ(s) + η,    η ~ N(0, Σ_β)
//! w_ℓ     = H W*_ℓ,                      W*_ℓ[:, q] ~ N(0, σ²_q R*)
//! β_0(s) ~ N(μ₀, Σ₀),  Σ_β ~ IW(V, ξ),  σ² ~ IG(a, b)
//! ```
//!
//! Coefficients are ordered `[a1 b1 a2 b2]` for tmin then tmax; process q
//! is coefficient q. Knot values `W*_ℓ` are m×8, so their column-major
//! vectorization is process-major.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, Error, Result};
use crate::harmonic::{build_design_matrix, CoefMatrix, CoefVector, DesignMatrix, COEFS_PER_VARIABLE, STATE_DIM};
use crate::ingest::Observations;
use crate::rng::{stream, Block, StreamRng};
use crate::spatial::PredictiveBasis;
use crate::stats::{sample_inverse_gamma, sample_inverse_wishart, CanonicalGaussian8};

/// Floor applied to initial error variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// 8×8 matrices serialize as a list of rows.
pub(crate) mod rows8 {
    use super::CoefMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &CoefMatrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| m[(i, j)]).collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CoefMatrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        if rows.len() != 8 || rows.iter().any(|r| r.len() != 8) {
            return Err(serde::de::Error::custom("expected an 8×8 matrix"));
        }
        Ok(CoefMatrix::from_fn(|i, j| rows[i][j]))
    }
}

pub(crate) mod vec8 {
    use super::CoefVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &CoefVector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CoefVector, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 8 {
            return Err(serde::de::Error::custom("expected 8 values"));
        }
        Ok(CoefVector::from_column_slice(&v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Inverse-Wishart scale for Σ_β.
    #[serde(with = "rows8")]
    pub v: CoefMatrix,
    /// Inverse-Wishart degrees of freedom.
    pub xi: f64,
    /// Inverse-gamma shape and rate for every σ²_ε.
    pub a: f64,
    pub b: f64,
    /// Inverse-gamma shape and rate for each knot-process variance σ²_q.
    pub a_w: [f64; STATE_DIM],
    pub b_w: [f64; STATE_DIM],
    #[serde(with = "vec8")]
    pub mu0: CoefVector,
    #[serde(with = "rows8")]
    pub sigma0: CoefMatrix,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            v: CoefMatrix::identity(),
            xi: 11.0,
            a: 2.0,
            b: 2.0,
            a_w: [2.0; STATE_DIM],
            b_w: [2.0; STATE_DIM],
            mu0: CoefVector::zeros(),
            sigma0: CoefMatrix::identity() * 100.0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let p = COEFS_PER_VARIABLE as f64;
        if !(self.xi > 2.0 * p + 1.0 && self.xi.is_finite()) {
            return Err(invalid(format!("xi must exceed {} for a finite prior mean of Sigma_beta, got {}", 2.0 * p + 1.0, self.xi)));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.a) || !positive(self.b) {
            return Err(invalid("error-variance prior a, b must be positive"));
        }
        if !self.a_w.iter().chain(self.b_w.iter()).all(|&x| positive(x)) {
            return Err(invalid("knot-variance prior a_w, b_w must be positive"));
        }
        if !self.mu0.iter().all(|x| x.is_finite()) {
            return Err(invalid("mu0 must be finite"));
        }
        for (name, m) in [("V", &self.v), ("Sigma0", &self.sigma0)] {
            if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max() || Cholesky::new(*m).is_none() {
                return Err(invalid(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Worker threads; never affects sampled values.
    #[serde(skip, default = "default_threads")]
    pub threads: usize,
}

fn default_threads() -> usize {
    1
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_iter: 5000, n_burn: 1000, thin: 1, seed: 1, threads: 1 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter < self.n_burn {
            return Err(invalid(format!("n_iter ({}) must be at least n_burn ({})", self.n_iter, self.n_burn)));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        if self.threads == 0 {
            return Err(invalid("threads must be at least 1"));
        }
        Ok(())
    }

    pub fn n_draws(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }

    /// Whether 1-based sweep `i` is retained.
    pub fn retains(&self, i: usize) -> bool {
        i > self.n_burn && (i - self.n_burn).is_multiple_of(self.thin)
    }
}

/// All latent quantities for one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    n_sites: usize,
    n_years: usize,
    n_knots: usize,
    /// `[site][ℓ]`, ℓ = 0..=L.
    beta: Vec<CoefVector>,
    /// `W*_ℓ` for ℓ = 1..=L at index ℓ − 1, each m×8.
    wstar: Vec<DMatrix<f64>>,
    /// `H W*_ℓ`, each n×8.
    w: Vec<DMatrix<f64>>,
    pub sigma_beta: CoefMatrix,
    /// `[j][s]`.
    sigma2_eps: Vec<f64>,
    pub sigma2_w: [f64; STATE_DIM],
}

impl ModelState {
    /// β = 0, W* = 0, Σ_β = I and unit variances.
    pub fn new(n_sites: usize, n_years: usize, n_knots: usize) -> Self {
        Self {
            n_sites,
            n_years,
            n_knots,
            beta: vec![CoefVector::zeros(); n_sites * (n_years + 1)],
            wstar: vec![DMatrix::zeros(n_knots, STATE_DIM); n_years],
            w: vec![DMatrix::zeros(n_sites, STATE_DIM); n_years],
            sigma_beta: CoefMatrix::identity(),
            sigma2_eps: vec![1.0; 2 * n_sites],
            sigma2_w: [1.0; STATE_DIM],
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    pub fn beta(&self, year: usize, site: usize) -> &CoefVector {
        &self.beta[site * (self.n_years + 1) + year]
    }

    pub fn set_beta(&mut self, year: usize, site: usize, value: CoefVector) {
        let k = site * (self.n_years + 1) + year;
        self.beta[k] = value;
    }

    /// β_0..β_L at one site.
    pub fn beta_site(&self, site: usize) -> &[CoefVector] {
        let k = site * (self.n_years + 1);
        &self.beta[k..k + self.n_years + 1]
    }

    pub fn wstar(&self, year: usize) -> &DMatrix<f64> {
        &self.wstar[year - 1]
    }

    /// Set `W*_ℓ` and refresh the interpolated field.
    pub fn set_wstar(&mut self, year: usize, value: DMatrix<f64>, basis: &PredictiveBasis) {
        assert_eq!(value.shape(), (self.n_knots, STATE_DIM));
        self.w[year - 1] = basis.h() * &value;
        self.wstar[year - 1] = value;
    }

    /// Interpolated increment `w_ℓ(s)`.
    pub fn w(&self, year: usize, site: usize) -> CoefVector {
        let m = &self.w[year - 1];
        CoefVector::from_fn(|q, _| m[(site, q)])
    }

    pub fn w_field(&self, year: usize) -> &DMatrix<f64> {
        &self.w[year - 1]
    }

    pub fn sigma2_eps(&self, var: usize, site: usize) -> f64 {
        self.sigma2_eps[var * self.n_sites + site]
    }

    pub fn set_sigma2_eps(&mut self, var: usize, site: usize, value: f64) {
        self.sigma2_eps[var * self.n_sites + site] = value;
    }

    pub fn sigma2_eps_all(&self) -> &[f64] {
        &self.sigma2_eps
    }

    /// Raw β storage, `[site][ℓ][8]`.
    pub fn beta_flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.beta.iter().flat_map(|b| b.iter().copied())
    }

    /// Check positivity and SPD constraints.
    pub fn validate(&self) -> Result<()> {
        if !self.sigma2_eps.iter().chain(self.sigma2_w.iter()).all(|&v| v > 0.0 && v.is_finite()) {
            return Err(numerical("variance component not strictly positive"));
        }
        if Cholesky::new(self.sigma_beta).is_none() {
            return Err(numerical("Sigma_beta not positive definite"));
        }
        if !self.beta.iter().all(|b| b.iter().all(|x| x.is_finite())) {
            return Err(numerical("non-finite coefficient"));
        }
        Ok(())
    }
}

fn at(sweep: u64, what: impl std::fmt::Display) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Numerical(m) => Error::Numerical(format!("sweep {sweep}, {what}: {m}")),
        other => other,
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn to_dmatrix(m: &CoefMatrix) -> DMatrix<f64> {
    DMatrix::from_column_slice(STATE_DIM, STATE_DIM, m.as_slice())
}

fn invert8(m: &CoefMatrix, what: &str) -> Result<CoefMatrix> {
    Cholesky::new(*m)
        .map(|c| c.inverse())
        .ok_or_else(|| numerical(format!("{what} not positive definite")))
}

/// Design matrices and Xᵀz for every (variable, year, site).
struct DataTerms {
    obs: Observations,
    designs: Vec<DesignMatrix>,
    gram: Vec<Matrix4<f64>>,
    /// `[j][ℓ][s]`, ℓ zero-based.
    xtz: Vec<Vector4<f64>>,
}

impl DataTerms {
    fn new(obs: Observations) -> Result<Self> {
        let mut designs: Vec<DesignMatrix> = Vec::with_capacity(obs.n_years());
        for &t in obs.days() {
            if t < 5 {
                return Err(invalid(format!("{t} days per year leaves the harmonic design rank deficient; need at least 5")));
            }
            match designs.iter().find(|d| d.period() == t) {
                Some(d) => designs.push(d.clone()),
                None => designs.push(build_design_matrix(t)?),
            }
        }
        let gram = designs.iter().map(|d| d.gram()).collect();
        let mut terms = Self { obs, designs, gram, xtz: Vec::new() };
        terms.refresh();
        Ok(terms)
    }

    fn refresh(&mut self) {
        let (n, ly) = (self.obs.n_sites(), self.obs.n_years());
        self.xtz = (0..2 * ly * n)
            .map(|k| {
                let (j, l, s) = (k / (ly * n), (k / n) % ly, k % n);
                self.designs[l].project(self.obs.series(j, l, s))
            })
            .collect();
    }

    fn xtz(&self, var: usize, year0: usize, site: usize) -> &Vector4<f64> {
        &self.xtz[(var * self.obs.n_years() + year0) * self.obs.n_sites() + site]
    }

    /// Σ_ℓ ‖z_jℓ(s) − X_ℓ β_jℓ(s)‖², summed directly over residuals.
    fn residual_ss(&self, state: &ModelState, var: usize, site: usize) -> f64 {
        let mut ss = 0.0;
        for l in 0..self.obs.n_years() {
            let b = state.beta(l + 1, site).fixed_rows::<4>(var * COEFS_PER_VARIABLE).into_owned();
            let x = self.designs[l].matrix();
            for (t, z) in self.obs.series(var, l, site).iter().enumerate() {
                let fit = x[(t, 0)] * b[0] + x[(t, 1)] * b[1] + x[(t, 2)] * b[2] + x[(t, 3)] * b[3];
                ss += (z - fit) * (z - fit);
            }
        }
        ss
    }
}

/// Gaussian conditional of all knot values, shared across years: only the
/// linear term depends on ℓ.
pub struct WstarConditional {
    precision_chol: Cholesky<f64, Dyn>,
    l_transpose: DMatrix<f64>,
}

impl WstarConditional {
    pub fn mean(&self, linear: &DVector<f64>) -> DVector<f64> {
        self.precision_chol.solve(linear)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.precision_chol.inverse()
    }

    fn sample(&self, linear: &DVector<f64>, rng: &mut StreamRng) -> DVector<f64> {
        let z = DVector::from_fn(linear.len(), |_, _| rng.sample(StandardNormal));
        let e = self.l_transpose.solve_upper_triangular(&z).expect("factor has a positive diagonal");
        self.mean(linear) + e
    }
}

/// Gibbs sampler over fixed data, basis and hyperparameters.
pub struct Sampler<'a> {
    basis: &'a PredictiveBasis,
    hyp: Hyperparameters,
    sigma0_inv: CoefMatrix,
    sigma0_inv_mu0: CoefVector,
    data: DataTerms,
    seed: u64,
    pool: rayon::ThreadPool,
}

impl<'a> Sampler<'a> {
    pub fn new(obs: Observations, basis: &'a PredictiveBasis, hyp: Hyperparameters, seed: u64, threads: usize) -> Result<Self> {
        hyp.validate()?;
        if obs.n_sites() != basis.n_sites() {
            return Err(invalid(format!("dataset has {} sites but the basis has {}", obs.n_sites(), basis.n_sites())));
        }
        if obs.n_years() == 0 {
            return Err(invalid("dataset has no years"));
        }
        if obs.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite observation".into()));
        }
        if threads == 0 {
            return Err(invalid("threads must be at least 1"));
        }
        let sigma0_inv = invert8(&hyp.sigma0, "Sigma0")?;
        let sigma0_inv_mu0 = sigma0_inv * hyp.mu0;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| invalid(format!("thread pool: {e}")))?;
        Ok(Self { basis, hyp, sigma0_inv, sigma0_inv_mu0, data: DataTerms::new(obs)?, seed, pool })
    }

    pub fn observations(&self) -> &Observations {
        &self.data.obs
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyp
    }

    /// Replace the data, keeping dimensions.
    pub fn set_observations(&mut self, obs: Observations) -> Result<()> {
        if obs.n_sites() != self.data.obs.n_sites() || obs.days() != self.data.obs.days() {
            return Err(invalid("replacement observations change dimensions"));
        }
        self.data.obs = obs;
        self.data.refresh();
        Ok(())
    }

    /// Least-squares start: β_ℓ(s) is the year-ℓ fit, β_0 = β_1, σ²_ε the
    /// residual mean square (floored), Σ_β = I, W* = 0, σ²_q = 1.
    pub fn init_state(&self) -> Result<ModelState> {
        let obs = &self.data.obs;
        let (n, ly) = (obs.n_sites(), obs.n_years());
        let mut state = ModelState::new(n, ly, self.basis.n_knots());
        let grams: Vec<_> = self
            .data
            .gram
            .iter()
            .map(|g| Cholesky::new(*g).ok_or_else(|| invalid("harmonic design is rank deficient")))
            .collect::<Result<_>>()?;
        for s in 0..n {
            for l in 0..ly {
                let mut b = CoefVector::zeros();
                for j in 0..2 {
                    let fit = grams[l].solve(self.data.xtz(j, l, s));
                    b.fixed_rows_mut::<4>(j * COEFS_PER_VARIABLE).copy_from(&fit);
                }
                state.set_beta(l + 1, s, b);
            }
            let first = *state.beta(1, s);
            state.set_beta(0, s, first);
        }
        let total = obs.total_days() as f64;
        for j in 0..2 {
            for s in 0..n {
                let v = self.data.residual_ss(&state, j, s) / total;
                state.set_sigma2_eps(j, s, v.max(VARIANCE_FLOOR));
            }
        }
        Ok(state)
    }

    fn rng(&self, sweep: u64, block: Block, index: usize) -> StreamRng {
        stream(self.seed, sweep, block, index as u64)
    }

    /// Knot-value precision `Σ_β⁻¹ ⊗ HᵀH + blockdiag(R*⁻¹/σ²_q)`.
    pub fn wstar_precision(&self, state: &ModelState) -> Result<DMatrix<f64>> {
        let p = invert8(&state.sigma_beta, "Sigma_beta")?;
        let m = self.basis.n_knots();
        let hth = self.basis.hth();
        let rinv = self.basis.rstar_inv();
        let mut v = DMatrix::zeros(STATE_DIM * m, STATE_DIM * m);
        for q in 0..STATE_DIM {
            for r in 0..STATE_DIM {
                let mut block = v.view_mut((q * m, r * m), (m, m));
                block.copy_from(&(hth * p[(q, r)]));
                if q == r {
                    block += rinv / state.sigma2_w[q];
                }
            }
        }
        Ok(v)
    }

    /// Linear term `vec(Hᵀ D_ℓ Σ_β⁻¹)` with `D_ℓ[s, :] = β_ℓ(s) − β_{ℓ−1}(s)`.
    pub fn wstar_linear(&self, state: &ModelState, year: usize) -> Result<DVector<f64>> {
        let p = to_dmatrix(&invert8(&state.sigma_beta, "Sigma_beta")?);
        let n = state.n_sites();
        let d = DMatrix::from_fn(n, STATE_DIM, |s, q| state.beta(year, s)[q] - state.beta(year - 1, s)[q]);
        let a = self.basis.h().tr_mul(&d) * p;
        Ok(DVector::from_column_slice(a.as_slice()))
    }

    pub fn wstar_conditional(&self, state: &ModelState) -> Result<WstarConditional> {
        let chol = Cholesky::new(self.wstar_precision(state)?).ok_or_else(|| numerical("knot-value precision not positive definite"))?;
        let l_transpose = chol.l().transpose();
        Ok(WstarConditional { precision_chol: chol, l_transpose })
    }

    /// Draw `W*_ℓ` for every year.
    pub fn update_wstar(&self, state: &mut ModelState, sweep: u64) -> Result<()> {
        let cond = self.wstar_conditional(state).map_err(at(sweep, "knot values"))?;
        let m = self.basis.n_knots();
        let draws: Vec<Result<DMatrix<f64>>> = self.pool.install(|| {
            (1..=state.n_years())
                .into_par_iter()
                .map(|l| {
                    let a = self.wstar_linear(state, l).map_err(at(sweep, format!("knot values year {l}")))?;
                    let x = cond.sample(&a, &mut self.rng(sweep, Block::KnotProcess, l));
                    Ok(DMatrix::from_column_slice(m, STATE_DIM, x.as_slice()))
                })
                .collect()
        });
        for (l, w) in first_error(draws)?.into_iter().enumerate() {
            state.set_wstar(l + 1, w, self.basis);
        }
        Ok(())
    }

    /// Inverse-gamma (shape, rate) for σ²_q.
    pub fn sigma2_w_params(&self, state: &ModelState, process: usize) -> Result<(f64, f64)> {
        let (ly, m) = (state.n_years() as f64, self.basis.n_knots() as f64);
        let mut quad = 0.0;
        for l in 1..=state.n_years() {
            quad += self.basis.correlation_quadratic_form(state.wstar(l).column(process).as_slice());
        }
        if !(quad >= 0.0 && quad.is_finite()) {
            return Err(numerical(format!("knot quadratic form {quad} for process {process}")));
        }
        Ok((ly * m / 2.0 + self.hyp.a_w[process], self.hyp.b_w[process] + quad / 2.0))
    }

    pub fn update_sigma2_w(&self, state: &mut ModelState, sweep: u64) -> Result<()> {
        for q in 0..STATE_DIM {
            let (shape, rate) = self.sigma2_w_params(state, q).map_err(at(sweep, format!("sigma2_w[{q}]")))?;
            let mut rng = self.rng(sweep, Block::SpatialVariance, q);
            state.sigma2_w[q] = sample_inverse_gamma(shape, rate, &mut rng).map_err(at(sweep, format!("sigma2_w[{q}]")))?;
        }
        Ok(())
    }

    /// Canonical (precision, linear) pair for β_0(s).
    pub fn beta0_conditional(&self, state: &ModelState, p: &CoefMatrix, site: usize) -> (CoefMatrix, CoefVector) {
        let prec = p + self.sigma0_inv;
        let lin = p * (state.beta(1, site) - state.w(1, site)) + self.sigma0_inv_mu0;
        (prec, lin)
    }

    /// Canonical (precision, linear) pair for β_ℓ(s), 1 ≤ ℓ ≤ L.
    pub fn beta_conditional(&self, state: &ModelState, p: &CoefMatrix, year: usize, site: usize) -> (CoefMatrix, CoefVector) {
        beta_conditional_parts(&self.data, state, p, year, site, |l| *state.beta(l, site), |l| state.w(l, site))
    }

    /// Draw β_0(s), then β_1(s), …, β_L(s), for every site.
    pub fn update_beta(&self, state: &mut ModelState, sweep: u64) -> Result<()> {
        let p = invert8(&state.sigma_beta, "Sigma_beta").map_err(at(sweep, "coefficients"))?;
        let ly = state.n_years();
        let mut beta = std::mem::take(&mut state.beta);
        let frozen = &*state;
        let results: Vec<Result<()>> = self.pool.install(|| {
            beta.par_chunks_mut(ly + 1)
                .enumerate()
                .map(|(s, chain)| {
                    let prec = p + self.sigma0_inv;
                    let lin = p * (chain[1] - frozen.w(1, s)) + self.sigma0_inv_mu0;
                    let g = CanonicalGaussian8::new(prec, lin, "precision").map_err(at(sweep, format!("beta0[site {s}]")))?;
                    chain[0] = g.sample(&mut self.rng(sweep, Block::InitialCoefficients, s));
                    let mut rng = self.rng(sweep, Block::Coefficients, s);
                    for l in 1..=ly {
                        let (prec, lin) = beta_conditional_parts(&self.data, frozen, &p, l, s, |k| chain[k], |k| frozen.w(k, s));
                        let g = CanonicalGaussian8::new(prec, lin, "precision").map_err(at(sweep, format!("beta[site {s}, year {l}]")))?;
                        chain[l] = g.sample(&mut rng);
                    }
                    Ok(())
                })
                .collect()
        });
        state.beta = beta;
        first_error(results).map(|_| ())
    }

    /// Inverse-Wishart scale `V + Σ r rᵀ`, r = β_ℓ − β_{ℓ−1} − w_ℓ.
    pub fn sigma_beta_scale(&self, state: &ModelState) -> CoefMatrix {
        let mut lambda = self.hyp.v;
        for s in 0..state.n_sites() {
            for l in 1..=state.n_years() {
                let r = state.beta(l, s) - state.beta(l - 1, s) - state.w(l, s);
                lambda += r * r.transpose();
            }
        }
        lambda
    }

    pub fn sigma_beta_df(&self, state: &ModelState) -> f64 {
        (state.n_sites() * state.n_years()) as f64 + self.hyp.xi
    }

    pub fn update_sigma_beta(&self, state: &mut ModelState, sweep: u64) -> Result<()> {
        let lambda = to_dmatrix(&self.sigma_beta_scale(state));
        let mut rng = self.rng(sweep, Block::CoefficientCovariance, 0);
        let draw = sample_inverse_wishart(&lambda, self.sigma_beta_df(state), &mut rng).map_err(at(sweep, "Sigma_beta"))?;
        let sigma = CoefMatrix::from_column_slice(draw.as_slice());
        if Cholesky::new(sigma).is_none() {
            return Err(numerical(format!("sweep {sweep}, Sigma_beta: draw not positive definite")));
        }
        state.sigma_beta = sigma;
        Ok(())
    }

    /// Inverse-gamma (shape, rate) for σ²_ε,j(s).
    pub fn sigma2_eps_params(&self, state: &ModelState, var: usize, site: usize) -> (f64, f64) {
        let total = self.data.obs.total_days() as f64;
        (total / 2.0 + self.hyp.a, self.hyp.b + self.data.residual_ss(state, var, site) / 2.0)
    }

    pub fn update_sigma2_eps(&self, state: &mut ModelState, sweep: u64) -> Result<()> {
        let n = state.n_sites();
        let frozen = &*state;
        let draws: Vec<Result<f64>> = self.pool.install(|| {
            (0..2 * n)
                .into_par_iter()
                .map(|k| {
                    let (j, s) = (k / n, k % n);
                    let (shape, rate) = self.sigma2_eps_params(frozen, j, s);
                    let mut rng = self.rng(sweep, Block::ErrorVariance, k);
                    sample_inverse_gamma(shape, rate, &mut rng).map_err(at(sweep, format!("sigma2_eps[var {j}, site {s}]")))
                })
                .collect()
        });
        for (k, v) in first_error(draws)?.into_iter().enumerate() {
            state.sigma2_eps[k] = v;
        }
        Ok(())
    }

    /// One full sweep; `sweep` is 1-based and keys the random streams.
    pub fn sweep(&self, state: &mut ModelState, sweep: u64) -> Result<()> {
        self.update_wstar(state, sweep)?;
        self.update_sigma2_w(state, sweep)?;
        self.update_beta(state, sweep)?;
        self.update_sigma_beta(state, sweep)?;
        self.update_sigma2_eps(state, sweep)?;
        Ok(())
    }
}

fn beta_conditional_parts(
    data: &DataTerms,
    state: &ModelState,
    p: &CoefMatrix,
    year: usize,
    site: usize,
    beta: impl Fn(usize) -> CoefVector,
    w: impl Fn(usize) -> CoefVector,
) -> (CoefMatrix, CoefVector) {
    let ly = state.n_years();
    let mut prec = *p;
    let mut lin = p * (beta(year - 1) + w(year));
    if year < ly {
        prec += p;
        lin += p * (beta(year + 1) - w(year + 1));
    }
    let gram = &data.gram[year - 1];
    for j in 0..2 {
        let inv = 1.0 / state.sigma2_eps(j, site);
        let o = j * COEFS_PER_VARIABLE;
        let mut block = prec.fixed_view_mut::<4, 4>(o, o);
        block += gram * inv;
        let mut lb = lin.fixed_rows_mut::<4>(o);
        lb += data.xtz(j, year - 1, site) * inv;
    }
    (prec, lin)
}

/// Receives the state after every sweep and every retained draw.
pub trait DrawSink {
    fn record_trace(&mut self, _sweep: usize, _state: &ModelState) -> Result<()> {
        Ok(())
    }

    fn record_draw(&mut self, sweep: usize, state: &ModelState) -> Result<()>;
}

/// Run `config.n_iter` sweeps from the least-squares start, passing every
/// retained state to `sink`. Returns the final state.
pub fn run_sampler(obs: &Observations, basis: &PredictiveBasis, hyp: &Hyperparameters, config: &SamplerConfig, sink: &mut dyn DrawSink) -> Result<ModelState> {
    config.validate()?;
    let sampler = Sampler::new(obs.clone(), basis, hyp.clone(), config.seed, config.threads)?;
    let mut state = sampler.init_state()?;
    for i in 1..=config.n_iter {
        sampler.sweep(&mut state, i as u64)?;
        sink.record_trace(i, &state)?;
        if config.retains(i) {
            sink.record_draw(i, &state)?;
        }
    }
    Ok(state)
}
