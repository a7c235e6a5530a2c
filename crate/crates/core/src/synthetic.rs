//! Forward simulation from the hierarchical model.
//!
//! [`simulate`] draws latents from fixed truth parameters; [`prior_predictive`]
//! also draws Σ_β and all variances from their priors. Both use the same
//! latent and emission code, keyed by counter-based streams.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gibbs::{rows8, vec8, Hyperparameters, ModelState};
use crate::harmonic::{build_design_matrix, CoefMatrix, CoefVector, DesignMatrix, HarmonicCoefficients, COEFS_PER_VARIABLE, STATE_DIM};
use crate::ingest::{center_by_year, Observations, RawPanel, Site, TemperatureDataset, YearInfo};
use crate::rng::{stream, Block, StreamRng};
use crate::spatial::{build_knot_grid, default_decay, Bounds, CovarianceParams, KnotSet, Location, PredictiveBasis, DEFAULT_JITTER};
use crate::stats::{sample_inverse_gamma, sample_inverse_wishart};

/// Truth parameters for [`simulate`]. Sites lie on an `nx × ny` lattice
/// with the given spacing; knots on an `mx × my` grid over its bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub grid: (usize, usize),
    pub spacing: f64,
    pub knots: (usize, usize),
    pub first_year: i32,
    /// Day count of each simulated year (T ≥ 8).
    pub days: Vec<usize>,
    /// Decay; defaults to a third of the site-domain diagonal.
    pub phi: Option<f64>,
    pub jitter: f64,
    #[serde(with = "rows8")]
    pub sigma_beta: CoefMatrix,
    pub sigma2_w: [f64; STATE_DIM],
    /// Error variance per variable, shared by all sites.
    pub sigma2_eps: [f64; 2],
    #[serde(with = "vec8")]
    pub mu0: CoefVector,
    #[serde(with = "rows8")]
    pub sigma0: CoefMatrix,
    pub seed: u64,
}

impl Default for TruthSpec {
    /// A 4×4 lattice, 2×2 knots, three 365-day years and a plausible annual
    /// cycle (tmin amplitude 10, tmax 12, coolest in mid-January).
    fn default() -> Self {
        Self {
            grid: (4, 4),
            spacing: 1.0,
            knots: (2, 2),
            first_year: 2001,
            days: vec![365; 3],
            phi: None,
            jitter: DEFAULT_JITTER,
            sigma_beta: CoefMatrix::identity() * 0.05,
            sigma2_w: [0.1; STATE_DIM],
            sigma2_eps: [4.0, 5.0],
            mu0: CoefVector::from_column_slice(&[-10.0, -2.0, 0.5, 0.3, -12.0, -2.5, 0.4, 0.2]),
            sigma0: CoefMatrix::identity() * 0.5,
            seed: 1,
        }
    }
}

/// Spatial layout shared by a simulation and its fit.
#[derive(Debug, Clone)]
pub struct Layout {
    pub sites: Vec<Site>,
    pub knots: KnotSet,
    pub basis: PredictiveBasis,
}

impl TruthSpec {
    pub fn validate(&self) -> Result<()> {
        let (nx, ny) = self.grid;
        if nx == 0 || ny == 0 || self.knots.0 == 0 || self.knots.1 == 0 {
            return Err(invalid("grid and knot counts must be positive"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(invalid("spacing must be positive"));
        }
        if self.days.is_empty() || self.days.iter().any(|&t| t < 8) {
            return Err(invalid("need at least one year, each with at least 8 days"));
        }
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !self.sigma2_w.iter().chain(self.sigma2_eps.iter()).all(|&v| nonneg(v)) {
            return Err(invalid("variances must be non-negative"));
        }
        if !self.mu0.iter().all(|v| v.is_finite()) {
            return Err(invalid("mu0 must be finite"));
        }
        for (name, m) in [("sigma_beta", &self.sigma_beta), ("sigma0", &self.sigma0)] {
            let e = SymmetricEigen::new(*m);
            if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) || e.eigenvalues.min() < -1e-12 * m.abs().max() {
                return Err(invalid(format!("{name} must be symmetric positive semi-definite")));
            }
        }
        if let Some(phi) = self.phi {
            CovarianceParams::new(1.0, phi)?;
        }
        Ok(())
    }

    pub fn years(&self) -> Vec<YearInfo> {
        self.days.iter().enumerate().map(|(i, &d)| YearInfo { label: self.first_year + i as i32, days: d }).collect()
    }

    pub fn layout(&self) -> Result<Layout> {
        let sites = lattice_sites(self.grid, self.spacing);
        let locations: Vec<Location> = sites.iter().map(|s| s.location).collect();
        let bounds = Bounds::enclosing(&locations)?;
        let knots = build_knot_grid(&bounds, self.knots)?;
        let phi = self.phi.unwrap_or_else(|| default_decay(&bounds));
        let basis = PredictiveBasis::build(&locations, &knots, CovarianceParams::new(1.0, phi)?, self.jitter)?;
        Ok(Layout { sites, knots, basis })
    }
}

/// Sites `r{row}c{col}` at `(col·spacing, row·spacing)`, x varying fastest.
pub fn lattice_sites(grid: (usize, usize), spacing: f64) -> Vec<Site> {
    let (nx, ny) = grid;
    (0..ny)
        .flat_map(|r| {
            (0..nx).map(move |c| Site { id: format!("r{r}c{c}"), location: Location::new(c as f64 * spacing, r as f64 * spacing), grid: Some((r, c)) })
        })
        .collect()
}

/// Factor `F` with `F Fᵀ = C` for symmetric PSD `C` (zero allowed).
fn psd_factor(c: &CoefMatrix) -> CoefMatrix {
    if let Some(ch) = c.cholesky() {
        return ch.l();
    }
    let e = SymmetricEigen::new(*c);
    let sqrt = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    e.eigenvectors * CoefMatrix::from_diagonal(&sqrt)
}

fn normal8(rng: &mut StreamRng) -> CoefVector {
    CoefVector::from_fn(|_, _| rng.sample(StandardNormal))
}

/// Latent draw given Σ_β, σ²_q, μ₀, Σ₀; σ²_ε is copied into the state.
fn draw_latents(
    basis: &PredictiveBasis,
    n_years: usize,
    sigma_beta: &CoefMatrix,
    sigma2_w: &[f64; STATE_DIM],
    sigma2_eps: &[f64],
    mu0: &CoefVector,
    sigma0: &CoefMatrix,
    seed: u64,
    replicate: u64,
) -> ModelState {
    let (n, m) = (basis.n_sites(), basis.n_knots());
    let mut state = ModelState::new(n, n_years, m);
    state.sigma_beta = *sigma_beta;
    state.sigma2_w = *sigma2_w;
    for (k, &v) in sigma2_eps.iter().enumerate() {
        state.set_sigma2_eps(k / n, k % n, v);
    }
    let l_knot = basis.rstar_chol();
    for l in 1..=n_years {
        let mut rng = stream(seed, replicate, Block::KnotProcess, l as u64);
        let mut wstar = DMatrix::zeros(m, STATE_DIM);
        for q in 0..STATE_DIM {
            let z = nalgebra::DVector::from_fn(m, |_, _| rng.sample(StandardNormal));
            wstar.set_column(q, &(l_knot * z * sigma2_w[q].sqrt()));
        }
        state.set_wstar(l, wstar, basis);
    }
    let f0 = psd_factor(sigma0);
    let fb = psd_factor(sigma_beta);
    for s in 0..n {
        let mut rng = stream(seed, replicate, Block::InitialCoefficients, s as u64);
        state.set_beta(0, s, mu0 + f0 * normal8(&mut rng));
        let mut rng = stream(seed, replicate, Block::Coefficients, s as u64);
        for l in 1..=n_years {
            let next = state.beta(l - 1, s) + state.w(l, s) + fb * normal8(&mut rng);
            state.set_beta(l, s, next);
        }
    }
    state
}

/// `z_jℓ(s) = X_ℓ β_jℓ(s) + ε` using the state's β and σ²_ε.
pub fn emit_observations(state: &ModelState, days: &[usize], seed: u64, replicate: u64) -> Result<Observations> {
    if days.len() != state.n_years() {
        return Err(invalid("day list does not match the number of years"));
    }
    let designs: Vec<DesignMatrix> = days.iter().map(|&t| build_design_matrix(t)).collect::<Result<_>>()?;
    let n = state.n_sites();
    let mut obs = Observations::zeros(n, days.to_vec());
    for j in 0..2 {
        for (l, x) in designs.iter().enumerate() {
            for s in 0..n {
                let b = state.beta(l + 1, s).fixed_rows::<4>(j * COEFS_PER_VARIABLE).into_owned();
                let c = HarmonicCoefficients::from_vector(&b);
                let sd = state.sigma2_eps(j, s).sqrt();
                let index = ((j * days.len() + l) * n + s) as u64;
                let mut rng = stream(seed, replicate, Block::Observations, index);
                for (t, v) in obs.series_mut(j, l, s).iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v = x.value(&c, t + 1) + sd * e;
                }
            }
        }
    }
    Ok(obs)
}

/// Latent values and the exact parameters used to produce a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub format: String,
    pub spec: TruthSpec,
    pub sites: Vec<Site>,
    pub knots: Vec<Location>,
    pub years: Vec<YearInfo>,
    pub phi: f64,
    /// `[site][ℓ = 0..=L][8]`.
    pub beta: Vec<Vec<Vec<f64>>>,
    /// `[ℓ = 1..=L][knot][8]`.
    pub wstar: Vec<Vec<Vec<f64>>>,
    /// `[j][s]`.
    pub sigma2_eps: Vec<Vec<f64>>,
}

pub const TRUTH_FORMAT: &str = "seasonal-dstm-truth/1";

impl TruthRecord {
    fn new(spec: &TruthSpec, layout: &Layout, state: &ModelState) -> Self {
        let n = state.n_sites();
        Self {
            format: TRUTH_FORMAT.into(),
            spec: spec.clone(),
            sites: layout.sites.clone(),
            knots: layout.knots.locations().to_vec(),
            years: spec.years(),
            phi: layout.basis.phi(),
            beta: (0..n).map(|s| state.beta_site(s).iter().map(|b| b.as_slice().to_vec()).collect()).collect(),
            wstar: (1..=state.n_years())
                .map(|l| {
                    let w = state.wstar(l);
                    (0..w.nrows()).map(|a| (0..STATE_DIM).map(|q| w[(a, q)]).collect()).collect()
                })
                .collect(),
            sigma2_eps: (0..2).map(|j| (0..n).map(|s| state.sigma2_eps(j, s)).collect()).collect(),
        }
    }

    /// β at slot ℓ (0 = β_0).
    pub fn beta(&self, slot: usize, site: usize) -> CoefVector {
        CoefVector::from_column_slice(&self.beta[site][slot])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_slice(&fs::read(path)?)?;
        if t.format != TRUTH_FORMAT {
            return Err(Error::Data(format!("unsupported truth format '{}'", t.format)));
        }
        Ok(t)
    }
}

pub struct Simulation {
    pub dataset: TemperatureDataset,
    pub truth: TruthRecord,
    pub state: ModelState,
    pub layout: Layout,
}

/// Draw latents from the truth parameters and emit a centered dataset.
pub fn simulate(spec: &TruthSpec) -> Result<Simulation> {
    spec.validate()?;
    let layout = spec.layout()?;
    let n = layout.sites.len();
    let eps: Vec<f64> = (0..2 * n).map(|k| spec.sigma2_eps[k / n]).collect();
    let state = draw_latents(&layout.basis, spec.days.len(), &spec.sigma_beta, &spec.sigma2_w, &eps, &spec.mu0, &spec.sigma0, spec.seed, 0);
    let obs = emit_observations(&state, &spec.days, spec.seed, 0)?;
    let dataset = center_unchecked(layout.sites.clone(), spec.years(), obs)?;
    Ok(Simulation { truth: TruthRecord::new(spec, &layout, &state), dataset, state, layout })
}

/// Center simulated series. Anomalies are not ordered, so the raw-panel
/// tmin ≤ tmax check does not apply.
pub fn center_unchecked(sites: Vec<Site>, years: Vec<YearInfo>, obs: Observations) -> Result<TemperatureDataset> {
    if sites.len() != obs.n_sites() || years.iter().map(|y| y.days).ne(obs.days().iter().copied()) {
        return Err(invalid("observation dimensions do not match site/year metadata"));
    }
    Ok(center_by_year(&RawPanel { sites, years, observations: obs }))
}

/// Parameters drawn from the priors, for the given basis and calendar.
pub fn prior_draw(basis: &PredictiveBasis, n_years: usize, hyp: &Hyperparameters, seed: u64, replicate: u64) -> Result<ModelState> {
    hyp.validate()?;
    if !(hyp.a > 1.0) || hyp.a_w.iter().any(|&a| !(a > 1.0)) {
        return Err(invalid("inverse-gamma shapes must exceed 1 for a finite prior mean"));
    }
    let mut rng = stream(seed, replicate, Block::Init, 0);
    let v = DMatrix::from_column_slice(STATE_DIM, STATE_DIM, hyp.v.as_slice());
    let sb = CoefMatrix::from_column_slice(sample_inverse_wishart(&v, hyp.xi, &mut rng)?.as_slice());
    let mut w = [0.0; STATE_DIM];
    for (q, slot) in w.iter_mut().enumerate() {
        *slot = sample_inverse_gamma(hyp.a_w[q], hyp.b_w[q], &mut rng)?;
    }
    let n = basis.n_sites();
    let eps: Vec<f64> = (0..2 * n).map(|_| sample_inverse_gamma(hyp.a, hyp.b, &mut rng)).collect::<Result<_>>()?;
    Ok(draw_latents(basis, n_years, &sb, &w, &eps, &hyp.mu0, &hyp.sigma0, seed, replicate))
}

/// One draw from the joint prior of parameters and data.
pub fn prior_predictive(basis: &PredictiveBasis, days: &[usize], hyp: &Hyperparameters, seed: u64, replicate: u64) -> Result<(ModelState, Observations)> {
    let state = prior_draw(basis, days.len(), hyp, seed, replicate)?;
    let obs = emit_observations(&state, days, seed, replicate)?;
    Ok((state, obs))
}
