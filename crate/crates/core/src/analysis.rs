//! Inferential products derived from posterior draws or raw panels.
//!
//! Posterior quantities are computed per draw and summarized afterwards
//! (composition sampling): a site's peak-day shift is the distribution over
//! draws of the per-draw shift, never the shift of posterior-mean
//! coefficients.

use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::draws::PosteriorDraws;
use crate::error::{invalid, Error, Result};
use crate::harmonic::{
    build_design_matrix, circular_mean_day, to_amplitude_phase, wrap_angle, wrap_day_difference, AmplitudePhase, Components,
    DesignMatrix, Extremum, Harmonic, HarmonicCoefficients, Variable,
};
use crate::ingest::{Observations, RawPanel, Site, YearInfo};
use crate::stats::{mean, summarize, welch_t_test, WelchTest};

pub const GRID_FORMAT: &str = "seasonal-dstm-grid/1";

/// Equal-tailed credible level of every posterior summary.
pub const CREDIBLE_LEVEL: f64 = 0.95;

/// Two disjoint, strictly increasing sets of year labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodSpec {
    pub first: Vec<i32>,
    pub second: Vec<i32>,
}

impl PeriodSpec {
    pub fn new(first: Vec<i32>, second: Vec<i32>) -> Result<Self> {
        let p = Self { first, second };
        p.validate()?;
        Ok(p)
    }

    /// Inclusive year ranges, e.g. `1979..=1988` and `2009..=2018`.
    pub fn ranges(first: std::ops::RangeInclusive<i32>, second: std::ops::RangeInclusive<i32>) -> Result<Self> {
        Self::new(first.collect(), second.collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, set) in [("first", &self.first), ("second", &self.second)] {
            if set.is_empty() {
                return Err(invalid(format!("{name} period is empty")));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid(format!("{name} period years must be strictly increasing")));
            }
        }
        if let Some(y) = self.first.iter().find(|y| self.second.contains(y)) {
            return Err(invalid(format!("periods overlap in year {y}")));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self { first: self.second.clone(), second: self.first.clone() }
    }

    /// Zero-based indices of both periods into `years`.
    pub fn indices(&self, years: &[YearInfo]) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        Ok((year_indices(&self.first, years)?, year_indices(&self.second, years)?))
    }
}

fn year_indices(labels: &[i32], years: &[YearInfo]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| years.iter().position(|info| info.label == y).ok_or_else(|| invalid(format!("year {y} is not in the fitted years"))))
        .collect()
}

/// One site's summary. For a degenerate site the numeric fields are NaN
/// and `significant` is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site_id: String,
    pub x: f64,
    pub y: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// Zero-exclusion rule: significant iff the interval lies strictly on one side of 0.
pub fn is_significant(lower: f64, upper: f64) -> bool {
    lower > 0.0 || upper < 0.0
}

impl SiteSummary {
    fn new(site: &Site, mean: f64, lower: f64, upper: f64) -> Self {
        Self {
            site_id: site.id.clone(),
            x: site.location.x,
            y: site.location.y,
            mean,
            lower,
            upper,
            significant: is_significant(lower, upper),
            degenerate: false,
        }
    }

    fn degenerate(site: &Site) -> Self {
        Self { degenerate: true, significant: false, ..Self::new(site, f64::NAN, f64::NAN, f64::NAN) }
    }

    fn from_values(site: &Site, values: &[f64]) -> Self {
        let (m, lo, hi) = summarize(values, CREDIBLE_LEVEL);
        Self::new(site, m, lo, hi)
    }
}

/// Where a grid's values came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Posterior { n_draws: usize, first_sweep: Option<usize>, last_sweep: Option<usize>, seed: u64 },
    LeastSquares { n_years: usize },
}

impl Provenance {
    pub fn of_draws(draws: &PosteriorDraws) -> Self {
        Provenance::Posterior {
            n_draws: draws.n_draws(),
            first_sweep: draws.meta.sweeps.first().copied(),
            last_sweep: draws.meta.sweeps.last().copied(),
            seed: draws.meta.sampler.seed,
        }
    }
}

/// Per-site summaries of one scalar quantity plus the descriptors written to
/// the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGrid {
    pub format: String,
    pub quantity: String,
    pub units: String,
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<Variable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Extremum>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Components>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<PeriodSpec>,
    pub provenance: Provenance,
    pub degenerate_sites: Vec<String>,
    #[serde(skip)]
    pub records: Vec<SiteSummary>,
}

const CSV_HEADER: [&str; 7] = ["site_id", "x", "y", "mean", "lower", "upper", "significant"];

impl SummaryGrid {
    fn new(quantity: impl Into<String>, units: impl Into<String>, provenance: Provenance, records: Vec<SiteSummary>) -> Self {
        let degenerate_sites = records.iter().filter(|r| r.degenerate).map(|r| r.site_id.clone()).collect();
        Self {
            format: GRID_FORMAT.into(),
            quantity: quantity.into(),
            units: units.into(),
            level: CREDIBLE_LEVEL,
            variable: None,
            mode: None,
            components: None,
            year: None,
            periods: None,
            provenance,
            degenerate_sites,
            records,
        }
    }

    pub fn significant_fraction(&self) -> f64 {
        let valid: Vec<&SiteSummary> = self.records.iter().filter(|r| !r.degenerate).collect();
        if valid.is_empty() {
            return 0.0;
        }
        valid.iter().filter(|r| r.significant).count() as f64 / valid.len() as f64
    }

    pub fn means(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean).collect()
    }

    /// Write `{stem}.csv` and the `{stem}.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.site_id.clone(),
                r.x.to_string(),
                r.y.to_string(),
                r.mean.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
                r.significant.to_string(),
            ])?;
        }
        w.flush()?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Read a grid written by [`SummaryGrid::write`].
    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let mut grid: Self = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
        if grid.format != GRID_FORMAT {
            return Err(Error::Data(format!("unsupported grid format '{}'", grid.format)));
        }
        let mut rdr = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
        if rdr.headers()?.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Data(format!("{stem}.csv: unexpected header")));
        }
        for row in rdr.records() {
            let row = row?;
            let num = |i: usize| -> Result<f64> { row[i].parse().map_err(|_| Error::Data(format!("{stem}.csv: bad number '{}'", &row[i]))) };
            let site_id = row[0].to_string();
            let degenerate = grid.degenerate_sites.contains(&site_id);
            grid.records.push(SiteSummary {
                site_id,
                x: num(1)?,
                y: num(2)?,
                mean: num(3)?,
                lower: num(4)?,
                upper: num(5)?,
                significant: row[6] == *"true",
                degenerate,
            });
        }
        Ok(grid)
    }
}

fn check_draws(draws: &PosteriorDraws) -> Result<()> {
    if draws.n_draws() == 0 {
        return Err(invalid("no posterior draws to summarize"));
    }
    Ok(())
}

fn designs(years: &[YearInfo]) -> Result<Vec<DesignMatrix>> {
    years.iter().map(|y| build_design_matrix(y.days)).collect()
}

/// Period of the circular day arithmetic: the shortest fitted year, so 365
/// for calendar data with leap years.
pub fn reference_period(years: &[YearInfo]) -> f64 {
    years.iter().map(|y| y.days).min().unwrap_or(365) as f64
}

/// Posterior draws of amplitude and phase, `[site][draw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicField {
    pub year: i32,
    pub variable: Variable,
    pub harmonic: Harmonic,
    pub amplitude: Vec<Vec<f64>>,
    pub phase: Vec<Vec<f64>>,
}

/// Amplitude/phase of harmonic `h` for fitted year index `year` (zero-based).
pub fn harmonic_field(draws: &PosteriorDraws, year: usize, var: Variable, h: Harmonic) -> Result<HarmonicField> {
    if year >= draws.n_years() {
        return Err(invalid(format!("year index {year} out of range (fitted years: {})", draws.n_years())));
    }
    let per_site: Vec<(Vec<f64>, Vec<f64>)> = (0..draws.n_sites())
        .into_par_iter()
        .map(|s| -> Result<_> {
            let aps: Vec<AmplitudePhase> = (0..draws.n_draws())
                .map(|d| to_amplitude_phase(&HarmonicCoefficients::of(&draws.beta_year(d, year, s), var), h))
                .collect::<Result<_>>()?;
            Ok((aps.iter().map(|ap| ap.amplitude).collect(), aps.iter().map(|ap| ap.phase).collect()))
        })
        .collect::<Result<_>>()?;
    let (amplitude, phase) = per_site.into_iter().unzip();
    Ok(HarmonicField { year: draws.meta.years[year].label, variable: var, harmonic: h, amplitude, phase })
}

/// Circular summary of angles: interval endpoints are the circular mean plus
/// the equal-tailed quantiles of the wrapped deviations; reported values may
/// leave (−π, π] so that lower ≤ mean ≤ upper is preserved across the cut.
pub fn summarize_angles(values: &[f64], level: f64) -> (f64, f64, f64) {
    let (s, c) = values.iter().fold((0.0, 0.0), |(s, c), &a| (s + a.sin(), c + a.cos()));
    let center = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
    let dev: Vec<f64> = values.iter().map(|&a| wrap_angle(a - center)).collect();
    let (m, lo, hi) = summarize(&dev, level);
    (center + m, center + lo, center + hi)
}

impl HarmonicField {
    fn grid(&self, quantity: &str, units: &str, draws: &PosteriorDraws, records: Vec<SiteSummary>) -> SummaryGrid {
        let mut g = SummaryGrid::new(format!("{quantity}{}", self.harmonic.order()), units, Provenance::of_draws(draws), records);
        g.variable = Some(self.variable);
        g.year = Some(self.year);
        g
    }

    pub fn amplitude_grid(&self, draws: &PosteriorDraws) -> SummaryGrid {
        let records = draws.meta.sites.iter().zip(&self.amplitude).map(|(site, v)| SiteSummary::from_values(site, v)).collect();
        self.grid("amplitude", "deg C", draws, records)
    }

    pub fn phase_grid(&self, draws: &PosteriorDraws) -> SummaryGrid {
        let records = draws
            .meta
            .sites
            .iter()
            .zip(&self.phase)
            .map(|(site, v)| {
                let (m, lo, hi) = summarize_angles(v, CREDIBLE_LEVEL);
                SiteSummary::new(site, m, lo, hi)
            })
            .collect();
        self.grid("phase", "rad", draws, records)
    }
}

/// Per-draw circular mean extremum day over the given years at one site.
fn mean_extremum_day(
    draws: &PosteriorDraws,
    designs: &[DesignMatrix],
    years: &[usize],
    draw: usize,
    site: usize,
    var: Variable,
    mode: Extremum,
    components: Components,
    period: f64,
) -> Result<f64> {
    let days: Vec<f64> = years
        .iter()
        .map(|&l| {
            let c = HarmonicCoefficients::of(&draws.beta_year(draw, l, site), var);
            designs[l].extremum_day(&c, mode, components).map(|d| d as f64)
        })
        .collect::<Result<_>>()?;
    Ok(circular_mean_day(&days, period))
}

/// Per-site, per-draw shift of the mean extremum day (period 2 − period 1),
/// wrapped to [−T/2, T/2]. `None` marks a site with a degenerate cycle in
/// some draw.
fn shift_draws(draws: &PosteriorDraws, var: Variable, mode: Extremum, periods: &PeriodSpec, components: Components) -> Result<Vec<Option<Vec<f64>>>> {
    check_draws(draws)?;
    let (first, second) = periods.indices(&draws.meta.years)?;
    let designs = designs(&draws.meta.years)?;
    let period = reference_period(&draws.meta.years);
    (0..draws.n_sites())
        .into_par_iter()
        .map(|s| {
            let shifts: Result<Vec<f64>> = (0..draws.n_draws())
                .map(|d| {
                    let m1 = mean_extremum_day(draws, &designs, &first, d, s, var, mode, components, period)?;
                    let m2 = mean_extremum_day(draws, &designs, &second, d, s, var, mode, components, period)?;
                    Ok(wrap_day_difference(m2 - m1, period))
                })
                .collect();
            match shifts {
                Ok(v) => Ok(Some(v)),
                Err(Error::DegenerateCycle) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

fn shift_grid(
    draws: &PosteriorDraws,
    quantity: &str,
    values: Vec<Option<Vec<f64>>>,
    var: Variable,
    mode: Extremum,
    components: Option<Components>,
    periods: &PeriodSpec,
) -> SummaryGrid {
    let records = draws
        .meta
        .sites
        .iter()
        .zip(&values)
        .map(|(site, v)| match v {
            Some(v) => SiteSummary::from_values(site, v),
            None => SiteSummary::degenerate(site),
        })
        .collect();
    let mut g = SummaryGrid::new(quantity, "days", Provenance::of_draws(draws), records);
    g.variable = Some(var);
    g.mode = Some(mode);
    g.components = components;
    g.periods = Some(periods.clone());
    g
}

/// Posterior of the shift in mean peak or trough day between two periods.
/// Earlier timing in the second period is negative.
pub fn decadal_shift(draws: &PosteriorDraws, var: Variable, mode: Extremum, periods: &PeriodSpec, components: Components) -> Result<SummaryGrid> {
    let values = shift_draws(draws, var, mode, periods, components)?;
    Ok(shift_grid(draws, &format!("{}_shift", mode.name()), values, var, mode, Some(components), periods))
}

/// Posterior of (shift with both harmonics) − (shift with the annual
/// harmonic alone): the part of the timing change carried by the
/// semi-annual harmonic.
pub fn semiannual_contribution(draws: &PosteriorDraws, var: Variable, mode: Extremum, periods: &PeriodSpec) -> Result<SummaryGrid> {
    let both = shift_draws(draws, var, mode, periods, Components::Both)?;
    let annual = shift_draws(draws, var, mode, periods, Components::AnnualOnly)?;
    let period = reference_period(&draws.meta.years);
    let values = both
        .into_iter()
        .zip(annual)
        .map(|(b, a)| match (b, a) {
            (Some(b), Some(a)) => Some(b.iter().zip(&a).map(|(x, y)| wrap_day_difference(x - y, period)).collect()),
            _ => None,
        })
        .collect();
    Ok(shift_grid(draws, &format!("{}_semiannual_contribution", mode.name()), values, var, mode, None, periods))
}

/// Ordinary least squares of one year's series on `[1, ρ₁, ψ₁, ρ₂, ψ₂]`.
#[derive(Debug, Clone)]
pub struct InterceptFit {
    design: DesignMatrix,
    chol: nalgebra::Cholesky<f64, nalgebra::Const<5>>,
}

impl InterceptFit {
    pub fn new(period: usize) -> Result<Self> {
        let design = build_design_matrix(period)?;
        let mut gram = SMatrix::<f64, 5, 5>::zeros();
        for t in 1..=period {
            let row = Self::row(&design, t);
            gram += row * row.transpose();
        }
        let chol = gram.cholesky().ok_or_else(|| invalid(format!("intercept design for T = {period} is rank deficient")))?;
        Ok(Self { design, chol })
    }

    fn row(design: &DesignMatrix, t: usize) -> SVector<f64, 5> {
        let r = design.row(t);
        SVector::<f64, 5>::new(1.0, r[0], r[1], r[2], r[3])
    }

    /// Harmonic coefficients; the intercept is estimated and dropped.
    pub fn fit(&self, z: &[f64]) -> HarmonicCoefficients {
        let mut rhs = SVector::<f64, 5>::zeros();
        for (i, &v) in z.iter().enumerate() {
            rhs += Self::row(&self.design, i + 1) * v;
        }
        let b = self.chol.solve(&rhs);
        HarmonicCoefficients::new(b[1], b[2], b[3], b[4])
    }
}

/// Least-squares coefficients `[site][year]` for one variable.
pub fn site_year_fits(obs: &Observations, var: Variable) -> Result<Vec<Vec<HarmonicCoefficients>>> {
    let fits: Vec<InterceptFit> = obs.days().iter().map(|&t| InterceptFit::new(t)).collect::<Result<_>>()?;
    Ok((0..obs.n_sites())
        .into_par_iter()
        .map(|s| fits.iter().enumerate().map(|(l, f)| f.fit(obs.series(var.index(), l, s))).collect())
        .collect())
}

/// Quantities screened by [`exploratory_tstats`], in output order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreenQuantity {
    Amplitude(Harmonic),
    Phase(Harmonic),
}

impl ScreenQuantity {
    pub const ALL: [ScreenQuantity; 4] = [
        ScreenQuantity::Amplitude(Harmonic::Annual),
        ScreenQuantity::Phase(Harmonic::Annual),
        ScreenQuantity::Amplitude(Harmonic::SemiAnnual),
        ScreenQuantity::Phase(Harmonic::SemiAnnual),
    ];

    pub fn label(self) -> String {
        match self {
            ScreenQuantity::Amplitude(h) => format!("amplitude{}", h.order()),
            ScreenQuantity::Phase(h) => format!("phase{}", h.order()),
        }
    }
}

/// One variable's screen: a t-statistic grid per quantity and the underlying tests `[site]`.
#[derive(Debug, Clone)]
pub struct ScreenResult {
    pub variable: Variable,
    pub quantity: ScreenQuantity,
    pub grid: SummaryGrid,
    pub tests: Vec<Option<WelchTest>>,
}

/// Welch two-sample t-statistics (period 2 − period 1) of per-year
/// least-squares amplitudes and phases, for both variables. Phases are
/// wrapped around their pooled circular mean before testing.
///
/// Grid records hold `t` as the mean and `t ∓ t_crit` as the interval, so
/// the significance flag is the two-sided 5% test.
pub fn exploratory_tstats(panel: &RawPanel, periods: &PeriodSpec) -> Result<Vec<ScreenResult>> {
    let (first, second) = periods.indices(&panel.years)?;
    let mut out = exploratory_tstats_years(panel, &first, &second)?;
    for r in &mut out {
        r.grid.periods = Some(periods.clone());
    }
    Ok(out)
}

/// [`exploratory_tstats`] on explicit zero-based year indices; the two sets
/// may overlap.
pub fn exploratory_tstats_years(panel: &RawPanel, first: &[usize], second: &[usize]) -> Result<Vec<ScreenResult>> {
    if first.len() < 2 || second.len() < 2 {
        return Err(invalid("each period needs at least two years"));
    }
    if let Some(&l) = first.iter().chain(second).find(|&&l| l >= panel.years.len()) {
        return Err(invalid(format!("year index {l} out of range")));
    }
    let mut out = Vec::new();
    for var in Variable::ALL {
        let fits = site_year_fits(&panel.observations, var)?;
        for q in ScreenQuantity::ALL {
            let tests: Vec<Option<WelchTest>> = fits
                .par_iter()
                .map(|site| {
                    let values = screen_values(site, q)?;
                    let pick = |idx: &[usize]| idx.iter().map(|&l| values[l]).collect::<Vec<f64>>();
                    match welch_t_test(&pick(first), &pick(second), CREDIBLE_LEVEL) {
                        Ok(t) if t.t.is_finite() => Ok(Some(t)),
                        Ok(_) => Ok(None),
                        Err(Error::InvalidArgument(_)) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_>>()?;
            let records = panel
                .sites
                .iter()
                .zip(&tests)
                .map(|(site, t)| match t {
                    Some(t) => SiteSummary::new(site, t.t, t.t - t.critical, t.t + t.critical),
                    None => SiteSummary::degenerate(site),
                })
                .collect();
            let mut grid = SummaryGrid::new(format!("t_{}", q.label()), "t", Provenance::LeastSquares { n_years: panel.years.len() }, records);
            grid.variable = Some(var);
            out.push(ScreenResult { variable: var, quantity: q, grid, tests });
        }
    }
    Ok(out)
}

fn screen_values(site: &[HarmonicCoefficients], q: ScreenQuantity) -> Result<Vec<f64>> {
    match q {
        ScreenQuantity::Amplitude(h) => site.iter().map(|c| to_amplitude_phase(c, h).map(|ap| ap.amplitude)).collect(),
        ScreenQuantity::Phase(h) => {
            let phases: Vec<f64> = site.iter().map(|c| to_amplitude_phase(c, h).map(|ap| ap.phase)).collect::<Result<_>>()?;
            let (s, c) = phases.iter().fold((0.0, 0.0), |(s, c), &a| (s + a.sin(), c + a.cos()));
            let center = s.atan2(c);
            Ok(phases.iter().map(|&a| wrap_angle(a - center)).collect())
        }
    }
}

/// Mean of a grid's non-degenerate site means.
pub fn grid_mean(grid: &SummaryGrid) -> f64 {
    mean(&grid.records.iter().filter(|r| !r.degenerate).map(|r| r.mean).collect::<Vec<_>>())
}

/// Posterior coverage of a known truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub level: f64,
    pub n_draws: usize,
    /// (site, year ℓ = 1..=L, coefficient) triples checked.
    pub beta_triples: usize,
    pub beta_covered: usize,
    pub beta_coverage: f64,
    /// Coverage per coefficient, in `COEF_LABELS` order.
    pub beta_coverage_by_coefficient: Vec<f64>,
    /// Mean over (variable, site) of |posterior mean / truth − 1|.
    pub sigma2_eps_mean_relative_error: f64,
    pub sigma2_eps_coverage: f64,
}

/// Equal-tailed interval coverage of β_ℓ(s) for ℓ ≥ 1 and accuracy of the
/// posterior mean error variances.
pub fn recovery_report(draws: &PosteriorDraws, truth: &crate::synthetic::TruthRecord) -> Result<RecoveryReport> {
    check_draws(draws)?;
    let (n, l_max) = (draws.n_sites(), draws.n_years());
    if truth.sites.iter().map(|s| &s.id).ne(draws.meta.sites.iter().map(|s| &s.id)) || truth.years != draws.meta.years {
        return Err(invalid("truth record does not match the fitted sites and years"));
    }
    let tail = (1.0 - CREDIBLE_LEVEL) / 2.0;
    let covers = |values: &mut Vec<f64>, x: f64| {
        values.sort_by(f64::total_cmp);
        crate::stats::quantile_sorted(values, tail) <= x && x <= crate::stats::quantile_sorted(values, 1.0 - tail)
    };
    let mut by_coef = [0usize; crate::harmonic::STATE_DIM];
    for s in 0..n {
        for l in 1..=l_max {
            let t = truth.beta(l, s);
            for k in 0..crate::harmonic::STATE_DIM {
                let mut v: Vec<f64> = (0..draws.n_draws()).map(|d| draws.beta(d, l, s)[k]).collect();
                if covers(&mut v, t[k]) {
                    by_coef[k] += 1;
                }
            }
        }
    }
    let triples = n * l_max * crate::harmonic::STATE_DIM;
    let covered: usize = by_coef.iter().sum();
    let (mut rel, mut eps_covered) = (Vec::new(), 0usize);
    for j in 0..2 {
        for s in 0..n {
            let mut v: Vec<f64> = (0..draws.n_draws()).map(|d| draws.sigma2_eps(d, j, s)).collect();
            let t = truth.sigma2_eps[j][s];
            rel.push((mean(&v) / t - 1.0).abs());
            if covers(&mut v, t) {
                eps_covered += 1;
            }
        }
    }
    Ok(RecoveryReport {
        level: CREDIBLE_LEVEL,
        n_draws: draws.n_draws(),
        beta_triples: triples,
        beta_covered: covered,
        beta_coverage: covered as f64 / triples as f64,
        beta_coverage_by_coefficient: by_coef.iter().map(|&c| c as f64 / (n * l_max) as f64).collect(),
        sigma2_eps_mean_relative_error: mean(&rel),
        sigma2_eps_coverage: eps_covered as f64 / (2 * n) as f64,
    })
}
