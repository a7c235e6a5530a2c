//! Harmonic design matrices, amplitude/phase algebra and cycle geometry.
//!
//! A cycle is the sum of the annual (h = 1) and semi-annual (h = 2)
//! harmonics of a centered daily series. Day t of a year with T days has
//! phase angle 2πh(t−1)/T, so day 1 is phase zero.

use std::f64::consts::PI;

use nalgebra::{Dyn, Matrix4, OMatrix, SVector, Vector4, U4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Fourier coefficients per variable (a₁, b₁, a₂, b₂).
pub const COEFS_PER_VARIABLE: usize = 4;
/// Stacked coefficient vector length for both variables.
pub const STATE_DIM: usize = 8;

/// Stacked coefficients `[a₁,b₁,a₂,b₂]` for tmin followed by tmax.
pub type CoefVector = SVector<f64, STATE_DIM>;
pub type CoefMatrix = nalgebra::SMatrix<f64, STATE_DIM, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Min,
    Max,
}

impl Variable {
    pub const ALL: [Variable; 2] = [Variable::Min, Variable::Max];

    pub fn index(self) -> usize {
        match self {
            Variable::Min => 0,
            Variable::Max => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::Min => "tmin",
            Variable::Max => "tmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Harmonic {
    Annual,
    SemiAnnual,
}

impl Harmonic {
    pub const ALL: [Harmonic; 2] = [Harmonic::Annual, Harmonic::SemiAnnual];

    pub fn order(self) -> usize {
        match self {
            Harmonic::Annual => 1,
            Harmonic::SemiAnnual => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extremum {
    Peak,
    Trough,
}

impl Extremum {
    pub fn name(self) -> &'static str {
        match self {
            Extremum::Peak => "peak",
            Extremum::Trough => "trough",
        }
    }
}

/// Which harmonics enter a reconstructed cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Components {
    Both,
    AnnualOnly,
}

/// Fourier coefficients of one variable at one location-year, in deg C.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HarmonicCoefficients {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl HarmonicCoefficients {
    pub fn new(a1: f64, b1: f64, a2: f64, b2: f64) -> Self {
        Self { a1, b1, a2, b2 }
    }

    /// The block of a stacked coefficient vector that belongs to `var`.
    pub fn of(beta: &CoefVector, var: Variable) -> Self {
        let o = var.index() * COEFS_PER_VARIABLE;
        Self::new(beta[o], beta[o + 1], beta[o + 2], beta[o + 3])
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.a1, self.b1, self.a2, self.b2)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn pair(&self, h: Harmonic) -> (f64, f64) {
        match h {
            Harmonic::Annual => (self.a1, self.b1),
            Harmonic::SemiAnnual => (self.a2, self.b2),
        }
    }

    pub fn annual_only(&self) -> Self {
        Self::new(self.a1, self.b1, 0.0, 0.0)
    }

    pub fn restricted(&self, components: Components) -> Self {
        match components {
            Components::Both => *self,
            Components::AnnualOnly => self.annual_only(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.a1.is_finite() && self.b1.is_finite() && self.a2.is_finite() && self.b2.is_finite()
    }

    fn validate(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!("non-finite harmonic coefficients {self:?}")))
        }
    }
}

impl std::ops::Add for HarmonicCoefficients {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.a1 + o.a1, self.b1 + o.b1, self.a2 + o.a2, self.b2 + o.b2)
    }
}

/// Polar form of one harmonic: amplitude in deg C, phase in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudePhase {
    pub amplitude: f64,
    pub phase: f64,
    pub harmonic: Harmonic,
}

/// Wrap an angle into (−π, π].
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Amplitude and phase of harmonic `h`: `A = √(a²+b²)`, `φ = atan2(−b, a)`.
pub fn to_amplitude_phase(c: &HarmonicCoefficients, h: Harmonic) -> Result<AmplitudePhase> {
    let (a, b) = c.pair(h);
    amplitude_phase(a, b, h)
}

pub fn amplitude_phase(a: f64, b: f64, h: Harmonic) -> Result<AmplitudePhase> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(invalid(format!("non-finite coefficients ({a}, {b})")));
    }
    if a == 0.0 && b == 0.0 {
        return Ok(AmplitudePhase { amplitude: 0.0, phase: 0.0, harmonic: h });
    }
    let mut phase = (-b).atan2(a);
    if phase <= -PI {
        phase = PI;
    }
    Ok(AmplitudePhase { amplitude: a.hypot(b), phase, harmonic: h })
}

/// Inverse of [`to_amplitude_phase`]: `a = A cos φ`, `b = −A sin φ`.
pub fn from_amplitude_phase(ap: &AmplitudePhase) -> Result<(f64, f64)> {
    if !(ap.amplitude >= 0.0) || !ap.phase.is_finite() {
        return Err(invalid(format!(
            "amplitude must be non-negative and phase finite, got A={} phi={}",
            ap.amplitude, ap.phase
        )));
    }
    if ap.amplitude == 0.0 {
        return Ok((0.0, 0.0));
    }
    let (s, c) = ap.phase.sin_cos();
    Ok((ap.amplitude * c, -ap.amplitude * s))
}

/// T×4 harmonic design with columns ρ₁, ψ₁, ρ₂, ψ₂.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    period: usize,
    x: OMatrix<f64, Dyn, U4>,
}

pub fn build_design_matrix(period: usize) -> Result<DesignMatrix> {
    if period < 4 {
        return Err(invalid(format!("design needs at least 4 days per year, got {period}")));
    }
    let t_len = period as f64;
    let x = OMatrix::<f64, Dyn, U4>::from_fn(period, |t, col| {
        let h = (col / 2 + 1) as f64;
        let angle = 2.0 * PI * h * t as f64 / t_len;
        if col % 2 == 0 {
            angle.cos()
        } else {
            angle.sin()
        }
    });
    Ok(DesignMatrix { period, x })
}

impl DesignMatrix {
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn matrix(&self) -> &OMatrix<f64, Dyn, U4> {
        &self.x
    }

    /// Row for day t (1-based).
    pub fn row(&self, day: usize) -> [f64; 4] {
        let r = day - 1;
        [self.x[(r, 0)], self.x[(r, 1)], self.x[(r, 2)], self.x[(r, 3)]]
    }

    pub fn gram(&self) -> Matrix4<f64> {
        self.x.tr_mul(&self.x)
    }

    /// Xᵀz for a series of length T.
    pub fn project(&self, z: &[f64]) -> Vector4<f64> {
        debug_assert_eq!(z.len(), self.period);
        let mut out = Vector4::zeros();
        for (t, &v) in z.iter().enumerate() {
            for k in 0..4 {
                out[k] += self.x[(t, k)] * v;
            }
        }
        out
    }

    /// Value of the cycle on day t (1-based).
    #[inline]
    pub fn value(&self, c: &HarmonicCoefficients, day: usize) -> f64 {
        let r = day - 1;
        c.a1 * self.x[(r, 0)] + c.b1 * self.x[(r, 1)] + c.a2 * self.x[(r, 2)] + c.b2 * self.x[(r, 3)]
    }

    pub fn cycle(&self, c: &HarmonicCoefficients) -> Vec<f64> {
        (1..=self.period).map(|t| self.value(c, t)).collect()
    }

    /// Peak and trough days of the cycle on the integer grid, ties to the
    /// earliest day.
    pub fn extremum_days(&self, c: &HarmonicCoefficients, components: Components) -> Result<(usize, usize)> {
        c.validate()?;
        let c = c.restricted(components);
        if c.a1 == 0.0 && c.b1 == 0.0 && c.a2 == 0.0 && c.b2 == 0.0 {
            return Err(Error::DegenerateCycle);
        }
        let (mut peak, mut trough) = (1usize, 1usize);
        let first = self.value(&c, 1);
        let (mut hi, mut lo) = (first, first);
        for t in 2..=self.period {
            let v = self.value(&c, t);
            if v > hi {
                hi = v;
                peak = t;
            }
            if v < lo {
                lo = v;
                trough = t;
            }
        }
        Ok((peak, trough))
    }

    pub fn extremum_day(&self, c: &HarmonicCoefficients, mode: Extremum, components: Components) -> Result<usize> {
        let (p, t) = self.extremum_days(c, components)?;
        Ok(match mode {
            Extremum::Peak => p,
            Extremum::Trough => t,
        })
    }
}

/// Daily cycle a₁ρ₁ + b₁ψ₁ + a₂ρ₂ + b₂ψ₂ over one year of `period` days.
pub fn reconstruct_cycle(c: &HarmonicCoefficients, period: usize) -> Result<Vec<f64>> {
    c.validate()?;
    Ok(build_design_matrix(period)?.cycle(c))
}

/// Day (1-based) on which the cycle peaks or bottoms out.
pub fn extremum_day(c: &HarmonicCoefficients, period: usize, mode: Extremum, components: Components) -> Result<usize> {
    build_design_matrix(period)?.extremum_day(c, mode, components)
}

/// Map a day difference onto [−T/2, T/2].
pub fn wrap_day_difference(d: f64, period: f64) -> f64 {
    let half = period / 2.0;
    let mut y = (d + half).rem_euclid(period) - half;
    if y == -half && d > 0.0 {
        y = half;
    }
    y
}

/// Circular mean of day-of-year values, returned in [1, T + 1).
pub fn circular_mean_day(days: &[f64], period: f64) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for &d in days {
        let a = 2.0 * PI * (d - 1.0) / period;
        s += a.sin();
        c += a.cos();
    }
    let mean = s.atan2(c).rem_euclid(2.0 * PI);
    1.0 + mean * period / (2.0 * PI)
}
