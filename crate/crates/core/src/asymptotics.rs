//! Large-scale closed forms: relative rank, sampling rate, the asymptotic
//! rate and the limiting spectral law of `H` (a MANOVA-type density on
//! `[lambda_-, lambda_+]` with atoms at 0 and 1).

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::adaptive_simpson;

const QUAD_TOL: f64 = 1e-13;

/// `1 - sqrt((1 - r/n1)(1 - r/n2))`.
pub fn relative_rank(n1: usize, n2: usize, r: usize) -> Result<f64> {
    if r == 0 || r > n1.min(n2) {
        return Err(Error::invalid(format!("rank {r} outside 1..={}", n1.min(n2))));
    }
    let a = 1.0 - r as f64 / n1 as f64;
    let b = 1.0 - r as f64 / n2 as f64;
    Ok(1.0 - (a * b).sqrt())
}

/// `s / (n1 n2)`.
pub fn sampling_rate(n1: usize, n2: usize, s: usize) -> Result<f64> {
    let total = n1 * n2;
    if s == 0 || s > total {
        return Err(Error::invalid(format!("s = {s} outside 1..={total}")));
    }
    Ok(s as f64 / total as f64)
}

/// Relative rank and sampling rate with the derived truncation ratios
/// `p = 1 - rho_s` (unobserved fraction) and `q = (1 - rho_r)^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticParams {
    pub rho_r: f64,
    pub rho_s: f64,
    pub p: f64,
    pub q: f64,
}

impl AsymptoticParams {
    pub fn new(rho_r: f64, rho_s: f64) -> Result<Self> {
        if !(rho_r > 0.0 && rho_r <= 1.0) || !(rho_s > 0.0 && rho_s <= 1.0) {
            return Err(Error::invalid(format!(
                "rho_r = {rho_r} and rho_s = {rho_s} must lie in (0, 1]"
            )));
        }
        Ok(Self {
            rho_r,
            rho_s,
            p: 1.0 - rho_s,
            q: (1.0 - rho_r) * (1.0 - rho_r),
        })
    }

    pub fn from_dims(n1: usize, n2: usize, r: usize, s: usize) -> Result<Self> {
        Self::new(relative_rank(n1, n2, r)?, sampling_rate(n1, n2, s)?)
    }

    /// Parameters from the truncation ratios directly, `p, q` in `(0, 1)`.
    pub fn from_pq(p: f64, q: f64) -> Result<Self> {
        check_pq(p, q)?;
        Ok(Self {
            rho_r: 1.0 - q.sqrt(),
            rho_s: 1.0 - p,
            p,
            q,
        })
    }

    /// `rho_s >= 1 - (1 - rho_r)^2`: at least as many observations as
    /// degrees of freedom, asymptotically.
    pub fn above_boundary(&self) -> bool {
        self.rho_s >= 1.0 - self.q
    }
}

fn check_pq(p: f64, q: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) || !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("p = {p} and q = {q} must lie in (0, 1)")));
    }
    Ok(())
}

fn clamp_radicand(x: f64) -> f64 {
    if x < 0.0 && x > -1e-14 {
        0.0
    } else {
        x
    }
}

/// `rho_inf = 1 - (sqrt((1-rho_r)^2 rho_s) - sqrt(rho_r (2-rho_r)(1-rho_s)))^2`,
/// or 1 on and below the degrees-of-freedom boundary.
pub fn asymptotic_rate(params: &AsymptoticParams) -> f64 {
    let first = clamp_radicand(params.q * params.rho_s).sqrt();
    let second = clamp_radicand(params.rho_r * (2.0 - params.rho_r) * (1.0 - params.rho_s)).sqrt();
    let gap = first - second;
    if gap <= 0.0 {
        return 1.0;
    }
    (1.0 - gap * gap).clamp(0.0, 1.0)
}

/// Support edges `lambda_pm = (sqrt(q(1-p)) +- sqrt(p(1-q)))^2`.
pub fn esd_support_pq(p: f64, q: f64) -> (f64, f64) {
    let a = clamp_radicand(q * (1.0 - p)).sqrt();
    let b = clamp_radicand(p * (1.0 - q)).sqrt();
    let lo = (a - b) * (a - b);
    let hi = (a + b) * (a + b);
    (lo.min(hi), lo.max(hi).min(1.0))
}

pub fn esd_support(params: &AsymptoticParams) -> (f64, f64) {
    esd_support_pq(params.p, params.q)
}

/// Limiting spectral distribution of `W_pq W_pq^T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitingEsd {
    pub p: f64,
    pub q: f64,
    pub mass_at_0: f64,
    pub mass_at_1: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

impl LimitingEsd {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        check_pq(p, q)?;
        let (lambda_minus, lambda_plus) = esd_support_pq(p, q);
        Ok(Self {
            p,
            q,
            mass_at_0: (1.0 - q / p).max(0.0),
            mass_at_1: ((p + q - 1.0) / p).max(0.0),
            lambda_minus,
            lambda_plus,
        })
    }

    pub fn from_params(params: &AsymptoticParams) -> Result<Self> {
        Self::new(params.p, params.q)
    }

    fn width(&self) -> f64 {
        self.lambda_plus - self.lambda_minus
    }

    /// Continuous part of the density at `x in (0, 1)`.
    pub fn density(&self, x: f64) -> Result<f64> {
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::invalid(format!("density needs x in (0, 1), got {x}")));
        }
        if x < self.lambda_minus || x > self.lambda_plus {
            return Ok(0.0);
        }
        let radicand = (self.lambda_plus - x) * (x - self.lambda_minus);
        Ok(radicand.max(0.0).sqrt() / (2.0 * PI * self.p * x * (1.0 - x)))
    }

    /// Integrand after `x = lambda_- + w sin^2(theta)`; smooth on
    /// `[0, pi/2]` including the edges.
    fn theta_integrand(&self, theta: f64) -> f64 {
        let w = self.width();
        let (s, c) = theta.sin_cos();
        let (s2, c2) = (s * s, c * c);
        let x = self.lambda_minus + w * s2;
        let left = if self.lambda_minus == 0.0 { 1.0 / w } else { s2 / x };
        let right = if self.lambda_plus >= 1.0 {
            1.0 / w
        } else {
            c2 / (1.0 - x)
        };
        w * w * 2.0 * left * right / (2.0 * PI * self.p)
    }

    fn theta_of(&self, x: f64) -> f64 {
        let w = self.width();
        let t = ((x - self.lambda_minus) / w).clamp(0.0, 1.0);
        t.sqrt().asin()
    }

    /// Continuous mass on `[a, b]`.
    pub fn continuous_mass_between(&self, a: f64, b: f64) -> f64 {
        let lo = a.max(self.lambda_minus);
        let hi = b.min(self.lambda_plus);
        if hi <= lo || self.width() <= 0.0 {
            return 0.0;
        }
        adaptive_simpson(
            |t| self.theta_integrand(t),
            self.theta_of(lo),
            self.theta_of(hi),
            QUAD_TOL,
        )
    }

    pub fn continuous_mass(&self) -> f64 {
        if self.width() <= 0.0 {
            return 0.0;
        }
        adaptive_simpson(|t| self.theta_integrand(t), 0.0, FRAC_PI_2, QUAD_TOL)
    }

    pub fn total_mass(&self) -> f64 {
        self.mass_at_0 + self.mass_at_1 + self.continuous_mass()
    }

    /// Cumulative distribution function including both atoms.
    pub fn cdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let mut total = self.mass_at_0 + self.continuous_mass_between(0.0, x.min(1.0));
        if x >= 1.0 {
            total += self.mass_at_1;
        }
        total.min(1.0)
    }

    /// Tabulated inverse of the continuous part for sampling.
    pub fn quantile_table(&self, points: usize) -> QuantileTable {
        let points = points.max(2);
        let step = FRAC_PI_2 / (points - 1) as f64;
        let mut cumulative = Vec::with_capacity(points);
        cumulative.push(0.0);
        for k in 1..points {
            let (a, b) = ((k - 1) as f64 * step, k as f64 * step);
            let piece = adaptive_simpson(|t| self.theta_integrand(t), a, b, QUAD_TOL);
            cumulative.push(cumulative[k - 1] + piece);
        }
        QuantileTable {
            esd: *self,
            step,
            cumulative,
        }
    }
}

/// Piecewise-linear inverse CDF of a [`LimitingEsd`] in the angle variable.
#[derive(Debug, Clone)]
pub struct QuantileTable {
    esd: LimitingEsd,
    step: f64,
    cumulative: Vec<f64>,
}

impl QuantileTable {
    /// Smallest `x` with `cdf(x) >= u`, for `u in [0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let e = &self.esd;
        if u < e.mass_at_0 {
            return 0.0;
        }
        let cont_total = *self.cumulative.last().unwrap();
        let v = u - e.mass_at_0;
        if v >= cont_total {
            return 1.0;
        }
        let k = self.cumulative.partition_point(|&c| c <= v).max(1);
        let (c0, c1) = (self.cumulative[k - 1], self.cumulative[k]);
        let frac = if c1 > c0 { (v - c0) / (c1 - c0) } else { 0.0 };
        let theta = (k - 1) as f64 * self.step + frac * self.step;
        e.lambda_minus + e.width() * theta.sin().powi(2)
    }
}

/// Continuous density written in the rate variables, with its atom at 1.
/// Returns `(density at x, mass at 1)`.
pub fn limiting_density_rate_form(rho_r: f64, rho_s: f64, x: f64) -> Result<(f64, f64)> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::invalid(format!("density needs x in (0, 1), got {x}")));
    }
    let one_minus_r2 = (1.0 - rho_r) * (1.0 - rho_r);
    let a = (one_minus_r2 * rho_s).sqrt();
    let b = (rho_r * (2.0 - rho_r) * (1.0 - rho_s)).sqrt();
    let (lo, hi) = ((a - b) * (a - b), (a + b) * (a + b));
    let mass_at_1 = ((one_minus_r2 - rho_s) / (1.0 - rho_s)).max(0.0);
    let density = if x < lo || x > hi {
        0.0
    } else {
        ((hi - x) * (x - lo)).max(0.0).sqrt() / (2.0 * PI * (1.0 - rho_s) * x * (1.0 - x))
    };
    Ok((density, mass_at_1))
}

/// Continuous density of the limit at `x`; atoms live in [`LimitingEsd`].
pub fn limiting_density(params: &AsymptoticParams, x: f64) -> Result<f64> {
    LimitingEsd::from_params(params)?.density(x)
}
