//! Exponential integral `E1(t) = integral from t to infinity of exp(-z)/z dz`.

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const MAX_TERMS: usize = 200;

/// `E1(t)` for `t > 0`, accurate to about 1e-15 relative.
///
/// Power series below 1, modified Lentz continued fraction above.
pub fn exp_integral_e1(t: f64) -> Result<f64> {
    if !(t > 0.0) || t.is_nan() {
        return Err(Error::invalid(format!("E1 needs t > 0, got {t}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(if t <= 1.0 { series(t) } else { continued_fraction(t) })
}

fn series(t: f64) -> f64 {
    // E1(t) = -gamma - ln t - sum_{k>=1} (-t)^k / (k k!)
    let mut sum = 0.0;
    let mut term = 1.0;
    for k in 1..MAX_TERMS {
        term *= -t / k as f64;
        let contribution = term / k as f64;
        sum += contribution;
        if contribution.abs() < f64::EPSILON * sum.abs() {
            break;
        }
    }
    -EULER_GAMMA - t.ln() - sum
}

fn continued_fraction(t: f64) -> f64 {
    // e^{-t} / (t + 1 - 1^2/(t + 3 - 2^2/(t + 5 - ...)))
    let tiny = f64::MIN_POSITIVE / f64::EPSILON;
    let mut b = t + 1.0;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_TERMS {
        let a = -((i * i) as f64);
        b += 2.0;
        d = 1.0 / (a * d + b);
        c = b + a / c;
        let delta = c * d;
        h *= delta;
        if (delta - 1.0).abs() < f64::EPSILON {
            break;
        }
    }
    h * (-t).exp()
}
