//! Digamma, trigamma, and log-gamma.
//!
//! All three use upward recurrence to push the argument into the range where
//! a truncated asymptotic series is accurate: absolute error is below 1e-10
//! for digamma/log-gamma and below 1e-8 for trigamma on `x >= 1e-3` (in
//! `f64`; `f32` is limited by its own precision).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.5772156649015329;

/// psi(x) for x > 0 via psi(x) = psi(x+1) - 1/x until x >= 6, then the
/// asymptotic series in 1/x^2.
pub fn digamma<R: Scalar>(x: R) -> Result<R> {
    if !(x > R::zero()) {
        return Err(Error::domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut acc = R::zero();
    let mut z = x;
    let six = R::c(6.0);
    while z < six {
        acc = acc - z.recip();
        z = z + R::one();
    }
    let inv = z.recip();
    let inv2 = inv * inv;
    // ln z - 1/(2z) - sum_k B_{2k} / (2k z^{2k})
    let mut series = R::c(691.0 / 32760.0);
    series = series * inv2 - R::c(1.0 / 132.0);
    series = series * inv2 + R::c(1.0 / 240.0);
    series = series * inv2 - R::c(1.0 / 252.0);
    series = series * inv2 + R::c(1.0 / 120.0);
    series = series * inv2 - R::c(1.0 / 12.0);
    Ok(acc + z.ln() - inv * R::c(0.5) + series * inv2)
}

/// psi'(x) for x > 0; recurrence psi'(x) = psi'(x+1) + 1/x^2 until x >= 6,
/// then the series obtained by differentiating the digamma expansion.
pub fn trigamma<R: Scalar>(x: R) -> Result<R> {
    if !(x > R::zero()) {
        return Err(Error::domain(format!("trigamma requires x > 0, got {x}")));
    }
    let mut acc = R::zero();
    let mut z = x;
    let six = R::c(6.0);
    while z < six {
        acc = acc + (z * z).recip();
        z = z + R::one();
    }
    let inv = z.recip();
    let inv2 = inv * inv;
    // 1/z + 1/(2z^2) + sum_k B_{2k} / z^{2k+1}
    let mut series = R::c(5.0 / 66.0);
    series = series * inv2 - R::c(1.0 / 30.0);
    series = series * inv2 + R::c(1.0 / 42.0);
    series = series * inv2 - R::c(1.0 / 30.0);
    series = series * inv2 + R::c(1.0 / 6.0);
    Ok(acc + inv + inv2 * R::c(0.5) + series * inv2 * inv)
}

/// ln Gamma(x) for x > 0; recurrence ln Gamma(x) = ln Gamma(x+1) - ln x until
/// x >= 10, then Stirling's series.
pub fn log_gamma<R: Scalar>(x: R) -> Result<R> {
    if !(x > R::zero()) {
        return Err(Error::domain(format!("log_gamma requires x > 0, got {x}")));
    }
    let mut acc = R::zero();
    let mut z = x;
    let ten = R::c(10.0);
    while z < ten {
        acc = acc - z.ln();
        z = z + R::one();
    }
    let inv = z.recip();
    let inv2 = inv * inv;
    let half_ln_two_pi = R::c(0.9189385332046727); // ln(2*pi)/2
    let mut series = R::c(1.0 / 1188.0);
    series = series * inv2 - R::c(1.0 / 1680.0);
    series = series * inv2 + R::c(1.0 / 1260.0);
    series = series * inv2 - R::c(1.0 / 360.0);
    series = series * inv2 + R::c(1.0 / 12.0);
    Ok(acc + (z - R::c(0.5)) * z.ln() - z + half_ln_two_pi + series * inv)
}
