//! Standard normal density, distribution function, and Mills ratio.

use libm::erfc;

pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn pdf(y: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * y * y).exp()
}

pub fn cdf(y: f64) -> f64 {
    0.5 * erfc(-y / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(y)`, accurate far into the right tail.
pub fn sf(y: f64) -> f64 {
    0.5 * erfc(y / std::f64::consts::SQRT_2)
}

const CF_SWITCH: f64 = 8.0;
const CF_TERMS: u32 = 200;

/// Mills ratio `φ(y) / (1 - Φ(y))`.
///
/// Above `y = 8` both terms underflow towards zero together, so the ratio is
/// evaluated through the continued fraction
/// `y + 1/(y + 2/(y + 3/(y + ...)))`.
pub fn mills_ratio(y: f64) -> f64 {
    if y > CF_SWITCH {
        let mut t = y;
        for k in (1..=CF_TERMS).rev() {
            t = y + f64::from(k) / t;
        }
        t
    } else {
        pdf(y) / sf(y)
    }
}
