//! Scalar special functions, truncated normal draws, and reproducible
//! per-group random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::{erf, gamma};

use crate::scalar::Real;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_gamma(x: f64) -> f64 {
    gamma::ln_gamma(x)
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// `log Φ(x)`, accurate far into the lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // Mills-ratio asymptotic expansion.
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

pub fn norm_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Draw from N(0,1) truncated to `(lower, ∞)`.
fn std_normal_above<R: Rng + ?Sized>(lower: f64, rng: &mut R) -> f64 {
    if lower <= 0.45 {
        // Acceptance probability is at least 1 - Φ(0.45) ≈ 0.33.
        loop {
            let z = f64::std_normal(rng);
            if z > lower {
                return z;
            }
        }
    }
    // Exponential rejection (Robert, 1995) with the optimal rate.
    let rate = 0.5 * (lower + (lower * lower + 4.0).sqrt());
    loop {
        let u: f64 = rng.random();
        let z = lower - (1.0 - u).ln() / rate;
        let accept = (-0.5 * (z - rate) * (z - rate)).exp();
        let v: f64 = rng.random();
        if v <= accept && z > lower {
            return z;
        }
    }
}

/// Draw the probit augmentation variable: N(mean, 1) restricted to
/// `(0, ∞)` when `positive`, otherwise to `(−∞, 0]`.
pub fn truncated_normal_sign<T: Real, R: Rng + ?Sized>(mean: T, positive: bool, rng: &mut R) -> T {
    let mu = mean.as_f64();
    let draw = if positive {
        mu + std_normal_above(-mu, rng)
    } else {
        mu - std_normal_above(mu, rng)
    };
    // Rounding can land exactly on the boundary for extreme means.
    let draw = if positive {
        if draw > 0.0 { draw } else { f64::MIN_POSITIVE }
    } else if draw <= 0.0 {
        draw
    } else {
        0.0
    };
    T::lit(draw)
}

/// Deterministic generator for group `k` given a per-call base seed; the
/// result does not depend on the order groups are visited in.
pub fn group_rng(base: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(k as u64);
    rng
}

/// Log density of `θ = log σ²` when `σ² ~ IG(shape, scale)`.
pub fn log_ig_logvar_density(theta: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - shape * theta - scale * (-theta).exp()
}

/// Derivative of [`log_ig_logvar_density`] in `θ`.
pub fn log_ig_logvar_grad(theta: f64, shape: f64, scale: f64) -> f64 {
    -shape + scale * (-theta).exp()
}
