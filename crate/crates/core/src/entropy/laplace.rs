//! Discretized Laplace probability masses.
//!
//! All evaluation goes through `libm`, so the same inputs give the same bits
//! on every platform; the coder relies on this when it builds frequency
//! tables on both sides of the channel.

use std::f64::consts::LN_2;

/// Lower clamp applied to every log-scale before use.
pub const MIN_LOG_SCALE: f64 = -10.0;

/// `ln P(v)` for a unit-width bin centred at offset `d = v - mu` under a
/// Laplace with scale `exp(log_scale)`, together with its partial derivatives
/// with respect to `d` and `log_scale`. The caller is responsible for the
/// log-scale clamp.
pub fn log_mass_with_grad(d: f64, log_scale: f64) -> (f64, f64, f64) {
    let u = libm::exp(-log_scale);
    let a = d.abs();
    let sign = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    let (log_m, dlog_da, dlog_du) = if a >= 0.5 {
        // Both bin edges on the same side of the mode.
        let log_m = -LN_2 - (a - 0.5) * u + libm::log(-libm::expm1(-u));
        let em1 = libm::expm1(u);
        let inv = if em1.is_finite() { 1.0 / em1 } else { 0.0 };
        (log_m, -u, -(a - 0.5) + inv)
    } else {
        let near = libm::exp(-(0.5 - a) * u);
        let far = libm::exp(-(0.5 + a) * u);
        let m = -0.5 * libm::expm1(-(0.5 - a) * u) - 0.5 * libm::expm1(-(0.5 + a) * u);
        let dm_da = 0.5 * u * (far - near);
        let dm_du = 0.5 * (0.5 - a) * near + 0.5 * (0.5 + a) * far;
        (libm::log(m), dm_da / m, dm_du / m)
    };
    (log_m, dlog_da * sign, -dlog_du * u)
}

/// Probability mass of the integer bin `[v - 1/2, v + 1/2]` under
/// `Laplace(mu, exp(log_scale))`; `log_scale` is clamped at -10.
pub fn laplace_mass(v: f64, mu: f64, log_scale: f64) -> f64 {
    libm::exp(log_mass_with_grad(v - mu, log_scale.max(MIN_LOG_SCALE)).0)
}

/// `-log2` of [`laplace_mass`], evaluated in the log domain so far tails do
/// not underflow.
pub fn laplace_bits(v: f64, mu: f64, log_scale: f64) -> f64 {
    -log_mass_with_grad(v - mu, log_scale.max(MIN_LOG_SCALE)).0 / LN_2
}

/// Laplace CDF at `x`; used by the table builder and by tests.
pub fn laplace_cdf(x: f64, mu: f64, log_scale: f64) -> f64 {
    let b = libm::exp(log_scale.max(MIN_LOG_SCALE));
    let t = (x - mu) / b;
    if t < 0.0 {
        0.5 * libm::exp(t)
    } else {
        1.0 - 0.5 * libm::exp(-t)
    }
}
