//! Scalar probability helpers shared across the crate: standard-normal
//! pdf/cdf in stable log form and the probit log-likelihood derivatives
//! used by the Laplace classifier.

use statrs::function::erf::erfc;

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Cutoff below which the tail series replaces direct erfc evaluation.
const TAIL_CUT: f64 = -10.0;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Mills-ratio style tail series: Phi(x) ~ pdf(x)/(-x) * series(x) for x << 0.
fn tail_series(x: f64) -> f64 {
    let x2 = x * x;
    1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2) + 105.0 / (x2 * x2 * x2 * x2)
}

/// log Phi(x), finite for all finite x.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > TAIL_CUT {
        norm_cdf(x).ln()
    } else {
        -0.5 * x * x - 0.5 * LN_2PI - (-x).ln() + tail_series(x).ln()
    }
}

/// pdf(x)/Phi(x), the derivative of log Phi; stays finite in the left tail.
pub fn inv_mills(x: f64) -> f64 {
    if x > TAIL_CUT {
        norm_pdf(x) / norm_cdf(x)
    } else {
        -x / tail_series(x)
    }
}

/// Derivatives of log Phi(y*f) with respect to f at one site.
///
/// `w` is the negative second derivative (curvature). It is nonnegative
/// everywhere and strictly positive until Phi(y*f) saturates to 1 in
/// double precision, which keeps the Newton system well posed.
#[derive(Debug, Clone, Copy)]
pub struct ProbitSite {
    pub log_lik: f64,
    pub d1: f64,
    pub w: f64,
    pub d3: f64,
}

pub fn probit_site(y: f64, f: f64) -> ProbitSite {
    let t = y * f;
    let r = inv_mills(t);
    ProbitSite {
        log_lik: log_norm_cdf(t),
        d1: y * r,
        w: r * (r + t),
        d3: y * r * ((t + r) * (2.0 * r + t) - 1.0),
    }
}
