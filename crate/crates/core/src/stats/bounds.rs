use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Whether the doublet carries an identity skip before its final rectifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Plain,
    Residual,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Plain => "plain",
            LayerKind::Residual => "residual",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(LayerKind::Plain),
            "residual" => Ok(LayerKind::Residual),
            other => Err(Error::invalid(format!("unknown layer kind {other:?}"))),
        }
    }
}

/// Mean and standard deviation of a non-negative layer input.
///
/// The analysis assumes `sigma_x` is small relative to `mu_x`; that is not
/// enforced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mu_x: f64,
    pub sigma_x: f64,
}

impl InputStats {
    pub fn new(mu_x: f64, sigma_x: f64) -> Result<Self> {
        if !(sigma_x > 0.0) || !sigma_x.is_finite() {
            return Err(Error::invalid(format!("sigma_x must be positive, got {sigma_x}")));
        }
        if !(mu_x >= 0.0) || !mu_x.is_finite() {
            return Err(Error::invalid(format!("mu_x must be non-negative, got {mu_x}")));
        }
        Ok(InputStats { mu_x, sigma_x })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub kind: LayerKind,
    pub stats: InputStats,
    /// Precision of the bound.
    pub delta: f64,
    /// Minimum fraction of surviving neurons.
    pub epsilon: f64,
    /// Shift of the response mean away from zero.
    pub mu_y: f64,
}

impl BoundQuery {
    pub fn new(kind: LayerKind, stats: InputStats, delta: f64, epsilon: f64) -> Result<Self> {
        Self::with_shift(kind, stats, delta, epsilon, 0.0)
    }

    pub fn with_shift(kind: LayerKind, stats: InputStats, delta: f64, epsilon: f64, mu_y: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::invalid(format!("delta must be positive, got {delta}")));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1], got {epsilon}")));
        }
        if !(mu_y >= 0.0) {
            return Err(Error::invalid(format!("mu_y must be non-negative, got {mu_y}")));
        }
        Ok(BoundQuery { kind, stats, delta, epsilon, mu_y })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub survival_lower_bound: f64,
    pub collapse_depth: u64,
}

/// One-sided Chebyshev (Cantelli) tail bound: `P(X - E[X] <= -lambda) <=
/// sigma^2 / (sigma^2 + lambda^2)`.
pub fn cantelli_bound(sigma: f64, lambda: f64) -> Result<f64> {
    if !(sigma > 0.0 && lambda > 0.0) {
        return Err(Error::invalid(format!("cantelli bound needs positive sigma and lambda, got {sigma}, {lambda}")));
    }
    let s2 = sigma * sigma;
    Ok(s2 / (s2 + lambda * lambda))
}

/// Spread multiplier on `sigma_x` in the survival bound: 2 for plain, 3 for
/// residual layers.
fn spread(kind: LayerKind) -> f64 {
    match kind {
        LayerKind::Plain => 2.0,
        LayerKind::Residual => 3.0,
    }
}

/// Distance of the response mean (plus precision) from the rectifier's kink.
fn margin(q: &BoundQuery) -> f64 {
    match q.kind {
        LayerKind::Plain => q.mu_y + q.delta,
        LayerKind::Residual => q.stats.mu_x + q.mu_y + q.delta,
    }
}

/// Lower bound on the probability that a neuron stays positive.
pub fn survival_lower_bound(q: &BoundQuery) -> f64 {
    let m2 = margin(q).powi(2);
    let s = spread(q.kind) * q.stats.sigma_x;
    m2 / (s * s + m2)
}

/// Fewest layers after which fewer than `epsilon` of the neurons survive.
///
/// Defined for unshifted responses only (`mu_y == 0`).
pub fn collapse_depth(q: &BoundQuery) -> Result<u64> {
    if q.mu_y != 0.0 {
        return Err(Error::invalid("collapse depth is defined for mu_y = 0"));
    }
    if q.epsilon == 1.0 {
        return Ok(0);
    }
    let ratio = spread(q.kind) * q.stats.sigma_x / margin(q);
    let depth = (1.0 / q.epsilon).ln() / (ratio * ratio).ln_1p();
    Ok(depth.ceil() as u64)
}

pub fn evaluate(q: &BoundQuery) -> Result<BoundReport> {
    Ok(BoundReport { survival_lower_bound: survival_lower_bound(q), collapse_depth: collapse_depth(q)? })
}
