//! Convex, twice-differentiable scalar functions used as losses and
//! regularizers, together with the proximal calculus needed by the ALO
//! and AMP estimates.
//!
//! Every family is evaluated coordinate-wise: a loss acts on residuals
//! `y_i - x_i' beta`, a regularizer on coefficients `beta_j`. The same
//! [`ScalarFamily`] type serves both roles.
//!
//! The proximal operator of `f` with scale `s` is
//!
//! ```text
//! prox(x, s) = argmin_y  (x - y)^2 / 2 + s * f(y)
//! ```
//!
//! and is found from the monotone stationarity equation
//! `y - x + s f'(y) = 0` by safeguarded Newton with bisection fallback.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Working radius used for the local curvature bound of the logistic loss
/// when none is given.
pub const DEFAULT_LOGISTIC_RADIUS: f64 = 5.0;

const PROX_ABS_TOL: f64 = 1e-14;
const PROX_MAX_ITER: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FamilyKind {
    /// `x^2 / 2`, as a loss.
    Squared,
    /// `sqrt(x^2 + mu^2) - mu`.
    PseudoHuber { mu: f64 },
    /// `log(1 + e^x) + log(1 + e^-x) - 2 log 2`; the curvature bound is
    /// evaluated at `radius`.
    LogisticResidual { radius: f64 },
    /// `x^2 / 2`, as a regularizer.
    Ridge,
    /// `sqrt(x^2 + mu^2) - mu`, a C2 surrogate for `|x|`.
    SmoothedAbsolute { mu: f64 },
    /// `mix * (sqrt(x^2 + mu^2) - mu) + (1 - mix) * x^2 / 2`.
    ElasticSmoothed { mu: f64, mix: f64 },
    /// `|x|^q / q` for `q >= 2`.
    Power { q: f64 },
}

/// Non-smooth regularizers that [`smooth`] can replace by a C2 family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NonSmooth {
    Absolute,
    ElasticNet { mix: f64 },
}

/// Value and first two derivatives at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivatives {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// A convex scalar function with its curvature metadata.
///
/// `curvature_lower` is a lower bound on `f''` (the strong-convexity
/// constant when positive). `holder_exponent` and `growth_order` describe
/// the Hölder continuity of `f''` and the polynomial growth of `f''`; they
/// are reported by diagnostics and never gate any computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarFamily {
    kind: FamilyKind,
    curvature_lower: f64,
    holder_exponent: f64,
    growth_order: f64,
}

impl ScalarFamily {
    pub fn new(kind: FamilyKind) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let (curvature_lower, holder_exponent, growth_order) = match kind {
            FamilyKind::Squared | FamilyKind::Ridge => (1.0, 1.0, 0.0),
            FamilyKind::PseudoHuber { mu } | FamilyKind::SmoothedAbsolute { mu } => {
                positive("mu", mu)?;
                (0.0, 1.0, 0.0)
            }
            FamilyKind::LogisticResidual { radius } => {
                positive("radius", radius)?;
                (logistic_d2(radius), 1.0, 0.0)
            }
            FamilyKind::ElasticSmoothed { mu, mix } => {
                positive("mu", mu)?;
                if !(0.0..=1.0).contains(&mix) {
                    return Err(Error::InvalidParameter(format!("mix must lie in [0, 1], got {mix}")));
                }
                (1.0 - mix, 1.0, 0.0)
            }
            FamilyKind::Power { q } => {
                if !(q.is_finite() && q >= 2.0) {
                    return Err(Error::InvalidParameter(format!("power q must be >= 2, got {q}")));
                }
                if q == 2.0 {
                    (1.0, 1.0, 0.0)
                } else {
                    (0.0, (q - 2.0).min(1.0), q - 2.0)
                }
            }
        };
        Ok(Self { kind, curvature_lower, holder_exponent, growth_order })
    }

    pub fn squared() -> Self {
        Self::new(FamilyKind::Squared).expect("valid")
    }

    pub fn ridge() -> Self {
        Self::new(FamilyKind::Ridge).expect("valid")
    }

    pub fn pseudo_huber(mu: f64) -> Result<Self> {
        Self::new(FamilyKind::PseudoHuber { mu })
    }

    pub fn logistic_residual(radius: f64) -> Result<Self> {
        Self::new(FamilyKind::LogisticResidual { radius })
    }

    pub fn smoothed_absolute(mu: f64) -> Result<Self> {
        Self::new(FamilyKind::SmoothedAbsolute { mu })
    }

    pub fn elastic_smoothed(mu: f64, mix: f64) -> Result<Self> {
        Self::new(FamilyKind::ElasticSmoothed { mu, mix })
    }

    pub fn power(q: f64) -> Result<Self> {
        Self::new(FamilyKind::Power { q })
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn curvature_lower(&self) -> f64 {
        self.curvature_lower
    }

    pub fn holder_exponent(&self) -> f64 {
        self.holder_exponent
    }

    pub fn growth_order(&self) -> f64 {
        self.growth_order
    }

    /// True when `f'' ≡ 1`, i.e. `f(x) = x^2 / 2`.
    pub fn is_unit_quadratic(&self) -> bool {
        match self.kind {
            FamilyKind::Squared | FamilyKind::Ridge => true,
            FamilyKind::Power { q } => q == 2.0,
            FamilyKind::ElasticSmoothed { mix, .. } => mix == 0.0,
            _ => false,
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Squared | FamilyKind::Ridge => 0.5 * x * x,
            FamilyKind::PseudoHuber { mu } | FamilyKind::SmoothedAbsolute { mu } => smooth_abs(x, mu),
            FamilyKind::LogisticResidual { .. } => {
                let a = x.abs();
                a + 2.0 * (-a).exp().ln_1p() - 2.0 * std::f64::consts::LN_2
            }
            FamilyKind::ElasticSmoothed { mu, mix } => mix * smooth_abs(x, mu) + (1.0 - mix) * 0.5 * x * x,
            FamilyKind::Power { q } => x.abs().powf(q) / q,
        }
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Squared | FamilyKind::Ridge => x,
            FamilyKind::PseudoHuber { mu } | FamilyKind::SmoothedAbsolute { mu } => x / x.hypot(mu),
            FamilyKind::LogisticResidual { .. } => (0.5 * x).tanh(),
            FamilyKind::ElasticSmoothed { mu, mix } => mix * x / x.hypot(mu) + (1.0 - mix) * x,
            FamilyKind::Power { q } => x.signum() * x.abs().powf(q - 1.0),
        }
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        match self.kind {
            FamilyKind::Squared | FamilyKind::Ridge => 1.0,
            FamilyKind::PseudoHuber { mu } | FamilyKind::SmoothedAbsolute { mu } => smooth_abs_d2(x, mu),
            FamilyKind::LogisticResidual { .. } => logistic_d2(x),
            FamilyKind::ElasticSmoothed { mu, mix } => mix * smooth_abs_d2(x, mu) + (1.0 - mix),
            FamilyKind::Power { q } => (q - 1.0) * x.abs().powf(q - 2.0),
        }
    }

    /// `(f(x), f'(x), f''(x))`, rejecting non-finite input or overflow.
    pub fn eval(&self, x: f64) -> Result<Derivatives> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{self} argument")));
        }
        let out = Derivatives { value: self.value(x), d1: self.d1(x), d2: self.d2(x) };
        if out.value.is_finite() && out.d1.is_finite() && out.d2.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite(format!("{self} evaluated at {x} overflows")))
        }
    }

    /// Proximal operator `argmin_y (x - y)^2 / 2 + scale * f(y)`.
    ///
    /// The stationarity map `y - x + scale f'(y)` is strictly increasing, and
    /// its root lies between `x - scale f'(x)` and `x`, so the bracketed
    /// iteration below always terminates.
    pub fn prox(&self, x: f64, scale: f64) -> f64 {
        debug_assert!(scale > 0.0, "prox scale must be positive");
        if self.is_unit_quadratic() {
            return x / (1.0 + scale);
        }
        let fx = self.d1(x);
        if fx == 0.0 {
            return x;
        }
        let g = |y: f64| y - x + scale * self.d1(y);
        let tol = PROX_ABS_TOL.max(4.0 * f64::EPSILON * (x.abs() + (scale * fx).abs()));

        let other = x - scale * fx;
        let (mut lo, mut hi) = if other < x { (other, x) } else { (x, other) };
        let mut y = x - scale * fx / (1.0 + scale * self.d2(x));
        if !(y > lo && y < hi) {
            y = 0.5 * (lo + hi);
        }
        for _ in 0..PROX_MAX_ITER {
            let gy = g(y);
            if gy.abs() <= tol {
                return y;
            }
            if gy < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let newton = y - gy / (1.0 + scale * self.d2(y));
            y = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= 2.0 * f64::EPSILON * y.abs().max(f64::MIN_POSITIVE) {
                return y;
            }
        }
        debug_assert!(false, "prox of {self} failed to converge at x={x}, scale={scale}");
        y
    }

    /// `d prox(x, scale) / dx = 1 / (1 + scale f''(prox(x, scale)))`, in (0, 1].
    pub fn prox_derivative(&self, x: f64, scale: f64) -> f64 {
        1.0 / (1.0 + scale * self.d2(self.prox(x, scale)))
    }

    /// `psi(z, theta) = theta * l'(prox_l(z, theta))` and its derivative in `z`,
    /// `theta l''(prox_l) / (1 + theta l''(prox_l))`.
    ///
    /// Intended for loss families. The identity `z - psi(z, theta) = prox_l(z, theta)`
    /// holds up to rounding.
    pub fn psi(&self, z: f64, theta: f64) -> (f64, f64) {
        let eta = self.prox(z, theta);
        let c = theta * self.d2(eta);
        (theta * self.d1(eta), c / (1.0 + c))
    }
}

/// Replace a non-smooth regularizer by its C2 surrogate with smoothing `mu`.
pub fn smooth(base: NonSmooth, mu: f64) -> Result<ScalarFamily> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::InvalidParameter(format!("smoothing mu must be positive, got {mu}")));
    }
    match base {
        NonSmooth::Absolute => ScalarFamily::smoothed_absolute(mu),
        NonSmooth::ElasticNet { mix } => ScalarFamily::elastic_smoothed(mu, mix),
    }
}

#[inline]
fn smooth_abs(x: f64, mu: f64) -> f64 {
    // sqrt(x^2 + mu^2) - mu without cancellation near 0
    x * x / (x.hypot(mu) + mu)
}

#[inline]
fn smooth_abs_d2(x: f64, mu: f64) -> f64 {
    let h = x.hypot(mu);
    (mu / h) * (mu / h) / h
}

#[inline]
fn logistic_d2(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    2.0 * e / ((1.0 + e) * (1.0 + e))
}

impl fmt::Display for ScalarFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FamilyKind::Squared => write!(f, "squared"),
            FamilyKind::Ridge => write!(f, "ridge"),
            FamilyKind::PseudoHuber { mu } => write!(f, "pseudo_huber:mu={mu}"),
            FamilyKind::LogisticResidual { radius } => write!(f, "logistic_residual:radius={radius}"),
            FamilyKind::SmoothedAbsolute { mu } => write!(f, "smoothed_absolute:mu={mu}"),
            FamilyKind::ElasticSmoothed { mu, mix } => write!(f, "elastic_smoothed:mu={mu},mix={mix}"),
            FamilyKind::Power { q } => write!(f, "power:q={q}"),
        }
    }
}

/// Parses `name[:key=value[,key=value]...]`, e.g. `pseudo_huber:mu=0.5` or
/// `elastic_smoothed:mu=0.01,mix=0.5`. Smoothing parameters have no default.
impl FromStr for ScalarFamily {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let fail = |reason: String| Error::FamilySpec { spec: spec.to_string(), reason };
        let spec_trim = spec.trim();
        let (name, rest) = match spec_trim.split_once(':') {
            Some((n, r)) => (n.trim(), r.trim()),
            None => (spec_trim, ""),
        };
        let mut params: Vec<(String, f64)> = Vec::new();
        for pair in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| fail(format!("expected key=value, got `{pair}`")))?;
            let v: f64 = v.trim().parse().map_err(|_| fail(format!("`{}` is not a number", v.trim())))?;
            params.push((k.trim().to_string(), v));
        }
        let take = |key: &str, params: &mut Vec<(String, f64)>| -> Option<f64> {
            let pos = params.iter().position(|(k, _)| k == key)?;
            Some(params.remove(pos).1)
        };
        let require = |key: &str, params: &mut Vec<(String, f64)>| {
            take(key, params).ok_or_else(|| fail(format!("missing required parameter `{key}`")))
        };
        let kind = match name {
            "squared" => FamilyKind::Squared,
            "ridge" => FamilyKind::Ridge,
            "pseudo_huber" => FamilyKind::PseudoHuber { mu: require("mu", &mut params)? },
            "logistic_residual" => FamilyKind::LogisticResidual {
                radius: take("radius", &mut params).unwrap_or(DEFAULT_LOGISTIC_RADIUS),
            },
            "smoothed_absolute" => FamilyKind::SmoothedAbsolute { mu: require("mu", &mut params)? },
            "elastic_smoothed" => FamilyKind::ElasticSmoothed {
                mu: require("mu", &mut params)?,
                mix: require("mix", &mut params)?,
            },
            "power" => FamilyKind::Power { q: require("q", &mut params)? },
            other => return Err(fail(format!("unknown family `{other}`"))),
        };
        if let Some((k, _)) = params.first() {
            return Err(fail(format!("unexpected parameter `{k}`")));
        }
        ScalarFamily::new(kind).map_err(|e| fail(e.to_string()))
    }
}
