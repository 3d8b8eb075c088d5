//! Error metrics and bound checks.

use alloc::vec::Vec;
use core::fmt;

use crate::losses::{population_breg_loss, ConvexGenerator, DEFAULT_CLAMP_EPSILON};
use crate::policy::TabularPolicy;
use crate::ratio;
use crate::world::FiniteWorld;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// A scaling fit needs at least 3 usable points.
    TooFewPoints {
        usable: usize,
    },
    InvalidCurve(&'static str),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::TooFewPoints { usable } => {
                write!(
                    f,
                    "scaling fit needs >= 3 positive-error points, got {usable}"
                )
            }
            MetricsError::InvalidCurve(msg) => write!(f, "invalid curve: {msg}"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// The squared estimation error
/// `Σ_x p_x(x) Σ_y p⁺(y|x)·(p_θ(y|x) − p⁺(y|x))²`,
/// i.e. `‖p_θ − p⁺‖²` in `L²(p⁺)`.
pub fn l2_error(policy: &TabularPolicy, world: &FiniteWorld) -> f64 {
    let probs = policy.probs();
    let mut total = 0.0;
    for x in 0..world.n_prompts() {
        let px = world.prompt_dist()[x];
        for y in 0..world.n_responses() {
            let pp = world.p_plus().get(x, y);
            let d = probs.get(x, y) - pp;
            total += px * pp * d * d;
        }
    }
    total
}

/// Both sides of the ratio-to-distribution error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBoundCheck {
    /// The squared `L²(p⁺)` error.
    pub lhs: f64,
    /// `2(1−t)²/(t²·m₊²·μ) · L_Breg`.
    pub rhs: f64,
    pub holds: bool,
    pub m_plus: f64,
    pub mu: f64,
    /// The ratio interval `I` over which `μ = inf f″` was taken.
    pub interval: (f64, f64),
}

/// Checks `‖p_θ − p⁺‖²_{L²(p⁺)} ≤ 2(1−t)²/(t²·m₊²·μ) · L_Breg` with both
/// sides computed independently.
///
/// `m₊` is the smallest `p⁺` value on its support. The interval `I` is the
/// hull of the realized clamped `g_θ` values and the `g*` values on the
/// support, widened multiplicatively by 1%; the bound's mean-value
/// argument needs `f″` bounded between every model ratio and its target.
/// `μ = inf f″` over `I`, which for a single-point interval is `f″` there.
pub fn error_bound_check(
    policy: &TabularPolicy,
    world: &FiniteWorld,
    generator: &ConvexGenerator,
) -> ErrorBoundCheck {
    let lhs = l2_error(policy, world);
    let t = world.t();
    let p_ref = world.reference_distribution();
    let gfield = ratio::g_theta_from_probs(&policy.probs(), &p_ref, t, DEFAULT_CLAMP_EPSILON);
    let gstar = ratio::g_star(world);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut m_plus = f64::INFINITY;
    for x in 0..world.n_prompts() {
        for y in 0..world.n_responses() {
            if let Some(star) = gstar.value(x, y) {
                m_plus = m_plus.min(world.p_plus().get(x, y));
                let g = gfield.clamped.get(x, y);
                lo = lo.min(g.min(star));
                hi = hi.max(g.max(star));
            }
        }
    }
    // Widen by 1% on each end; the lower end stays positive because both
    // clamped ratios and in-support g* are nonnegative (a zero g* can only
    // shrink mu further via the hull, handled by flooring at the clamp).
    lo = (lo / 1.01).max(f64::MIN_POSITIVE);
    hi *= 1.01;
    let mu = generator
        .inf_deriv2(lo, hi)
        .unwrap_or(f64::MIN_POSITIVE)
        .max(f64::MIN_POSITIVE);

    let breg = population_breg_loss(policy, world, generator).unwrap_or(f64::NAN);
    let rhs = 2.0 * (1.0 - t) * (1.0 - t) / (t * t * m_plus * m_plus * mu) * breg;
    ErrorBoundCheck {
        lhs,
        rhs,
        holds: lhs <= rhs,
        m_plus,
        mu,
        interval: (lo, hi),
    }
}

/// A point on the error-versus-sample-size curve. `error_mean` aggregates
/// the `L²(p⁺)` error norm (the square root of [`l2_error`]) over
/// replicates, which is the quantity with a `n^{-1/2}` decay when the
/// squared error shrinks like the generalization bound's rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub n: usize,
    pub error_mean: f64,
    pub error_stderr: f64,
    pub seeds: usize,
}

/// Error-versus-n measurements with strictly increasing n.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyCurve {
    points: Vec<CurvePoint>,
}

impl ConsistencyCurve {
    pub fn new(points: Vec<CurvePoint>) -> Result<Self, MetricsError> {
        for pair in points.windows(2) {
            if pair[1].n <= pair[0].n {
                return Err(MetricsError::InvalidCurve("n must be strictly increasing"));
            }
        }
        if points.iter().any(|p| p.error_mean < 0.0) {
            return Err(MetricsError::InvalidCurve("errors must be nonnegative"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }
}

/// Ordinary least squares on `(log n, log error)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Points dropped because their error was not strictly positive.
    pub excluded_points: usize,
}

pub fn scaling_fit(curve: &ConsistencyCurve) -> Result<ScalingFit, MetricsError> {
    let usable: Vec<(f64, f64)> = curve
        .points()
        .iter()
        .filter(|p| p.error_mean > 0.0)
        .map(|p| (libm::log(p.n as f64), libm::log(p.error_mean)))
        .collect();
    let excluded = curve.points().len() - usable.len();
    if usable.len() < 3 {
        return Err(MetricsError::TooFewPoints {
            usable: usable.len(),
        });
    }
    let n = usable.len() as f64;
    let mean_x = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = usable
        .iter()
        .map(|p| {
            let r = p.1 - (slope * p.0 + intercept);
            r * r
        })
        .sum();
    let ss_tot: f64 = usable.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Ok(ScalingFit {
        slope,
        intercept,
        r_squared,
        excluded_points: excluded,
    })
}
