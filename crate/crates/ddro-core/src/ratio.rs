//! Density-ratio fields.
//!
//! For a world with preferred distribution `p⁺`, unpreferred `p⁻`, and
//! reference mixture `p_ref = t·p⁺ + (1−t)·p⁻`:
//!
//! - `g*(y|x) = p⁻(y|x) / p⁺(y|x)` is the target ratio,
//! - `r*(y|x) = p_ref(y|x) / p⁺(y|x)` satisfies `g* = r*/(1−t) − t/(1−t)`,
//! - `g_θ(y|x) = (1/(1−t))·p_ref(y|x)/p_θ(y|x) − t/(1−t)` is the model
//!   ratio implied by a policy,
//! - `p̃_θ = (1/(1−t))·p_ref − (t/(1−t))·p_θ` estimates `p⁻`.
//!
//! `g_θ` can leave the domain of a convex generator (it goes negative as
//! soon as `p_θ > p_ref/t`), so loss evaluation uses a two-sided clamp to
//! `[ε, 1/ε]` while the raw values are kept for telemetry.

use alloc::vec;
use alloc::vec::Vec;

use crate::mat::Mat;
use crate::policy::TabularPolicy;
use crate::world::FiniteWorld;

/// Default clamp for `g_θ` and `g_θ⁻¹` inside loss evaluation.
pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-6;

/// A per-cell real field with a domain mask marking where it is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioField {
    values: Mat,
    mask: Vec<bool>,
}

impl RatioField {
    fn new(values: Mat, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), values.rows() * values.cols());
        Self { values, mask }
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn is_defined(&self, x: usize, y: usize) -> bool {
        self.mask[x * self.values.cols() + y]
    }

    /// The value at `(x, y)`, or `None` outside the domain mask.
    pub fn value(&self, x: usize, y: usize) -> Option<f64> {
        self.is_defined(x, y).then(|| self.values.get(x, y))
    }

    /// Raw backing matrix; masked-out entries hold 0 and carry no meaning.
    pub fn values(&self) -> &Mat {
        &self.values
    }
}

/// `g* = p⁻/p⁺`, defined on the support of `p⁺`.
pub fn g_star(world: &FiniteWorld) -> RatioField {
    ratio_on_support(world, |pm, _| pm)
}

/// `r* = p_ref/p⁺`, defined on the support of `p⁺`.
pub fn r_star(world: &FiniteWorld) -> RatioField {
    let t = world.t();
    ratio_on_support(world, move |pm, pp| t * pp + (1.0 - t) * pm)
}

fn ratio_on_support(world: &FiniteWorld, numerator: impl Fn(f64, f64) -> f64) -> RatioField {
    let (rows, cols) = (world.n_prompts(), world.n_responses());
    let mut values = Mat::zeros(rows, cols);
    let mut mask = vec![false; rows * cols];
    for x in 0..rows {
        for y in 0..cols {
            let pp = world.p_plus().get(x, y);
            if pp > 0.0 {
                values.set(x, y, numerator(world.p_minus().get(x, y), pp) / pp);
                mask[x * cols + y] = true;
            }
        }
    }
    RatioField::new(values, mask)
}

/// The model ratio field with two-sided clamping. Raw values are retained
/// so clamp activity is observable.
#[derive(Debug, Clone, PartialEq)]
pub struct GThetaField {
    pub clamped: Mat,
    pub raw: Mat,
    pub clamp_hits: usize,
}

/// Evaluates `g_θ` for a policy against `p_ref`, clamping to `[ε, 1/ε]`.
pub fn g_theta(policy: &TabularPolicy, p_ref: &Mat, t: f64, epsilon: f64) -> GThetaField {
    g_theta_from_probs(&policy.probs(), p_ref, t, epsilon)
}

/// As [`g_theta`], taking precomputed policy probabilities.
pub fn g_theta_from_probs(probs: &Mat, p_ref: &Mat, t: f64, epsilon: f64) -> GThetaField {
    assert!(
        probs.same_shape(p_ref),
        "policy and reference shapes disagree"
    );
    assert!(t > 0.0 && t < 1.0, "t out of open interval");
    assert!(epsilon > 0.0, "clamp epsilon must be positive");
    let mut raw = Mat::zeros(probs.rows(), probs.cols());
    let mut clamped = Mat::zeros(probs.rows(), probs.cols());
    let mut clamp_hits = 0;
    let hi = 1.0 / epsilon;
    for x in 0..probs.rows() {
        for y in 0..probs.cols() {
            let g = (p_ref.get(x, y) / probs.get(x, y) - t) / (1.0 - t);
            raw.set(x, y, g);
            let c = g.clamp(epsilon, hi);
            if c != g {
                clamp_hits += 1;
            }
            clamped.set(x, y, c);
        }
    }
    GThetaField {
        clamped,
        raw,
        clamp_hits,
    }
}

/// The unpreferred-distribution estimator `p̃_θ`. Entries may be negative;
/// rows always sum to 1 because each row is an affine combination of two
/// stochastic rows.
pub fn tilde_p(policy: &TabularPolicy, p_ref: &Mat, t: f64) -> Mat {
    tilde_p_from_probs(&policy.probs(), p_ref, t)
}

/// As [`tilde_p`], taking precomputed policy probabilities.
pub fn tilde_p_from_probs(probs: &Mat, p_ref: &Mat, t: f64) -> Mat {
    assert!(
        probs.same_shape(p_ref),
        "policy and reference shapes disagree"
    );
    assert!(t > 0.0 && t < 1.0, "t out of open interval");
    let mut out = Mat::zeros(probs.rows(), probs.cols());
    for x in 0..probs.rows() {
        for y in 0..probs.cols() {
            out.set(x, y, (p_ref.get(x, y) - t * probs.get(x, y)) / (1.0 - t));
        }
    }
    out
}

/// Mean over prompts of the total negative mass of `p̃_θ`, a telemetry
/// signal for how far the estimator strays from being a distribution.
pub fn tilde_negativity_mass(tilde: &Mat) -> f64 {
    let mut total = 0.0;
    for x in 0..tilde.rows() {
        for y in 0..tilde.cols() {
            total += (-tilde.get(x, y)).max(0.0);
        }
    }
    total / tilde.rows() as f64
}
