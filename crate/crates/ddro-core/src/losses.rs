//! The density-ratio loss family.
//!
//! A strictly convex generator `f` defines the Bregman divergence
//! `Breg_f(g ‖ g̃) = f(g̃) − f(g) − f′(g)·(g̃ − g)`, and the population loss
//! is the expectation of `Breg_f(g_θ ‖ g*)` under `p_x × p⁺`. Expanding the
//! divergence and dropping the constant `∫ f(g*) dp⁺` leaves an empirical
//! risk over the two unpaired sides:
//!
//! ```text
//! L(θ) = (1/n⁺) Σ_{D⁺} [ −f(g_θ) + f′(g_θ)·g_θ ]  −  (1/n⁻) Σ_{D⁻} f′(g_θ)
//! ```
//!
//! which can be negative because of the dropped constant. The regularized
//! form adds `γ·t·g_θ⁻¹·log g_θ` per preferred sample inside the first sum
//! and `γ·(1−t)·g_θ⁻¹·log g_θ` per unpreferred sample inside the (negated)
//! second sum, the empirical surrogate for a KL term toward the reference
//! model re-expressed through the mixture assumption. The surrogate is
//! implemented in exactly this per-sample form; it is not an algebraic
//! rewrite of `KL(p_θ ‖ p_ref)` and vanishes whenever `g_θ ≡ 1`.
//!
//! For the logistic generator the two empirical terms collapse to
//! `log(1 + g_θ)` and `log(1 + g_θ⁻¹)`. The practical variant smooths those
//! per-sample terms with a monotone `S` and adds both sides with a plus
//! sign:
//!
//! ```text
//! L(θ) = (1/n⁺) Σ_{D⁺} [ S(log(1+g_θ)) + γ·t·g_θ⁻¹·log g_θ ]
//!      + (1/n⁻) Σ_{D⁻} [ S(log(1+g_θ⁻¹)) + γ·(1−t)·g_θ⁻¹·log g_θ ]
//! ```
//!
//! where the unpreferred-side `S` argument is evaluated at the unpreferred
//! sample. With `S = identity` and `γ = 0` this equals the logistic
//! empirical risk exactly. All gradients are analytic; entries whose ratio
//! was clamped contribute zero gradient and are counted in telemetry.

use alloc::vec::Vec;
use core::fmt;

use crate::mat::Mat;
use crate::policy::TabularPolicy;
use crate::ratio::{self, GThetaField};
use crate::world::{FiniteWorld, UnpairedDataset};

pub use crate::ratio::DEFAULT_CLAMP_EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// `f(u) = u·log u − (1+u)·log(1+u)`; reduces the empirical risk to the
    /// logistic loss.
    Logistic,
    /// `f(u) = (u−1)²/2`; least-squares ratio fitting.
    Quadratic,
    /// `f(u) = u·log u`; KL importance estimation.
    Kl,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Logistic => "logistic",
            GeneratorKind::Quadratic => "quadratic",
            GeneratorKind::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Argument outside the generator's domain.
    DomainViolation {
        kind: GeneratorKind,
        u: f64,
    },
    /// A loss was requested over an empty dataset side.
    EmptyDatasetSide,
    InvalidSpec(&'static str),
    SampleOutOfRange {
        prompt: usize,
        response: usize,
    },
    NonFinite,
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::DomainViolation { kind, u } => {
                write!(f, "u = {u} outside domain of {} generator", kind.name())
            }
            LossError::EmptyDatasetSide => write!(f, "both dataset sides must be nonempty"),
            LossError::InvalidSpec(msg) => write!(f, "invalid loss spec: {msg}"),
            LossError::SampleOutOfRange { prompt, response } => {
                write!(f, "sample ({prompt}, {response}) out of range")
            }
            LossError::NonFinite => write!(f, "non-finite loss value"),
        }
    }
}

impl core::error::Error for LossError {}

/// A strictly convex generator selecting a Bregman divergence.
///
/// `eval` is defined on `u ≥ 0` for logistic/kl (continuously extended by
/// `f(0) = 0`) and on all of `ℝ` for quadratic; `deriv` and `deriv2`
/// require `u > 0` for logistic/kl.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvexGenerator {
    kind: GeneratorKind,
}

impl ConvexGenerator {
    pub fn new(kind: GeneratorKind) -> Self {
        Self { kind }
    }

    pub fn logistic() -> Self {
        Self::new(GeneratorKind::Logistic)
    }

    pub fn quadratic() -> Self {
        Self::new(GeneratorKind::Quadratic)
    }

    pub fn kl() -> Self {
        Self::new(GeneratorKind::Kl)
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn eval(&self, u: f64) -> Result<f64, LossError> {
        match self.kind {
            GeneratorKind::Logistic => {
                if u < 0.0 || !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                if u == 0.0 {
                    return Ok(0.0);
                }
                Ok(u * libm::log(u) - (1.0 + u) * libm::log1p(u))
            }
            GeneratorKind::Quadratic => {
                if !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                Ok(0.5 * (u - 1.0) * (u - 1.0))
            }
            GeneratorKind::Kl => {
                if u < 0.0 || !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                if u == 0.0 {
                    return Ok(0.0);
                }
                Ok(u * libm::log(u))
            }
        }
    }

    pub fn deriv(&self, u: f64) -> Result<f64, LossError> {
        match self.kind {
            GeneratorKind::Logistic => {
                if u <= 0.0 || !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                Ok(libm::log(u) - libm::log1p(u))
            }
            GeneratorKind::Quadratic => {
                if !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                Ok(u - 1.0)
            }
            GeneratorKind::Kl => {
                if u <= 0.0 || !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                Ok(libm::log(u) + 1.0)
            }
        }
    }

    pub fn deriv2(&self, u: f64) -> Result<f64, LossError> {
        match self.kind {
            GeneratorKind::Logistic => {
                if u <= 0.0 || !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                Ok(1.0 / (u * (1.0 + u)))
            }
            GeneratorKind::Quadratic => Ok(1.0),
            GeneratorKind::Kl => {
                if u <= 0.0 || !u.is_finite() {
                    return Err(self.domain_err(u));
                }
                Ok(1.0 / u)
            }
        }
    }

    /// `inf f″` over `[lo, hi]`. For logistic and kl the second derivative
    /// is strictly decreasing, so the infimum sits at `hi`; for quadratic
    /// it is the constant 1. A single-point interval returns `f″` there.
    pub fn inf_deriv2(&self, lo: f64, hi: f64) -> Result<f64, LossError> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(LossError::InvalidSpec("interval must satisfy lo <= hi"));
        }
        match self.kind {
            GeneratorKind::Quadratic => Ok(1.0),
            GeneratorKind::Logistic | GeneratorKind::Kl => self.deriv2(hi),
        }
    }

    fn domain_err(&self, u: f64) -> LossError {
        LossError::DomainViolation { kind: self.kind, u }
    }
}

/// `(f(u), f′(u), f″(u))` with strict domain checking.
pub fn generator_eval(kind: GeneratorKind, u: f64) -> Result<(f64, f64, f64), LossError> {
    let g = ConvexGenerator::new(kind);
    Ok((g.eval(u)?, g.deriv(u)?, g.deriv2(u)?))
}

/// `Breg_f(g ‖ g̃) = f(g̃) − f(g) − f′(g)·(g̃ − g)`.
///
/// Mathematically nonnegative; values inside rounding noise of zero are
/// truncated to 0.
pub fn bregman_divergence(
    generator: &ConvexGenerator,
    g: f64,
    g_tilde: f64,
) -> Result<f64, LossError> {
    let value = generator.eval(g_tilde)? - generator.eval(g)? - generator.deriv(g)? * (g_tilde - g);
    Ok(value.max(0.0))
}

/// Numerically stable `σ(x) = 1/(1+e^{−x})`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

/// Monotone per-sample smoothing applied in the practical loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingKind {
    /// `S(x) = x`, the unsmoothed baseline.
    Identity,
    /// `S(x) = σ(x)`.
    Sig,
    /// `S(x) = log σ(x)`; the default.
    LogSig,
    /// `S(x) = −log σ(−x)`, i.e. softplus.
    NegLogSigNeg,
}

impl SmoothingKind {
    pub fn name(self) -> &'static str {
        match self {
            SmoothingKind::Identity => "identity",
            SmoothingKind::Sig => "sig",
            SmoothingKind::LogSig => "logsig",
            SmoothingKind::NegLogSigNeg => "neglogsigneg",
        }
    }

    pub const ALL: [SmoothingKind; 4] = [
        SmoothingKind::Identity,
        SmoothingKind::Sig,
        SmoothingKind::LogSig,
        SmoothingKind::NegLogSigNeg,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            SmoothingKind::Identity => x,
            SmoothingKind::Sig => sigmoid(x),
            SmoothingKind::LogSig => -softplus(-x),
            SmoothingKind::NegLogSigNeg => softplus(x),
        }
    }

    /// `S′(x)`; nonnegative everywhere, and at most 1 for every variant.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            SmoothingKind::Identity => 1.0,
            SmoothingKind::Sig => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            SmoothingKind::LogSig => sigmoid(-x),
            SmoothingKind::NegLogSigNeg => sigmoid(x),
        }
    }
}

/// Full configuration of one loss: generator, mixture weight, KL strength,
/// smoothing, and the clamp for the model ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub generator: ConvexGenerator,
    pub t: f64,
    pub gamma: f64,
    pub smoothing: SmoothingKind,
    /// When false the γ terms are reported in the loss but excluded from
    /// the gradient.
    pub kl_in_gradient: bool,
    pub clamp_epsilon: f64,
}

impl LossSpec {
    /// Defaults: `γ = 0`, KL excluded from the gradient, logsig smoothing,
    /// clamp at 1e-6.
    pub fn new(generator: ConvexGenerator, t: f64) -> Result<Self, LossError> {
        Self::with(
            generator,
            t,
            0.0,
            SmoothingKind::LogSig,
            false,
            DEFAULT_CLAMP_EPSILON,
        )
    }

    pub fn with(
        generator: ConvexGenerator,
        t: f64,
        gamma: f64,
        smoothing: SmoothingKind,
        kl_in_gradient: bool,
        clamp_epsilon: f64,
    ) -> Result<Self, LossError> {
        if !(t > 0.0 && t < 1.0) {
            return Err(LossError::InvalidSpec("t must lie in (0, 1)"));
        }
        if gamma.is_nan() || gamma < 0.0 {
            return Err(LossError::InvalidSpec("gamma must be nonnegative"));
        }
        if !(clamp_epsilon > 0.0 && clamp_epsilon < 1.0) {
            return Err(LossError::InvalidSpec("clamp_epsilon must lie in (0, 1)"));
        }
        Ok(Self {
            generator,
            t,
            gamma,
            smoothing,
            kl_in_gradient,
            clamp_epsilon,
        })
    }
}

/// Which member of the loss family to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// The plain empirical ratio-matching risk.
    Bregman,
    /// Bregman plus the γ regularization terms.
    Ddro,
    /// The smoothed logistic-structured loss.
    Practical,
}

impl LossForm {
    pub fn name(self) -> &'static str {
        match self {
            LossForm::Bregman => "bregman",
            LossForm::Ddro => "ddro",
            LossForm::Practical => "practical",
        }
    }
}

/// Per-step signals recorded during loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTelemetry {
    /// Samples (or weighted support cells) whose ratio hit the clamp.
    pub clamp_hits: usize,
    /// Range of clamped ratios over the cells the loss touched.
    pub g_min: f64,
    pub g_max: f64,
    /// Mean-per-prompt negative mass of the unpreferred estimator.
    pub tilde_neg_mass: f64,
}

/// A loss value, its gradient over the logits, and telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: Mat,
    pub telemetry: LossTelemetry,
}

/// `γ·c·g⁻¹·log g` and its derivative in `g`.
fn kl_term(g: f64) -> (f64, f64) {
    let lg = libm::log(g);
    (lg / g, (1.0 - lg) / (g * g))
}

struct Term {
    value: f64,
    dvalue: f64,
}

/// Signed preferred-side contribution and its `g`-derivative.
fn plus_term(form: LossForm, spec: &LossSpec, g: f64) -> Result<Term, LossError> {
    let (mut value, mut dvalue) = match form {
        LossForm::Bregman | LossForm::Ddro => {
            let f = spec.generator.eval(g)?;
            let fp = spec.generator.deriv(g)?;
            let fpp = spec.generator.deriv2(g)?;
            (-f + fp * g, fpp * g)
        }
        LossForm::Practical => {
            let u = libm::log1p(g);
            (spec.smoothing.eval(u), spec.smoothing.deriv(u) / (1.0 + g))
        }
    };
    if form != LossForm::Bregman && spec.gamma > 0.0 {
        let (kl, dkl) = kl_term(g);
        value += spec.gamma * spec.t * kl;
        if spec.kl_in_gradient {
            dvalue += spec.gamma * spec.t * dkl;
        }
    }
    Ok(Term { value, dvalue })
}

/// Signed unpreferred-side contribution and its `g`-derivative. The sign of
/// the whole bracket is folded in: negative for the ratio-matching forms,
/// positive for the practical form.
fn minus_term(form: LossForm, spec: &LossSpec, g: f64) -> Result<Term, LossError> {
    let (mut value, mut dvalue) = match form {
        LossForm::Bregman | LossForm::Ddro => {
            let fp = spec.generator.deriv(g)?;
            let fpp = spec.generator.deriv2(g)?;
            (-fp, -fpp)
        }
        LossForm::Practical => {
            let u = libm::log1p(1.0 / g);
            (
                spec.smoothing.eval(u),
                -spec.smoothing.deriv(u) / (g * (1.0 + g)),
            )
        }
    };
    if form != LossForm::Bregman && spec.gamma > 0.0 {
        let (kl, dkl) = kl_term(g);
        let sign = if form == LossForm::Ddro { -1.0 } else { 1.0 };
        value += sign * spec.gamma * (1.0 - spec.t) * kl;
        if spec.kl_in_gradient {
            dvalue += sign * spec.gamma * (1.0 - spec.t) * dkl;
        }
    }
    Ok(Term { value, dvalue })
}

/// Per-cell sample weights `count / n` for each side, over an optional
/// batch of sample indices.
struct CellWeights {
    plus: Mat,
    minus: Mat,
    plus_hits_per_cell: Mat,
    minus_hits_per_cell: Mat,
}

fn cell_weights(
    data: &UnpairedDataset,
    rows: usize,
    cols: usize,
    batch: Option<(&[usize], &[usize])>,
) -> Result<CellWeights, LossError> {
    let mut plus_counts = Mat::zeros(rows, cols);
    let mut minus_counts = Mat::zeros(rows, cols);
    let tally = |samples: &[(usize, usize)],
                 indices: Option<&[usize]>,
                 counts: &mut Mat|
     -> Result<usize, LossError> {
        let mut n = 0;
        let mut add = |&(x, y): &(usize, usize)| -> Result<(), LossError> {
            if x >= rows || y >= cols {
                return Err(LossError::SampleOutOfRange {
                    prompt: x,
                    response: y,
                });
            }
            counts.set(x, y, counts.get(x, y) + 1.0);
            Ok(())
        };
        match indices {
            Some(idx) => {
                for &i in idx {
                    add(samples.get(i).ok_or(LossError::EmptyDatasetSide)?)?;
                    n += 1;
                }
            }
            None => {
                for s in samples {
                    add(s)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    };
    let (plus_idx, minus_idx) = match batch {
        Some((p, m)) => (Some(p), Some(m)),
        None => (None, None),
    };
    let n_plus = tally(&data.plus_samples, plus_idx, &mut plus_counts)?;
    let n_minus = tally(&data.minus_samples, minus_idx, &mut minus_counts)?;
    if n_plus == 0 || n_minus == 0 {
        return Err(LossError::EmptyDatasetSide);
    }
    Ok(CellWeights {
        plus: plus_counts.map(|c| c / n_plus as f64),
        minus: minus_counts.map(|c| c / n_minus as f64),
        plus_hits_per_cell: plus_counts,
        minus_hits_per_cell: minus_counts,
    })
}

/// Evaluates an empirical loss with its analytic gradient and telemetry.
///
/// `batch` restricts each side to the given sample indices; `None` uses the
/// full dataset. Values and gradients are accumulated cell-by-cell in a
/// fixed row-major order, so results are deterministic.
pub fn empirical_loss_eval(
    form: LossForm,
    spec: &LossSpec,
    policy: &TabularPolicy,
    data: &UnpairedDataset,
    p_ref: &Mat,
    batch: Option<(&[usize], &[usize])>,
) -> Result<LossEval, LossError> {
    let probs = policy.probs();
    if !probs.same_shape(p_ref) {
        return Err(LossError::InvalidSpec(
            "policy and reference shapes disagree",
        ));
    }
    let weights = cell_weights(data, probs.rows(), probs.cols(), batch)?;
    let gfield = ratio::g_theta_from_probs(&probs, p_ref, spec.t, spec.clamp_epsilon);
    let tilde = ratio::tilde_p_from_probs(&probs, p_ref, spec.t);

    let mut loss = 0.0;
    let mut grad = Mat::zeros(probs.rows(), probs.cols());
    let mut clamp_hits = 0usize;
    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;

    for x in 0..probs.rows() {
        let mut coeff_sum = 0.0;
        let mut coeffs: Vec<f64> = Vec::with_capacity(probs.cols());
        for y in 0..probs.cols() {
            let wp = weights.plus.get(x, y);
            let wm = weights.minus.get(x, y);
            if wp == 0.0 && wm == 0.0 {
                coeffs.push(0.0);
                continue;
            }
            let g = gfield.clamped.get(x, y);
            let raw = gfield.raw.get(x, y);
            let is_clamped = g != raw;
            if is_clamped {
                clamp_hits += (weights.plus_hits_per_cell.get(x, y)
                    + weights.minus_hits_per_cell.get(x, y)) as usize;
            }
            g_min = g_min.min(g);
            g_max = g_max.max(g);

            let mut dloss_dg = 0.0;
            if wp > 0.0 {
                let term = plus_term(form, spec, g)?;
                loss += wp * term.value;
                dloss_dg += wp * term.dvalue;
            }
            if wm > 0.0 {
                let term = minus_term(form, spec, g)?;
                loss += wm * term.value;
                dloss_dg += wm * term.dvalue;
            }
            // dg/dθ_{x,j} = −R·(δ_{yj} − p_θ(j|x)) with R = p_ref/((1−t)p_θ);
            // zero through clamped entries.
            let coeff = if is_clamped {
                0.0
            } else {
                let r = p_ref.get(x, y) / ((1.0 - spec.t) * probs.get(x, y));
                dloss_dg * (-r)
            };
            coeff_sum += coeff;
            coeffs.push(coeff);
        }
        for (j, &coeff) in coeffs.iter().enumerate() {
            grad.set(x, j, coeff - coeff_sum * probs.get(x, j));
        }
    }

    if !loss.is_finite() || !grad.is_finite() {
        return Err(LossError::NonFinite);
    }
    if g_min > g_max {
        g_min = f64::NAN;
        g_max = f64::NAN;
    }
    Ok(LossEval {
        loss,
        grad,
        telemetry: LossTelemetry {
            clamp_hits,
            g_min,
            g_max,
            tilde_neg_mass: ratio::tilde_negativity_mass(&tilde),
        },
    })
}

/// The empirical ratio-matching risk (value only).
pub fn empirical_breg_loss(
    policy: &TabularPolicy,
    data: &UnpairedDataset,
    p_ref: &Mat,
    generator: &ConvexGenerator,
    t: f64,
) -> Result<f64, LossError> {
    let spec = LossSpec::new(*generator, t)?;
    Ok(empirical_loss_eval(LossForm::Bregman, &spec, policy, data, p_ref, None)?.loss)
}

/// The γ-regularized empirical risk (value only). Equals
/// [`empirical_breg_loss`] exactly at `γ = 0`.
pub fn empirical_ddro_loss(
    policy: &TabularPolicy,
    data: &UnpairedDataset,
    p_ref: &Mat,
    spec: &LossSpec,
) -> Result<f64, LossError> {
    Ok(empirical_loss_eval(LossForm::Ddro, spec, policy, data, p_ref, None)?.loss)
}

/// The smoothed practical loss (value only). With identity smoothing and
/// `γ = 0` this equals the logistic empirical risk exactly.
pub fn practical_ddro_loss(
    policy: &TabularPolicy,
    data: &UnpairedDataset,
    p_ref: &Mat,
    spec: &LossSpec,
) -> Result<f64, LossError> {
    Ok(empirical_loss_eval(LossForm::Practical, spec, policy, data, p_ref, None)?.loss)
}

/// Analytic gradient of the selected empirical loss over the full dataset.
pub fn loss_gradient(
    form: LossForm,
    spec: &LossSpec,
    policy: &TabularPolicy,
    data: &UnpairedDataset,
    p_ref: &Mat,
) -> Result<LossEval, LossError> {
    empirical_loss_eval(form, spec, policy, data, p_ref, None)
}

/// The exact population ratio-matching loss
/// `Σ_x p_x Σ_y p⁺·Breg_f(g_θ ‖ g*)`, restricted to the support of `p⁺`.
pub fn population_breg_loss(
    policy: &TabularPolicy,
    world: &FiniteWorld,
    generator: &ConvexGenerator,
) -> Result<f64, LossError> {
    Ok(population_breg_eval(policy, world, generator, DEFAULT_CLAMP_EPSILON)?.loss)
}

/// Population loss with analytic gradient and telemetry.
pub fn population_breg_eval(
    policy: &TabularPolicy,
    world: &FiniteWorld,
    generator: &ConvexGenerator,
    clamp_epsilon: f64,
) -> Result<LossEval, LossError> {
    let probs = policy.probs();
    let p_ref = world.reference_distribution();
    let t = world.t();
    let gfield: GThetaField = ratio::g_theta_from_probs(&probs, &p_ref, t, clamp_epsilon);
    let tilde = ratio::tilde_p_from_probs(&probs, &p_ref, t);
    let gstar = ratio::g_star(world);

    let mut loss = 0.0;
    let mut grad = Mat::zeros(probs.rows(), probs.cols());
    let mut clamp_hits = 0usize;
    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;

    for x in 0..probs.rows() {
        let px = world.prompt_dist()[x];
        let mut coeff_sum = 0.0;
        let mut coeffs: Vec<f64> = Vec::with_capacity(probs.cols());
        for y in 0..probs.cols() {
            let (pp, star) = match gstar.value(x, y) {
                Some(star) => (world.p_plus().get(x, y), star),
                None => {
                    coeffs.push(0.0);
                    continue;
                }
            };
            let g = gfield.clamped.get(x, y);
            let is_clamped = g != gfield.raw.get(x, y);
            if is_clamped {
                clamp_hits += 1;
            }
            g_min = g_min.min(g);
            g_max = g_max.max(g);

            loss += px * pp * bregman_divergence(generator, g, star)?;
            // dBreg(g‖g*)/dg = f″(g)·(g − g*).
            let dloss_dg = px * pp * generator.deriv2(g)? * (g - star);
            let coeff = if is_clamped {
                0.0
            } else {
                let r = p_ref.get(x, y) / ((1.0 - t) * probs.get(x, y));
                dloss_dg * (-r)
            };
            coeff_sum += coeff;
            coeffs.push(coeff);
        }
        for (j, &coeff) in coeffs.iter().enumerate() {
            grad.set(x, j, coeff - coeff_sum * probs.get(x, j));
        }
    }

    if !loss.is_finite() || !grad.is_finite() {
        return Err(LossError::NonFinite);
    }
    if g_min > g_max {
        g_min = f64::NAN;
        g_max = f64::NAN;
    }
    Ok(LossEval {
        loss,
        grad,
        telemetry: LossTelemetry {
            clamp_hits,
            g_min,
            g_max,
            tilde_neg_mass: ratio::tilde_negativity_mass(&tilde),
        },
    })
}

/// L2 magnitudes of the per-sample gradient of the smoothed
/// ratio-fitting term, one entry per dataset sample on each side (the γ
/// terms are untouched by `S` and excluded here). Clamped samples yield 0.
///
/// For a fixed sample the gradient under smoothing `S` is the identity
/// gradient scaled by `S′(u) ∈ [0, 1]`, which is the bound this exposes.
pub fn smoothed_term_grad_norms(
    policy: &TabularPolicy,
    data: &UnpairedDataset,
    p_ref: &Mat,
    spec: &LossSpec,
) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    if data.plus_samples.is_empty() || data.minus_samples.is_empty() {
        return Err(LossError::EmptyDatasetSide);
    }
    let probs = policy.probs();
    if !probs.same_shape(p_ref) {
        return Err(LossError::InvalidSpec(
            "policy and reference shapes disagree",
        ));
    }
    let gfield = ratio::g_theta_from_probs(&probs, p_ref, spec.t, spec.clamp_epsilon);
    let row_norm = |x: usize, y: usize| {
        let mut sq = 0.0;
        for j in 0..probs.cols() {
            let indicator = if j == y { 1.0 } else { 0.0 };
            let d = indicator - probs.get(x, j);
            sq += d * d;
        }
        libm::sqrt(sq)
    };
    let magnitude = |&(x, y): &(usize, usize), plus_side: bool| -> Result<f64, LossError> {
        if x >= probs.rows() || y >= probs.cols() {
            return Err(LossError::SampleOutOfRange {
                prompt: x,
                response: y,
            });
        }
        let g = gfield.clamped.get(x, y);
        if g != gfield.raw.get(x, y) {
            return Ok(0.0);
        }
        let dterm_dg = if plus_side {
            spec.smoothing.deriv(libm::log1p(g)) / (1.0 + g)
        } else {
            spec.smoothing.deriv(libm::log1p(1.0 / g)) / (g * (1.0 + g))
        };
        let r = p_ref.get(x, y) / ((1.0 - spec.t) * probs.get(x, y));
        Ok(dterm_dg.abs() * r * row_norm(x, y))
    };
    let plus = data
        .plus_samples
        .iter()
        .map(|s| magnitude(s, true))
        .collect::<Result<Vec<_>, _>>()?;
    let minus = data
        .minus_samples
        .iter()
        .map(|s| magnitude(s, false))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((plus, minus))
}
