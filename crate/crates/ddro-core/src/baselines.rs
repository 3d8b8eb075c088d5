//! Per-pair preference losses in the unified log-ratio view, and
//! Bradley-Terry reward fitting.
//!
//! For a comparison `(x, y⁺, y⁻)` the log-density-ratio terms are
//!
//! ```text
//! a  = log( p_θ(y⁺|x) / p_ref(y⁺|x) )
//! b  = log( p_θ(y⁻|x) / p_ref(y⁻|x) )
//! b̃  = log( p̃_θ(y⁻|x) / p_ref(y⁻|x) )
//! ```
//!
//! Each baseline is a scalar function of `(a, b)`; the simplified density
//! ratio objective at `t = 1/2, γ = 0` is `2·log 2 − a − b̃`, which raises
//! the fit of `p̃_θ` on unpreferred data instead of pushing `b` down.
//!
//! Bradley-Terry fitting minimizes the comparison negative log-likelihood
//! `−log σ(r_w − r_l)` by full-batch gradient descent, with the flat shift
//! direction removed by pinning the first reward to 0. An expected-NLL
//! mode consumes exact pairwise probabilities instead of samples so model
//! misfit can be separated from Monte Carlo noise.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::losses::sigmoid;
use crate::mat::Mat;
use crate::policy::{safe_log, TabularPolicy};
use crate::world::PairwiseWorld;

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineError {
    /// `p̃_θ` was nonpositive at the loser, so `b̃` is undefined. Carries
    /// the raw value.
    TildeNegative {
        value: f64,
    },
    EmptyData,
    IndexOutOfRange {
        prompt: usize,
        response: usize,
    },
    /// The fit produced a non-finite loss at the given step.
    Divergence {
        step: usize,
    },
    InvalidConfig(&'static str),
}

impl fmt::Display for BaselineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineError::TildeNegative { value } => {
                write!(f, "tilde-negativity: p~ = {value} at the loser")
            }
            BaselineError::EmptyData => write!(f, "comparison data must be nonempty"),
            BaselineError::IndexOutOfRange { prompt, response } => {
                write!(f, "index ({prompt}, {response}) out of range")
            }
            BaselineError::Divergence { step } => {
                write!(f, "non-finite loss at step {step}")
            }
            BaselineError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl core::error::Error for BaselineError {}

/// Log-density-ratio terms for one comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTerms {
    pub a: f64,
    pub b: f64,
    pub b_tilde: f64,
}

/// Computes `(a, b, b̃)` for the triple `(x, y⁺, y⁻)`.
pub fn pair_terms(
    policy: &TabularPolicy,
    p_ref: &Mat,
    t: f64,
    triple: (usize, usize, usize),
) -> Result<PairTerms, BaselineError> {
    let (x, winner, loser) = triple;
    let probs = policy.probs();
    for &(px, py) in &[(x, winner), (x, loser)] {
        if px >= probs.rows() || py >= probs.cols() {
            return Err(BaselineError::IndexOutOfRange {
                prompt: px,
                response: py,
            });
        }
    }
    let a = safe_log(probs.get(x, winner)) - safe_log(p_ref.get(x, winner));
    let b = safe_log(probs.get(x, loser)) - safe_log(p_ref.get(x, loser));
    let tilde_loser = (p_ref.get(x, loser) - t * probs.get(x, loser)) / (1.0 - t);
    if tilde_loser <= 0.0 {
        return Err(BaselineError::TildeNegative { value: tilde_loser });
    }
    let b_tilde = libm::log(tilde_loser) - safe_log(p_ref.get(x, loser));
    Ok(PairTerms { a, b, b_tilde })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Dpo,
    Ipo,
    Sppo,
    Kto,
    Bco,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 5] = [
        BaselineMethod::Dpo,
        BaselineMethod::Ipo,
        BaselineMethod::Sppo,
        BaselineMethod::Kto,
        BaselineMethod::Bco,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Dpo => "dpo",
            BaselineMethod::Ipo => "ipo",
            BaselineMethod::Sppo => "sppo",
            BaselineMethod::Kto => "kto",
            BaselineMethod::Bco => "bco",
        }
    }
}

/// The per-pair baseline losses, regularization terms omitted. `delta`
/// only affects BCO.
pub fn baseline_pair_loss(method: BaselineMethod, terms: &PairTerms, delta: f64) -> f64 {
    let (a, b) = (terms.a, terms.b);
    match method {
        BaselineMethod::Dpo => -libm::log(sigmoid(a - b)),
        BaselineMethod::Ipo => (a - b - 1.0) * (a - b - 1.0),
        BaselineMethod::Sppo => (a - 0.5) * (a - 0.5) + (-b - 0.5) * (-b - 0.5),
        BaselineMethod::Kto => sigmoid(-a) + sigmoid(b),
        BaselineMethod::Bco => -libm::log(sigmoid(a - delta)) - libm::log(sigmoid(-b - delta)),
    }
}

/// `2·log 2 − a − b̃`, the simplified per-pair density ratio loss with its
/// constant made explicit.
pub fn simplified_ddro_pair_loss(terms: &PairTerms) -> f64 {
    2.0 * core::f64::consts::LN_2 - terms.a - terms.b_tilde
}

/// Analytic gradient of a baseline pair loss over the policy logits,
/// chained through `a` and `b`.
pub fn baseline_pair_gradient(
    method: BaselineMethod,
    policy: &TabularPolicy,
    p_ref: &Mat,
    triple: (usize, usize, usize),
    delta: f64,
) -> Result<Mat, BaselineError> {
    // t is irrelevant for the (a, b)-only baselines; any valid value works
    // for computing the terms.
    let terms = pair_terms(policy, p_ref, 0.5, triple).or_else(|e| match e {
        // b~ may be undefined for these losses without harm.
        BaselineError::TildeNegative { .. } => {
            let (x, w, l) = triple;
            let probs = policy.probs();
            Ok(PairTerms {
                a: safe_log(probs.get(x, w)) - safe_log(p_ref.get(x, w)),
                b: safe_log(probs.get(x, l)) - safe_log(p_ref.get(x, l)),
                b_tilde: f64::NAN,
            })
        }
        other => Err(other),
    })?;
    let (a, b) = (terms.a, terms.b);
    let (dl_da, dl_db) = match method {
        BaselineMethod::Dpo => (sigmoid(a - b) - 1.0, 1.0 - sigmoid(a - b)),
        BaselineMethod::Ipo => (2.0 * (a - b - 1.0), -2.0 * (a - b - 1.0)),
        BaselineMethod::Sppo => (2.0 * (a - 0.5), 2.0 * (b + 0.5)),
        BaselineMethod::Kto => {
            let sa = sigmoid(-a);
            let sb = sigmoid(b);
            (-sa * (1.0 - sa), sb * (1.0 - sb))
        }
        BaselineMethod::Bco => (sigmoid(a - delta) - 1.0, sigmoid(b + delta)),
    };
    let (x, winner, loser) = triple;
    let grad_a = policy
        .grad_log_prob(x, winner)
        .map_err(|_| BaselineError::IndexOutOfRange {
            prompt: x,
            response: winner,
        })?;
    let grad_b = policy
        .grad_log_prob(x, loser)
        .map_err(|_| BaselineError::IndexOutOfRange {
            prompt: x,
            response: loser,
        })?;
    let mut grad = Mat::zeros(grad_a.rows(), grad_a.cols());
    grad.add_scaled(dl_da, &grad_a);
    grad.add_scaled(dl_db, &grad_b);
    Ok(grad)
}

/// Analytic gradient of the simplified pair loss, chained through `a`
/// and `b̃`.
pub fn simplified_ddro_pair_gradient(
    policy: &TabularPolicy,
    p_ref: &Mat,
    t: f64,
    triple: (usize, usize, usize),
) -> Result<Mat, BaselineError> {
    let (x, winner, loser) = triple;
    // Surfaces tilde-negativity before any gradient work.
    pair_terms(policy, p_ref, t, triple)?;
    let probs = policy.probs();
    let grad_a = policy
        .grad_log_prob(x, winner)
        .map_err(|_| BaselineError::IndexOutOfRange {
            prompt: x,
            response: winner,
        })?;
    let mut grad = Mat::zeros(grad_a.rows(), grad_a.cols());
    grad.add_scaled(-1.0, &grad_a);
    // db~/dθ_{x,j} = −t/((1−t)·p̃(y⁻))·p_θ(y⁻)·(δ_{y⁻,j} − p_θ(j)).
    let p_loser = probs.get(x, loser);
    let tilde_loser = (p_ref.get(x, loser) - t * p_loser) / (1.0 - t);
    let scale = -t / (1.0 - t) / tilde_loser * p_loser;
    for j in 0..probs.cols() {
        let indicator = if j == loser { 1.0 } else { 0.0 };
        let db_tilde = scale * (indicator - probs.get(x, j));
        grad.set(x, j, grad.get(x, j) - db_tilde);
    }
    Ok(grad)
}

/// Per-response rewards, gauge-fixed so the first reward is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BtRewards {
    pub rewards: Vec<f64>,
}

impl BtRewards {
    fn gauge_fixed(mut rewards: Vec<f64>) -> Self {
        let r0 = rewards[0];
        for r in rewards.iter_mut() {
            *r -= r0;
        }
        Self { rewards }
    }

    /// Largest pairwise reward gap; 0 means all rewards are equal.
    pub fn max_pairwise_gap(&self) -> f64 {
        let max = self
            .rewards
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let min = self.rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Result of a Bradley-Terry fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BtFit {
    pub rewards: BtRewards,
    pub final_nll: f64,
    pub final_grad_norm: f64,
}

/// Mean comparison NLL `−log σ(r_w − r_l)` over sampled data.
pub fn bt_nll(rewards: &[f64], data: &[(usize, usize)]) -> f64 {
    let n = data.len() as f64;
    data.iter()
        .map(|&(w, l)| -libm::log(sigmoid(rewards[w] - rewards[l])))
        .sum::<f64>()
        / n
}

/// Gradient of [`bt_nll`] in the rewards.
pub fn bt_nll_gradient(rewards: &[f64], data: &[(usize, usize)]) -> Vec<f64> {
    let mut grad = vec![0.0; rewards.len()];
    let n = data.len() as f64;
    for &(w, l) in data {
        let d = sigmoid(rewards[w] - rewards[l]) - 1.0;
        grad[w] += d / n;
        grad[l] -= d / n;
    }
    grad
}

/// Population NLL under uniform unordered-pair selection, computed from
/// the exact pairwise probabilities.
pub fn bt_expected_nll(world: &PairwiseWorld, rewards: &[f64]) -> f64 {
    let m = world.n_responses();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = rewards[i] - rewards[j];
            total += world.pref(i, j) * -libm::log(sigmoid(d))
                + world.pref(j, i) * -libm::log(sigmoid(-d));
            pairs += 1.0;
        }
    }
    total / pairs
}

fn bt_expected_nll_gradient(world: &PairwiseWorld, rewards: &[f64]) -> Vec<f64> {
    let m = world.n_responses();
    let mut grad = vec![0.0; m];
    let pairs = (m * (m - 1) / 2) as f64;
    for i in 0..m {
        for j in (i + 1)..m {
            let d = rewards[i] - rewards[j];
            // d/dd of the pair term.
            let dd = world.pref(i, j) * (sigmoid(d) - 1.0) + world.pref(j, i) * sigmoid(d);
            grad[i] += dd / pairs;
            grad[j] -= dd / pairs;
        }
    }
    grad
}

fn descend(
    mut rewards: Vec<f64>,
    lr: f64,
    steps: usize,
    nll: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<BtFit, BaselineError> {
    if lr <= 0.0 {
        return Err(BaselineError::InvalidConfig(
            "learning rate must be positive",
        ));
    }
    if steps == 0 {
        return Err(BaselineError::InvalidConfig("steps must be >= 1"));
    }
    for step in 0..steps {
        let loss = nll(&rewards);
        if !loss.is_finite() {
            return Err(BaselineError::Divergence { step });
        }
        let grad = gradient(&rewards);
        for (r, g) in rewards.iter_mut().zip(grad.iter()) {
            *r -= lr * g;
        }
    }
    let final_nll = nll(&rewards);
    if !final_nll.is_finite() {
        return Err(BaselineError::Divergence { step: steps });
    }
    let grad = gradient(&rewards);
    let final_grad_norm = libm::sqrt(grad.iter().map(|g| g * g).sum());
    Ok(BtFit {
        rewards: BtRewards::gauge_fixed(rewards),
        final_nll,
        final_grad_norm,
    })
}

/// Full-batch gradient descent on the sampled comparison NLL, starting
/// from zero rewards.
///
/// The NLL depends on the data only through per-direction counts, so the
/// comparisons are compressed up front and each step costs O(pairs).
pub fn bt_fit(
    data: &[(usize, usize)],
    n_responses: usize,
    lr: f64,
    steps: usize,
) -> Result<BtFit, BaselineError> {
    if data.is_empty() {
        return Err(BaselineError::EmptyData);
    }
    let mut counts = Mat::zeros(n_responses, n_responses);
    for &(w, l) in data {
        if w >= n_responses || l >= n_responses {
            return Err(BaselineError::IndexOutOfRange {
                prompt: 0,
                response: w.max(l),
            });
        }
        counts.set(w, l, counts.get(w, l) + 1.0);
    }
    let n = data.len() as f64;
    let nll = |r: &[f64]| -> f64 {
        let mut total = 0.0;
        for w in 0..n_responses {
            for l in 0..n_responses {
                let c = counts.get(w, l);
                if c > 0.0 {
                    total += c * -libm::log(sigmoid(r[w] - r[l]));
                }
            }
        }
        total / n
    };
    let gradient = |r: &[f64]| -> Vec<f64> {
        let mut grad = vec![0.0; n_responses];
        for w in 0..n_responses {
            for l in 0..n_responses {
                let c = counts.get(w, l);
                if c > 0.0 {
                    let d = sigmoid(r[w] - r[l]) - 1.0;
                    grad[w] += c * d / n;
                    grad[l] -= c * d / n;
                }
            }
        }
        grad
    };
    descend(vec![0.0; n_responses], lr, steps, nll, gradient)
}

/// Gradient descent on the exact population NLL, starting from zero
/// rewards.
pub fn bt_fit_expected(
    world: &PairwiseWorld,
    lr: f64,
    steps: usize,
) -> Result<BtFit, BaselineError> {
    bt_fit_expected_from(world, &vec![0.0; world.n_responses()], lr, steps)
}

/// As [`bt_fit_expected`] from an explicit starting point, so convergence
/// is observable from deliberately unequal inits.
pub fn bt_fit_expected_from(
    world: &PairwiseWorld,
    init: &[f64],
    lr: f64,
    steps: usize,
) -> Result<BtFit, BaselineError> {
    if init.len() != world.n_responses() {
        return Err(BaselineError::InvalidConfig(
            "init length must match response count",
        ));
    }
    descend(
        init.to_vec(),
        lr,
        steps,
        |r| bt_expected_nll(world, r),
        |r| bt_expected_nll_gradient(world, r),
    )
}

/// `σ(r_i − r_j)` for all response pairs.
pub fn bt_predicted_probs(rewards: &BtRewards) -> Mat {
    let m = rewards.rewards.len();
    let mut out = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            out.set(i, j, sigmoid(rewards.rewards[i] - rewards.rewards[j]));
        }
    }
    out
}
