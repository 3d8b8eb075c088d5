//! Tabular softmax policies with exact probabilities and analytic gradients.

use alloc::vec::Vec;
use core::fmt;

use crate::mat::Mat;
use crate::world::FiniteWorld;

/// Probabilities are clamped below at this floor before taking logs, since
/// softmax outputs can underflow in long optimization runs.
pub const PROB_LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    NonFiniteLogits,
    IndexOutOfRange { prompt: usize, response: usize },
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::NonFiniteLogits => write!(f, "logits must be finite"),
            PolicyError::IndexOutOfRange { prompt, response } => {
                write!(f, "index ({prompt}, {response}) out of range")
            }
        }
    }
}

impl core::error::Error for PolicyError {}

/// A softmax-parameterized conditional distribution with one free logit per
/// `(prompt, response)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    logits: Mat,
}

impl TabularPolicy {
    pub fn from_logits(logits: Mat) -> Result<Self, PolicyError> {
        if !logits.is_finite() {
            return Err(PolicyError::NonFiniteLogits);
        }
        Ok(Self { logits })
    }

    /// Starts from the reference mixture of `world`, flooring zero-mass
    /// entries at `epsilon_floor` and renormalizing so logs stay finite.
    pub fn init_from_reference(world: &FiniteWorld, epsilon_floor: f64) -> Self {
        let p_ref = world.reference_distribution();
        let mut logits = Mat::zeros(p_ref.rows(), p_ref.cols());
        for x in 0..p_ref.rows() {
            let floored: Vec<f64> = p_ref.row(x).iter().map(|&p| p.max(epsilon_floor)).collect();
            let norm: f64 = floored.iter().sum();
            for (y, &p) in floored.iter().enumerate() {
                logits.set(x, y, libm::log(p / norm));
            }
        }
        Self { logits }
    }

    pub fn n_prompts(&self) -> usize {
        self.logits.rows()
    }

    pub fn n_responses(&self) -> usize {
        self.logits.cols()
    }

    pub fn logits(&self) -> &Mat {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Mat {
        &mut self.logits
    }

    /// Row-wise softmax of the logits. Rows sum to 1; entries are strictly
    /// positive for finite logits.
    pub fn probs(&self) -> Mat {
        let mut out = Mat::zeros(self.n_prompts(), self.n_responses());
        for x in 0..self.n_prompts() {
            let row = self.logits.row(x);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (y, &z) in row.iter().enumerate() {
                let e = libm::exp(z - max);
                out.set(x, y, e);
                sum += e;
            }
            for y in 0..self.n_responses() {
                out.set(x, y, out.get(x, y) / sum);
            }
        }
        out
    }

    /// `∂ log p_θ(y|x) / ∂θ`: zero outside row `x`; on row `x` it is
    /// `onehot(y) − p_θ(·|x)`, so the row sums to 0.
    pub fn grad_log_prob(&self, prompt: usize, response: usize) -> Result<Mat, PolicyError> {
        if prompt >= self.n_prompts() || response >= self.n_responses() {
            return Err(PolicyError::IndexOutOfRange { prompt, response });
        }
        let probs = self.probs();
        let mut grad = Mat::zeros(self.n_prompts(), self.n_responses());
        for y in 0..self.n_responses() {
            let indicator = if y == response { 1.0 } else { 0.0 };
            grad.set(prompt, y, indicator - probs.get(prompt, y));
        }
        Ok(grad)
    }
}

/// Floored log used wherever probabilities enter logarithms.
pub fn safe_log(p: f64) -> f64 {
    libm::log(p.max(PROB_LOG_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_logits_give_uniform() {
        let p = TabularPolicy::from_logits(Mat::zeros(1, 3)).unwrap();
        let probs = p.probs();
        for y in 0..3 {
            assert_abs_diff_eq!(probs.get(0, y), 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        for c in [-40.0, -2.0, 3.5, 100.0] {
            let base = TabularPolicy::from_logits(Mat::from_rows(&[&[0.3, -1.2, 2.0]])).unwrap();
            let shifted = TabularPolicy::from_logits(base.logits().map(|z| z + c)).unwrap();
            for y in 0..3 {
                assert_abs_diff_eq!(
                    base.probs().get(0, y),
                    shifted.probs().get(0, y),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn log_prob_logits_recover_target() {
        // Direct softmax evaluation oracle: softmax(ln p) = p.
        let p = TabularPolicy::from_logits(Mat::from_rows(&[&[
            libm::log(0.5),
            libm::log(0.3),
            libm::log(0.2),
        ]]))
        .unwrap();
        let probs = p.probs();
        assert_abs_diff_eq!(probs.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(probs.get(0, 1), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(probs.get(0, 2), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let m = Mat::from_rows(&[&[0.0, f64::NAN]]);
        assert_eq!(
            TabularPolicy::from_logits(m).unwrap_err(),
            PolicyError::NonFiniteLogits
        );
    }

    #[test]
    fn init_from_reference_matches_mixture() {
        let w = crate::world::example_world_w1();
        let p = TabularPolicy::init_from_reference(&w, 1e-8);
        let probs = p.probs();
        for (y, &expect) in [0.35, 0.30, 0.35].iter().enumerate() {
            assert_abs_diff_eq!(probs.get(0, y), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_floors_zero_mass() {
        let p_plus = Mat::from_rows(&[&[1.0, 0.0]]);
        let p_minus = Mat::from_rows(&[&[1.0, 0.0]]);
        let w =
            crate::world::build_distribution_world(p_plus, p_minus, 0.5, alloc::vec![1.0]).unwrap();
        let p = TabularPolicy::init_from_reference(&w, 1e-8);
        let probs = p.probs();
        assert!(probs.get(0, 1) > 0.0);
        assert_abs_diff_eq!(probs.get(0, 1), 1e-8, epsilon = 1e-10);
        assert_abs_diff_eq!(probs.row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_log_prob_uniform_case() {
        // Frozen from the finite-difference oracle below.
        let p = TabularPolicy::from_logits(Mat::zeros(1, 3)).unwrap();
        let g = p.grad_log_prob(0, 0).unwrap();
        assert_abs_diff_eq!(g.get(0, 0), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(0, 1), -1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.get(0, 2), -1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        // Central finite differences on log p_theta(y|x), step 1e-5.
        let mut rng = crate::rng::stream(99, 1234);
        for _ in 0..50 {
            let rows = 1 + rng.next_below(3);
            let cols = 2 + rng.next_below(4);
            let mut logits = Mat::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    logits.set(r, c, 2.0 * rng.next_normal());
                }
            }
            let policy = TabularPolicy::from_logits(logits.clone()).unwrap();
            let x = rng.next_below(rows);
            let y = rng.next_below(cols);
            let analytic = policy.grad_log_prob(x, y).unwrap();
            let h = 1e-5;
            for r in 0..rows {
                for c in 0..cols {
                    let mut plus = logits.clone();
                    plus.set(r, c, plus.get(r, c) + h);
                    let mut minus = logits.clone();
                    minus.set(r, c, minus.get(r, c) - h);
                    let lp = |m: Mat| {
                        let p = TabularPolicy::from_logits(m).unwrap().probs();
                        safe_log(p.get(x, y))
                    };
                    let fd = (lp(plus) - lp(minus)) / (2.0 * h);
                    let denom = fd.abs().max(1e-6);
                    assert!(
                        (analytic.get(r, c) - fd).abs() / denom <= 1e-6,
                        "fd mismatch at ({r},{c}): {} vs {fd}",
                        analytic.get(r, c)
                    );
                }
            }
        }
    }

    #[test]
    fn grad_rows_sum_to_zero_and_vanish_at_point_mass() {
        let p = TabularPolicy::from_logits(Mat::from_rows(&[&[30.0, 0.0, 0.0]])).unwrap();
        let g = p.grad_log_prob(0, 0).unwrap();
        assert_abs_diff_eq!(g.row(0).iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        // y is the dominant response, so the gradient is ~0.
        assert!(g.row(0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn index_out_of_range_rejected() {
        let p = TabularPolicy::from_logits(Mat::zeros(1, 3)).unwrap();
        assert!(matches!(
            p.grad_log_prob(1, 0).unwrap_err(),
            PolicyError::IndexOutOfRange { .. }
        ));
    }
}
