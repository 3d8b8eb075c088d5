//! Deterministic first-order training with gradient-norm telemetry, plus
//! the finite-difference gradient auditor.

use alloc::vec::Vec;
use core::fmt;

use crate::losses::{
    empirical_loss_eval, population_breg_eval, ConvexGenerator, LossError, LossEval, LossForm,
    LossSpec,
};
use crate::mat::Mat;
use crate::policy::TabularPolicy;
use crate::rng::{self, SplitMix64};
use crate::world::{FiniteWorld, UnpairedDataset};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    InvalidConfig(&'static str),
    /// Loss or gradient became non-finite at the given step.
    NonFinite {
        step: usize,
    },
    Loss(LossError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(msg) => write!(f, "invalid train config: {msg}"),
            TrainError::NonFinite { step } => {
                write!(f, "non-finite loss or gradient at step {step}")
            }
            TrainError::Loss(e) => write!(f, "loss error: {e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    PlainGd,
    /// First/second-moment adaptive steps (β₁ = 0.9, β₂ = 0.999,
    /// ε = 1e-8) with bias correction.
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    FullDataset,
    /// Uniform-with-replacement subsample of the given size per side, per
    /// step.
    Minibatch(usize),
}

/// How gradients map onto the logit table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parameterization {
    /// One free logit per (prompt, response) cell: the realizable model.
    FullTabular,
    /// One shared logit vector across prompts: a deliberately restricted
    /// model for exercising misspecification. Gradients are summed over
    /// prompts and the same update is applied to every row, which is
    /// descent on the tied parameters whenever the init is row-constant.
    SharedAcrossPrompts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub batch: BatchMode,
    pub seed: u64,
    /// Telemetry is recorded at steps 0, k, 2k, ...
    pub telemetry_every: usize,
    pub parameterization: Parameterization,
}

impl TrainConfig {
    /// Plain gradient descent on a full dataset, telemetry every step.
    pub fn plain_gd(learning_rate: f64, steps: usize) -> Self {
        Self {
            learning_rate,
            steps,
            optimizer: OptimizerKind::PlainGd,
            batch: BatchMode::FullDataset,
            seed: 0,
            telemetry_every: 1,
            parameterization: Parameterization::FullTabular,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig("learning_rate must be positive"));
        }
        if self.steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be >= 1"));
        }
        if self.telemetry_every == 0 {
            return Err(TrainError::InvalidConfig("telemetry_every must be >= 1"));
        }
        if let BatchMode::Minibatch(0) = self.batch {
            return Err(TrainError::InvalidConfig("minibatch size must be >= 1"));
        }
        Ok(())
    }
}

/// One telemetry row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// L2 norm of the full objective gradient; exact (not subsampled) in
    /// full-dataset mode, so spikes belong to the objective rather than
    /// the sampling.
    pub grad_norm: f64,
    pub clamp_hits: usize,
    pub g_min: f64,
    pub g_max: f64,
    pub tilde_neg_mass: f64,
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_policy: TabularPolicy,
    /// Filled by callers that time the run; the core loop does not consult
    /// a clock.
    pub wall_ms: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }
}

/// A differentiable training objective over tabular policies.
pub trait Objective {
    /// Loss, gradient, and telemetry; `batch` selects sample indices per
    /// side when minibatching, `None` means the full dataset (or the exact
    /// population expectation).
    fn eval(
        &self,
        policy: &TabularPolicy,
        batch: Option<(&[usize], &[usize])>,
    ) -> Result<LossEval, LossError>;

    /// Dataset sizes `(n⁺, n⁻)`; `None` for population objectives, which
    /// cannot be minibatched.
    fn dataset_sizes(&self) -> Option<(usize, usize)>;
}

/// The exact population ratio-matching loss over a world.
pub struct PopulationObjective<'a> {
    pub world: &'a FiniteWorld,
    pub generator: ConvexGenerator,
    pub clamp_epsilon: f64,
}

impl Objective for PopulationObjective<'_> {
    fn eval(
        &self,
        policy: &TabularPolicy,
        batch: Option<(&[usize], &[usize])>,
    ) -> Result<LossEval, LossError> {
        if batch.is_some() {
            return Err(LossError::InvalidSpec(
                "population objectives cannot be minibatched",
            ));
        }
        population_breg_eval(policy, self.world, &self.generator, self.clamp_epsilon)
    }

    fn dataset_sizes(&self) -> Option<(usize, usize)> {
        None
    }
}

/// An empirical loss over a fixed unpaired dataset.
pub struct EmpiricalObjective<'a> {
    pub form: LossForm,
    pub spec: LossSpec,
    pub data: &'a UnpairedDataset,
    pub p_ref: &'a Mat,
}

impl Objective for EmpiricalObjective<'_> {
    fn eval(
        &self,
        policy: &TabularPolicy,
        batch: Option<(&[usize], &[usize])>,
    ) -> Result<LossEval, LossError> {
        empirical_loss_eval(self.form, &self.spec, policy, self.data, self.p_ref, batch)
    }

    fn dataset_sizes(&self) -> Option<(usize, usize)> {
        Some((self.data.n_plus(), self.data.n_minus()))
    }
}

/// Wraps a closure as an objective, for audits of losses that live outside
/// the trait (per-pair baselines, corrupted-gradient fixtures).
pub struct ClosureObjective<F>
where
    F: Fn(&TabularPolicy) -> Result<LossEval, LossError>,
{
    pub f: F,
}

impl<F> Objective for ClosureObjective<F>
where
    F: Fn(&TabularPolicy) -> Result<LossEval, LossError>,
{
    fn eval(
        &self,
        policy: &TabularPolicy,
        _batch: Option<(&[usize], &[usize])>,
    ) -> Result<LossEval, LossError> {
        (self.f)(policy)
    }

    fn dataset_sizes(&self) -> Option<(usize, usize)> {
        None
    }
}

fn sample_batch(n: usize, size: usize, rng: &mut SplitMix64) -> Vec<usize> {
    (0..size).map(|_| rng.next_below(n)).collect()
}

/// Runs the descent loop. Deterministic given the config seed; aborts with
/// the step index if the loss or gradient leaves the finite range.
pub fn train(
    policy: TabularPolicy,
    objective: &dyn Objective,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let mut policy = policy;
    let mut batch_rng = rng::stream(config.seed, rng::purpose::MINIBATCH);

    let mut moment1: Option<Mat> = None;
    let mut moment2: Option<Mat> = None;
    let mut records = Vec::new();

    for step in 0..config.steps {
        let eval = match (config.batch, objective.dataset_sizes()) {
            (BatchMode::Minibatch(size), Some((n_plus, n_minus))) => {
                let plus = sample_batch(n_plus, size.min(n_plus).max(1), &mut batch_rng);
                let minus = sample_batch(n_minus, size.min(n_minus).max(1), &mut batch_rng);
                objective.eval(&policy, Some((&plus, &minus)))?
            }
            (BatchMode::Minibatch(_), None) => {
                return Err(TrainError::InvalidConfig(
                    "population objectives cannot be minibatched",
                ));
            }
            (BatchMode::FullDataset, _) => objective.eval(&policy, None)?,
        };
        if !eval.loss.is_finite() || !eval.grad.is_finite() {
            return Err(TrainError::NonFinite { step });
        }

        let grad_norm = eval.grad.l2_norm();
        if step % config.telemetry_every == 0 {
            records.push(StepRecord {
                step,
                loss: eval.loss,
                grad_norm,
                clamp_hits: eval.telemetry.clamp_hits,
                g_min: eval.telemetry.g_min,
                g_max: eval.telemetry.g_max,
                tilde_neg_mass: eval.telemetry.tilde_neg_mass,
            });
        }

        let mut grad = eval.grad;
        if config.parameterization == Parameterization::SharedAcrossPrompts {
            project_shared(&mut grad);
        }

        match config.optimizer {
            OptimizerKind::PlainGd => {
                policy.logits_mut().add_scaled(-config.learning_rate, &grad);
            }
            OptimizerKind::AdaptiveMoment => {
                const BETA1: f64 = 0.9;
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let m = moment1.get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
                let v = moment2.get_or_insert_with(|| Mat::zeros(grad.rows(), grad.cols()));
                let t = (step + 1) as f64;
                let bc1 = 1.0 - libm::pow(BETA1, t);
                let bc2 = 1.0 - libm::pow(BETA2, t);
                let logits = policy.logits_mut();
                for i in 0..grad.data().len() {
                    let g = grad.data()[i];
                    let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * g;
                    let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * g * g;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let update = (mi / bc1) / (libm::sqrt(vi / bc2) + EPS);
                    logits.data_mut()[i] -= config.learning_rate * update;
                }
            }
        }
        if !policy.logits().is_finite() {
            return Err(TrainError::NonFinite { step });
        }
    }

    Ok(TrainReport {
        records,
        final_policy: policy,
        wall_ms: 0.0,
    })
}

/// Sums gradient rows and broadcasts the sum, descending on prompt-tied
/// logits.
fn project_shared(grad: &mut Mat) {
    let cols = grad.cols();
    let mut total = alloc::vec![0.0; cols];
    for r in 0..grad.rows() {
        for (c, slot) in total.iter_mut().enumerate() {
            *slot += grad.get(r, c);
        }
    }
    for r in 0..grad.rows() {
        grad.row_mut(r).copy_from_slice(&total);
    }
}

/// Compares the objective's analytic gradient against central finite
/// differences of its loss at `trials` sampled coordinates (all
/// coordinates if `trials` covers them). Returns the worst
/// `|analytic − fd| / max(1e-12, |fd|)`.
pub fn finite_difference_check(
    objective: &dyn Objective,
    policy: &TabularPolicy,
    step: f64,
    trials: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    if step.is_nan() || step <= 0.0 {
        return Err(TrainError::InvalidConfig("step must be positive"));
    }
    let analytic = objective.eval(policy, None)?.grad;
    let rows = policy.logits().rows();
    let cols = policy.logits().cols();
    let n = rows * cols;
    let coords: Vec<usize> = if trials >= n {
        (0..n).collect()
    } else {
        let mut rng = rng::stream(seed, rng::purpose::FD_COORDS);
        (0..trials).map(|_| rng.next_below(n)).collect()
    };

    let mut worst: f64 = 0.0;
    for idx in coords {
        let (r, c) = (idx / cols, idx % cols);
        let probe = |delta: f64| -> Result<f64, TrainError> {
            let mut logits = policy.logits().clone();
            logits.set(r, c, logits.get(r, c) + delta);
            let p = TabularPolicy::from_logits(logits)
                .map_err(|_| TrainError::InvalidConfig("perturbed logits non-finite"))?;
            Ok(objective.eval(&p, None)?.loss)
        };
        let fd = (probe(step)? - probe(-step)?) / (2.0 * step);
        let rel = (analytic.get(r, c) - fd).abs() / fd.abs().max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::SmoothingKind;
    use crate::metrics::l2_error;
    use crate::world::example_world_w1;

    fn w1_population<'a>(world: &'a FiniteWorld) -> PopulationObjective<'a> {
        PopulationObjective {
            world,
            generator: ConvexGenerator::logistic(),
            clamp_epsilon: 1e-6,
        }
    }

    #[test]
    fn population_gd_reaches_optimum() {
        let w = example_world_w1();
        let objective = w1_population(&w);
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let report = train(policy, &objective, &TrainConfig::plain_gd(0.5, 2000)).unwrap();
        let err = l2_error(&report.final_policy, &w);
        assert!(err <= 1e-8, "final error {err}");
    }

    #[test]
    fn zero_steps_rejected() {
        let w = example_world_w1();
        let objective = w1_population(&w);
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let err = train(policy, &objective, &TrainConfig::plain_gd(0.5, 0)).unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(msg) if msg.contains("steps")));
    }

    #[test]
    fn identical_seeds_identical_series() {
        let w = example_world_w1();
        let p_ref = w.reference_distribution();
        let data = w.sample_unpaired(256, 256, 9).unwrap();
        let spec = LossSpec::new(ConvexGenerator::logistic(), w.t()).unwrap();
        let objective = EmpiricalObjective {
            form: LossForm::Practical,
            spec,
            data: &data,
            p_ref: &p_ref,
        };
        let mut config = TrainConfig::plain_gd(0.1, 50);
        config.batch = BatchMode::Minibatch(32);
        config.seed = 1234;
        let run = |cfg: &TrainConfig| {
            let policy = TabularPolicy::init_from_reference(&w, 1e-12);
            train(policy, &objective, cfg).unwrap()
        };
        let a = run(&config);
        let b = run(&config);
        let bits =
            |r: &TrainReport| -> Vec<u64> { r.records.iter().map(|s| s.loss.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.final_policy, b.final_policy);

        config.seed = 99;
        let c = run(&config);
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn population_loss_monotone_at_small_lr() {
        let w = example_world_w1();
        let objective = w1_population(&w);
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let report = train(policy, &objective, &TrainConfig::plain_gd(0.1, 2000)).unwrap();
        for pair in report.records.windows(2) {
            assert!(
                pair[1].loss <= pair[0].loss + 1e-12,
                "loss increased at step {}: {} -> {}",
                pair[1].step,
                pair[0].loss,
                pair[1].loss
            );
        }
    }

    #[test]
    fn telemetry_every_subsamples() {
        let w = example_world_w1();
        let objective = w1_population(&w);
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let mut config = TrainConfig::plain_gd(0.1, 100);
        config.telemetry_every = 10;
        let report = train(policy, &objective, &config).unwrap();
        assert_eq!(report.records.len(), 10);
        assert_eq!(report.records[3].step, 30);
    }

    #[test]
    fn adaptive_moment_decreases_loss() {
        let w = example_world_w1();
        let p_ref = w.reference_distribution();
        let data = w.sample_unpaired(512, 512, 4).unwrap();
        let spec = LossSpec::new(ConvexGenerator::logistic(), w.t()).unwrap();
        let objective = EmpiricalObjective {
            form: LossForm::Bregman,
            spec,
            data: &data,
            p_ref: &p_ref,
        };
        let mut config = TrainConfig::plain_gd(0.01, 400);
        config.optimizer = OptimizerKind::AdaptiveMoment;
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let report = train(policy, &objective, &config).unwrap();
        assert!(report.final_loss() < report.records[0].loss);
    }

    #[test]
    fn shared_parameterization_hits_loss_floor_on_misspecified_world() {
        // Two prompts with different preferred rows cannot be matched by
        // prompt-tied logits, so the loss floor stays positive.
        let p_plus = Mat::from_rows(&[&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7]]);
        let p_minus = Mat::from_rows(&[&[0.1, 0.3, 0.6], &[0.6, 0.3, 0.1]]);
        let w = crate::world::build_distribution_world(p_plus, p_minus, 0.5, alloc::vec![0.5, 0.5])
            .unwrap();
        let objective = w1_population(&w);
        let mut config = TrainConfig::plain_gd(0.3, 3000);
        config.parameterization = Parameterization::SharedAcrossPrompts;
        // Row-constant init keeps the iterates in the tied subspace.
        let policy = TabularPolicy::from_logits(Mat::zeros(2, 3)).unwrap();
        let report = train(policy, &objective, &config).unwrap();
        assert!(report.final_loss() > 1e-3, "floor {}", report.final_loss());
        assert!(l2_error(&report.final_policy, &w) > 1e-3);

        // The full parameterization drives the same world to zero.
        let policy = TabularPolicy::from_logits(Mat::zeros(2, 3)).unwrap();
        let report = train(policy, &objective, &TrainConfig::plain_gd(0.5, 3000)).unwrap();
        assert!(report.final_loss() < 1e-10);
    }

    #[test]
    fn fd_check_passes_for_practical_loss() {
        let w = example_world_w1();
        let p_ref = w.reference_distribution();
        let data = w.sample_unpaired(64, 64, 21).unwrap();
        let spec = LossSpec::new(ConvexGenerator::logistic(), w.t()).unwrap();
        assert_eq!(spec.smoothing, SmoothingKind::LogSig);
        let objective = EmpiricalObjective {
            form: LossForm::Practical,
            spec,
            data: &data,
            p_ref: &p_ref,
        };
        let policy = TabularPolicy::from_logits(Mat::from_rows(&[&[0.4, -0.8, 0.3]])).unwrap();
        let worst = finite_difference_check(&objective, &policy, 1e-5, 3, 7).unwrap();
        assert!(worst <= 1e-6, "max relative error {worst}");
    }

    #[test]
    fn fd_check_near_stationary_point() {
        // At the optimum both analytic and numeric gradients vanish in
        // absolute terms. The relative-error statistic is uninformative
        // there (the central difference picks up ~h² third-order residue,
        // above the 1e-12 denominator floor), so assert absolute agreement.
        let w = example_world_w1();
        let objective = PopulationObjective {
            world: &w,
            generator: ConvexGenerator::quadratic(),
            clamp_epsilon: 1e-6,
        };
        let policy = TabularPolicy::from_logits(Mat::from_rows(&[&[
            libm::log(0.5),
            libm::log(0.3),
            libm::log(0.2),
        ]]))
        .unwrap();
        let eval = objective.eval(&policy, None).unwrap();
        assert!(eval.grad.l2_norm() <= 1e-8, "analytic gradient at optimum");
        let h = 1e-5;
        for c in 0..3 {
            let probe = |delta: f64| {
                let mut logits = policy.logits().clone();
                logits.set(0, c, logits.get(0, c) + delta);
                let p = TabularPolicy::from_logits(logits).unwrap();
                objective.eval(&p, None).unwrap().loss
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            assert!(fd.abs() <= 1e-8, "numeric gradient at optimum: {fd}");
            assert!((eval.grad.get(0, c) - fd).abs() <= 1e-8);
        }
    }

    #[test]
    fn fd_check_flags_corrupted_gradient() {
        // Negative control: a gradient that is off by 10% must be caught.
        let w = example_world_w1();
        let corrupted = ClosureObjective {
            f: |policy: &TabularPolicy| {
                let mut eval =
                    population_breg_eval(policy, &w, &ConvexGenerator::logistic(), 1e-6)?;
                eval.grad = eval.grad.map(|g| 1.1 * g);
                Ok(eval)
            },
        };
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let worst = finite_difference_check(&corrupted, &policy, 1e-5, 3, 5).unwrap();
        assert!(worst > 1e-2, "corruption not detected: {worst}");
    }

    #[test]
    fn non_finite_abort_carries_step() {
        let w = example_world_w1();
        let exploding = ClosureObjective {
            f: |policy: &TabularPolicy| {
                let mut eval =
                    population_breg_eval(policy, &w, &ConvexGenerator::logistic(), 1e-6)?;
                eval.loss = f64::NAN;
                Ok(eval)
            },
        };
        let policy = TabularPolicy::init_from_reference(&w, 1e-12);
        let err = train(policy, &exploding, &TrainConfig::plain_gd(0.1, 10)).unwrap_err();
        assert_eq!(err, TrainError::NonFinite { step: 0 });
    }
}
