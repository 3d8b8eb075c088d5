//! Finite-difference audits of every analytic gradient the workspace
//! ships: the empirical loss family across generators, γ settings and
//! smoothing variants, the population loss, and each per-pair baseline.
//!
//! Each audit draws random (world, policy, data) evaluation points and
//! compares the analytic gradient against central differences of the loss,
//! reporting the worst gradient-vector relative error
//! `‖analytic − fd‖ / max(1e-12, ‖fd‖)` over the points.

use anyhow::Result;
use serde::Serialize;

use ddro_core::baselines::{
    baseline_pair_gradient, baseline_pair_loss, pair_terms, simplified_ddro_pair_gradient,
    simplified_ddro_pair_loss, BaselineMethod,
};
use ddro_core::losses::{
    empirical_loss_eval, population_breg_eval, ConvexGenerator, GeneratorKind, LossForm, LossSpec,
    SmoothingKind,
};
use ddro_core::rng::{self, SplitMix64};
use ddro_core::world::random_world;
use ddro_core::{FiniteWorld, Mat, TabularPolicy, UnpairedDataset};

/// One audited loss with its worst observed relative error.
#[derive(Debug, Clone, Serialize)]
pub struct AuditEntry {
    pub loss: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub fd_step: f64,
    pub entries: Vec<AuditEntry>,
    pub all_pass: bool,
}

struct Point {
    world: FiniteWorld,
    policy: TabularPolicy,
    data: UnpairedDataset,
    triple: (usize, usize, usize),
}

/// A random evaluation point with the model ratio safely inside the
/// generator domain (away from the clamp, where the loss is not
/// differentiable in the clamped coordinate).
fn draw_point(rng: &mut SplitMix64) -> Point {
    loop {
        let n_prompts = 1 + rng.next_below(2);
        let n_responses = 3 + rng.next_below(2);
        let t = 0.3 + 0.4 * rng.next_f64();
        let world = random_world(n_prompts, n_responses, t, rng.next_u64())
            .expect("random worlds are valid");
        let mut logits = Mat::zeros(n_prompts, n_responses);
        for x in 0..n_prompts {
            for y in 0..n_responses {
                logits.set(x, y, 0.7 * rng.next_normal());
            }
        }
        let policy = TabularPolicy::from_logits(logits).expect("finite logits");

        // Keep every ratio well inside (eps, 1/eps) so the FD probe never
        // crosses the clamp kink.
        let p_ref = world.reference_distribution();
        let probs = policy.probs();
        let mut ok = true;
        for x in 0..n_prompts {
            for y in 0..n_responses {
                let g = (p_ref.get(x, y) / probs.get(x, y) - t) / (1.0 - t);
                if !(0.01..=100.0).contains(&g) {
                    ok = false;
                }
            }
        }
        if !ok {
            continue;
        }
        let data = world
            .sample_unpaired(24, 24, rng.next_u64())
            .expect("positive counts");
        let x = rng.next_below(n_prompts);
        let winner = rng.next_below(n_responses);
        let mut loser = rng.next_below(n_responses);
        if loser == winner {
            loser = (loser + 1) % n_responses;
        }
        return Point {
            world,
            policy,
            data,
            triple: (x, winner, loser),
        };
    }
}

fn fd_gradient(
    loss: &dyn Fn(&TabularPolicy) -> Result<f64>,
    policy: &TabularPolicy,
    h: f64,
) -> Result<Mat> {
    let rows = policy.logits().rows();
    let cols = policy.logits().cols();
    let mut grad = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let probe = |delta: f64| -> Result<f64> {
                let mut logits = policy.logits().clone();
                logits.set(r, c, logits.get(r, c) + delta);
                loss(&TabularPolicy::from_logits(logits).expect("finite logits"))
            };
            grad.set(r, c, (probe(h)? - probe(-h)?) / (2.0 * h));
        }
    }
    Ok(grad)
}

fn vector_rel_error(analytic: &Mat, fd: &Mat) -> f64 {
    let mut diff_sq = 0.0;
    let mut fd_sq = 0.0;
    for (a, b) in analytic.data().iter().zip(fd.data().iter()) {
        diff_sq += (a - b) * (a - b);
        fd_sq += b * b;
    }
    diff_sq.sqrt() / fd_sq.sqrt().max(1e-12)
}

fn audit_points(
    name: &str,
    trials: usize,
    fd_step: f64,
    tolerance: f64,
    rng: &mut SplitMix64,
    analytic: &dyn Fn(&Point) -> Result<Mat>,
    loss: &dyn Fn(&Point, &TabularPolicy) -> Result<f64>,
) -> Result<AuditEntry> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let point = draw_point(rng);
        let a = analytic(&point)?;
        let fd = fd_gradient(&|p| loss(&point, p), &point.policy, fd_step)?;
        worst = worst.max(vector_rel_error(&a, &fd));
    }
    Ok(AuditEntry {
        loss: name.to_string(),
        points: trials,
        max_rel_error: worst,
        pass: worst <= tolerance,
    })
}

/// Runs the full audit table.
pub fn run_audits(trials: usize, fd_step: f64, tolerance: f64, seed: u64) -> Result<AuditReport> {
    let mut entries = Vec::new();
    let mut rng = rng::stream(seed, rng::purpose::AUDIT);

    let empirical = |form: LossForm, gen: GeneratorKind, gamma: f64, s: SmoothingKind| {
        move |point: &Point, policy: &TabularPolicy| -> Result<ddro_core::losses::LossEval> {
            let spec = LossSpec::with(
                ConvexGenerator::new(gen),
                point.world.t(),
                gamma,
                s,
                true, // audit the gradient of the full reported loss
                1e-6,
            )?;
            let p_ref = point.world.reference_distribution();
            Ok(empirical_loss_eval(
                form,
                &spec,
                policy,
                &point.data,
                &p_ref,
                None,
            )?)
        }
    };

    // Plain empirical risk, all generators.
    for gen in [
        GeneratorKind::Logistic,
        GeneratorKind::Quadratic,
        GeneratorKind::Kl,
    ] {
        let eval = empirical(LossForm::Bregman, gen, 0.0, SmoothingKind::Identity);
        entries.push(audit_points(
            &format!("breg-{}", gen.name()),
            trials,
            fd_step,
            tolerance,
            &mut rng,
            &|p| Ok(eval(p, &p.policy)?.grad),
            &|p, policy| Ok(eval(p, policy)?.loss),
        )?);
    }

    // Regularized risk at both gamma settings.
    for gamma in [0.0, 0.1] {
        let eval = empirical(
            LossForm::Ddro,
            GeneratorKind::Logistic,
            gamma,
            SmoothingKind::Identity,
        );
        entries.push(audit_points(
            &format!("ddro-logistic(gamma={gamma})"),
            trials,
            fd_step,
            tolerance,
            &mut rng,
            &|p| Ok(eval(p, &p.policy)?.grad),
            &|p, policy| Ok(eval(p, policy)?.loss),
        )?);
    }

    // Smoothed practical loss, every variant, with the KL terms active.
    for s in SmoothingKind::ALL {
        for gamma in [0.0, 0.1] {
            let eval = empirical(LossForm::Practical, GeneratorKind::Logistic, gamma, s);
            entries.push(audit_points(
                &format!("practical({},gamma={gamma})", s.name()),
                trials,
                fd_step,
                tolerance,
                &mut rng,
                &|p| Ok(eval(p, &p.policy)?.grad),
                &|p, policy| Ok(eval(p, policy)?.loss),
            )?);
        }
    }

    // Exact population loss per generator.
    for gen in [
        GeneratorKind::Logistic,
        GeneratorKind::Quadratic,
        GeneratorKind::Kl,
    ] {
        let gen = ConvexGenerator::new(gen);
        entries.push(audit_points(
            &format!("population-{}", gen.kind().name()),
            trials,
            fd_step,
            tolerance,
            &mut rng,
            &|p| Ok(population_breg_eval(&p.policy, &p.world, &gen, 1e-6)?.grad),
            &|p, policy| Ok(population_breg_eval(policy, &p.world, &gen, 1e-6)?.loss),
        )?);
    }

    // Per-pair baselines.
    for method in BaselineMethod::ALL {
        let delta = if method == BaselineMethod::Bco {
            0.1
        } else {
            0.0
        };
        entries.push(audit_points(
            method.name(),
            trials,
            fd_step,
            tolerance,
            &mut rng,
            &|p| {
                let p_ref = p.world.reference_distribution();
                Ok(baseline_pair_gradient(
                    method, &p.policy, &p_ref, p.triple, delta,
                )?)
            },
            &|p, policy| {
                let p_ref = p.world.reference_distribution();
                let terms =
                    pair_terms(policy, &p_ref, p.world.t(), p.triple).or_else(|e| match e {
                        ddro_core::baselines::BaselineError::TildeNegative { .. } => {
                            // b~ is unused by these losses.
                            Ok(ddro_core::baselines::PairTerms {
                                a: fallback_log_ratio(policy, &p_ref, p.triple.0, p.triple.1),
                                b: fallback_log_ratio(policy, &p_ref, p.triple.0, p.triple.2),
                                b_tilde: f64::NAN,
                            })
                        }
                        other => Err(other),
                    })?;
                Ok(baseline_pair_loss(method, &terms, delta))
            },
        )?);
    }

    // The simplified per-pair loss, differentiating through b~. Ratios in
    // the audit band keep p~ positive at the loser.
    entries.push(audit_points(
        "simplified-ddro",
        trials,
        fd_step,
        tolerance,
        &mut rng,
        &|p| {
            let p_ref = p.world.reference_distribution();
            Ok(simplified_ddro_pair_gradient(
                &p.policy,
                &p_ref,
                p.world.t(),
                p.triple,
            )?)
        },
        &|p, policy| {
            let p_ref = p.world.reference_distribution();
            let terms = pair_terms(policy, &p_ref, p.world.t(), p.triple)?;
            Ok(simplified_ddro_pair_loss(&terms))
        },
    )?);

    let all_pass = entries.iter().all(|e| e.pass);
    Ok(AuditReport {
        tolerance,
        fd_step,
        entries,
        all_pass,
    })
}

fn fallback_log_ratio(policy: &TabularPolicy, p_ref: &Mat, x: usize, y: usize) -> f64 {
    ddro_core::policy::safe_log(policy.probs().get(x, y))
        - ddro_core::policy::safe_log(p_ref.get(x, y))
}
