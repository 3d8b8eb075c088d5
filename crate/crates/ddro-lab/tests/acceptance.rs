//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured quantities (visible under `--nocapture`).
//!
//! Run with: `cargo test -p ddro-lab --test acceptance -- --nocapture`

use std::time::Instant;

use ddro_core::baselines::{
    bt_fit_expected_from, bt_predicted_probs, pair_terms, simplified_ddro_pair_loss,
};
use ddro_core::losses::{
    bregman_divergence, empirical_breg_loss, empirical_loss_eval, ConvexGenerator, GeneratorKind,
    LossForm, LossSpec, SmoothingKind, DEFAULT_CLAMP_EPSILON,
};
use ddro_core::metrics::{error_bound_check, l2_error};
use ddro_core::optimizer::{train, PopulationObjective, TrainConfig};
use ddro_core::rng::{self, SplitMix64};
use ddro_core::world::{build_cyclic_world, example_world_w1, random_world};
use ddro_core::{FiniteWorld, Mat, TabularPolicy, UnpairedDataset};
use ddro_lab::audit::run_audits;
use ddro_lab::config::SweepEffective;
use ddro_lab::runs::{run_ablate, run_sweep};

fn random_point(rng: &mut SplitMix64, t_range: (f64, f64)) -> (FiniteWorld, TabularPolicy) {
    let world = random_world(
        1 + rng.next_below(2),
        3 + rng.next_below(2),
        t_range.0 + (t_range.1 - t_range.0) * rng.next_f64(),
        rng.next_u64(),
    )
    .expect("random worlds are valid");
    let mut logits = Mat::zeros(world.n_prompts(), world.n_responses());
    for x in 0..world.n_prompts() {
        for y in 0..world.n_responses() {
            logits.set(x, y, 0.7 * rng.next_normal());
        }
    }
    (world, TabularPolicy::from_logits(logits).unwrap())
}

/// Criterion 1: for 10³ random ratios in (1e-3, 1e3), the generic
/// empirical terms with the logistic generator equal the closed
/// `log(1+g)` / `log(1+g⁻¹)` forms within 1e-10 relative error.
#[test]
fn criterion_01_logistic_reduction_identity() {
    let started = Instant::now();
    let gen = ConvexGenerator::logistic();
    let mut rng = rng::stream(101, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let g = 10f64.powf(-3.0 + 6.0 * rng.next_f64());
        let plus_generic = -gen.eval(g).unwrap() + gen.deriv(g).unwrap() * g;
        let plus_closed = g.ln_1p();
        worst = worst.max((plus_generic - plus_closed).abs() / plus_closed.abs());
        let minus_generic = -gen.deriv(g).unwrap();
        let minus_closed = (1.0 / g).ln_1p();
        worst = worst.max((minus_generic - minus_closed).abs() / minus_closed.abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(worst <= 1e-10, "max relative error {worst}");
    assert!(elapsed < 1.0, "runtime {elapsed}s");
    println!(
        "criterion 1 PASS: logistic reduction identity (max rel err {worst:.3e}, {elapsed:.3}s)"
    );
}

/// Criterion 2: plain GD on the exact population loss over W1 reaches
/// L²(p⁺) error ≤ 1e-8 within 5000 steps.
#[test]
fn criterion_02_population_recovery() {
    let started = Instant::now();
    let world = example_world_w1();
    let objective = PopulationObjective {
        world: &world,
        generator: ConvexGenerator::logistic(),
        clamp_epsilon: DEFAULT_CLAMP_EPSILON,
    };
    let policy = TabularPolicy::init_from_reference(&world, 1e-12);
    let report = train(policy, &objective, &TrainConfig::plain_gd(0.5, 5000)).unwrap();
    let err = l2_error(&report.final_policy, &world);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(err <= 1e-8, "final L2(p+) error {err}");
    assert!(elapsed < 5.0, "runtime {elapsed}s");
    println!("criterion 2 PASS: population recovery (L2 error {err:.3e}, {elapsed:.3}s)");
}

/// Criterion 3: error-versus-n slope on W1 with n in {1e2..1e5}, 10 seeds,
/// lands in [−0.7, −0.3] with r² ≥ 0.9.
#[test]
fn criterion_03_scaling_law() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let world_path = dir.path().join("w1.json");
    ddro_lab::files::write_world(&world_path, &example_world_w1()).unwrap();
    let cfg = SweepEffective {
        world: world_path,
        grid: vec![100, 1000, 10_000, 100_000],
        seeds: 10,
        seed: 1,
        lr: 0.5,
        steps: 3000,
        jobs: 4,
        loss: "breg-logistic".to_string(),
        out_dir: dir.path().join("sweep"),
    };
    let artifacts = run_sweep(&cfg).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let (slope, r2) = (artifacts.fit.slope, artifacts.fit.r_squared);
    assert!((-0.7..=-0.3).contains(&slope), "slope {slope}");
    assert!(r2 >= 0.9, "r2 {r2}");
    assert!(elapsed < 120.0, "runtime {elapsed}s");
    println!("criterion 3 PASS: scaling law (slope {slope:.4}, r2 {r2:.4}, {elapsed:.1}s)");
}

/// Criterion 4: Bradley-Terry fitting on the exact cyclic world at
/// t_pref = 0.8 collapses to equal rewards and predicts 1/2.
#[test]
fn criterion_04_bt_counterexample() {
    let started = Instant::now();
    let world = build_cyclic_world(0.8).unwrap();
    // Deliberately unequal start; the zero init is already stationary.
    let fit = bt_fit_expected_from(&world, &[0.9, -0.4, 0.2], 1.0, 4000).unwrap();
    let gap = fit.rewards.max_pairwise_gap();
    let predicted = bt_predicted_probs(&fit.rewards);
    let mut worst_prob: f64 = 0.0;
    for &(i, j) in &[(0usize, 1usize), (1, 2), (2, 0)] {
        worst_prob = worst_prob.max((predicted.get(i, j) - 0.5).abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(gap <= 1e-6, "reward gap {gap}");
    assert!(
        worst_prob <= 1e-6,
        "predicted deviates from 1/2 by {worst_prob}"
    );
    let residual = (0.5f64 - 0.8).abs();
    assert!((residual - 0.3).abs() <= 1e-12);
    assert!(elapsed < 1.0, "runtime {elapsed}s");
    println!(
        "criterion 4 PASS: cyclic preferences fit to sigma(0)=1/2 (gap {gap:.2e}, residual {residual:.3}, {elapsed:.3}s)"
    );
}

/// Criterion 5: analytic gradients of every shipped loss match central
/// finite differences (step 1e-5) within 1e-6 at 20 random points each.
#[test]
fn criterion_05_gradient_audit() {
    let started = Instant::now();
    let report = run_audits(20, 1e-5, 1e-6, 505).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let failing: Vec<_> = report.entries.iter().filter(|e| !e.pass).collect();
    assert!(failing.is_empty(), "failing audits: {failing:?}");
    assert!(elapsed < 10.0, "runtime {elapsed}s");
    let worst = report
        .entries
        .iter()
        .map(|e| e.max_rel_error)
        .fold(0.0f64, f64::max);
    println!(
        "criterion 5 PASS: {} losses audited, worst rel err {worst:.3e} ({elapsed:.2}s)",
        report.entries.len()
    );
}

/// Criterion 6: the distribution-error bound holds on 100 randomized
/// (world, policy, generator) configurations with lhs and rhs computed
/// independently.
#[test]
fn criterion_06_error_bound_audit() {
    let started = Instant::now();
    let mut rng = rng::stream(606, 2);
    let mut checked = 0;
    let mut min_slack = f64::INFINITY;
    while checked < 100 {
        let (world, policy) = random_point(&mut rng, (0.2, 0.8));
        let gen = ConvexGenerator::new(
            [
                GeneratorKind::Logistic,
                GeneratorKind::Quadratic,
                GeneratorKind::Kl,
            ][checked % 3],
        );
        // Stay inside the generator domain: the bound concerns the true
        // ratio of the policy, so clamped configurations are out of scope.
        let p_ref = world.reference_distribution();
        let probs = policy.probs();
        let t = world.t();
        let in_domain = (0..world.n_prompts()).all(|x| {
            (0..world.n_responses()).all(|y| {
                let g = (p_ref.get(x, y) / probs.get(x, y) - t) / (1.0 - t);
                (DEFAULT_CLAMP_EPSILON..=1.0 / DEFAULT_CLAMP_EPSILON).contains(&g)
            })
        });
        if !in_domain {
            continue;
        }
        let check = error_bound_check(&policy, &world, &gen);
        assert!(
            check.holds,
            "bound violated at config {checked}: lhs {} rhs {}",
            check.lhs, check.rhs
        );
        min_slack = min_slack.min(check.rhs - check.lhs);
        checked += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime {elapsed}s");
    println!(
        "criterion 6 PASS: error bound held on 100 configs (min slack {min_slack:.3e}, {elapsed:.2}s)"
    );
}

/// Criterion 7: Bregman nonnegativity, zero-iff-equal, and affine-shift
/// invariance over 10⁴ random in-domain pairs for all three generators.
#[test]
fn criterion_07_bregman_properties() {
    let started = Instant::now();
    let mut rng = rng::stream(707, 3);
    for kind in [
        GeneratorKind::Logistic,
        GeneratorKind::Quadratic,
        GeneratorKind::Kl,
    ] {
        let gen = ConvexGenerator::new(kind);
        for i in 0..10_000 {
            let g = 10f64.powf(-2.0 + 4.0 * rng.next_f64());
            let g_tilde = if i % 16 == 0 {
                g
            } else {
                10f64.powf(-2.0 + 4.0 * rng.next_f64())
            };
            let value = bregman_divergence(&gen, g, g_tilde).unwrap();
            assert!(value >= 0.0, "{kind:?}: negative divergence {value}");
            if (g - g_tilde).abs() <= 1e-9 {
                assert!(value <= 1e-12, "{kind:?}: {value} for near-equal pair");
            }
            if value <= 1e-12 {
                assert!(
                    (g - g_tilde).abs() <= 1e-9,
                    "{kind:?}: zero at distinct pair"
                );
            }
            // Affine shift u ↦ f(u) + a·u + b cancels in the divergence.
            let (a, b) = (2.0 * rng.next_normal(), 2.0 * rng.next_normal());
            let shifted = (gen.eval(g_tilde).unwrap() + a * g_tilde + b)
                - (gen.eval(g).unwrap() + a * g + b)
                - (gen.deriv(g).unwrap() + a) * (g_tilde - g);
            assert!(
                (shifted.max(0.0) - value).abs() <= 1e-10,
                "{kind:?}: affine shift changed the divergence"
            );
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed}s");
    println!("criterion 7 PASS: Bregman property suite on 3x10^4 pairs ({elapsed:.2}s)");
}

/// Criterion 8: per-sample gradient magnitude under logsig smoothing never
/// exceeds identity, on 10³ random configurations and at every logged
/// step of a paired live run.
#[test]
fn criterion_08_smoothing_gradient_bound() {
    let started = Instant::now();
    let mut rng = rng::stream(808, 4);
    for _ in 0..1000 {
        let (world, policy) = random_point(&mut rng, (0.3, 0.7));
        let data = world.sample_unpaired(8, 8, rng.next_u64()).unwrap();
        let p_ref = world.reference_distribution();
        let spec_for = |s: SmoothingKind| {
            LossSpec::with(ConvexGenerator::logistic(), world.t(), 0.0, s, false, 1e-6).unwrap()
        };
        let (ip, im) = ddro_core::losses::smoothed_term_grad_norms(
            &policy,
            &data,
            &p_ref,
            &spec_for(SmoothingKind::Identity),
        )
        .unwrap();
        let (sp, sm) = ddro_core::losses::smoothed_term_grad_norms(
            &policy,
            &data,
            &p_ref,
            &spec_for(SmoothingKind::LogSig),
        )
        .unwrap();
        for (s, i) in sp.iter().zip(ip.iter()).chain(sm.iter().zip(im.iter())) {
            assert!(s <= &(i + 1e-14), "logsig {s} exceeded identity {i}");
        }
    }

    // Live paired run: the driver asserts the bound at every logged step.
    let dir = tempfile::tempdir().unwrap();
    let world_path = dir.path().join("w1.json");
    ddro_lab::files::write_world(&world_path, &example_world_w1()).unwrap();
    let summary = run_ablate(&ddro_lab::config::AblateEffective {
        world: world_path,
        n: 512,
        gamma: 0.0,
        lr: 0.5,
        steps: 100,
        seed: 8,
        telemetry_every: 1,
        out_dir: dir.path().join("ablate"),
    })
    .unwrap();
    assert!(summary.bound_holds);
    assert!(summary.max_ratio_vs_identity <= 1.0 + 1e-12);

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime {elapsed}s");
    println!(
        "criterion 8 PASS: smoothing bound on 10^3 configs + live run (max live ratio {:.4}, {elapsed:.2}s)",
        summary.max_ratio_vs_identity
    );
}

/// Criterion 9: at t = 1/2, γ = 0, the per-pair simplified loss equals the
/// singleton-dataset logistic empirical risk within 1e-12 on 100 random
/// configurations where b̃ is defined.
#[test]
fn criterion_09_simplified_identity() {
    let started = Instant::now();
    let mut rng = rng::stream(909, 5);
    let mut checked = 0;
    while checked < 100 {
        let (world, policy) = random_point(&mut rng, (0.5, 0.5));
        let x = rng.next_below(world.n_prompts());
        let winner = rng.next_below(world.n_responses());
        let mut loser = rng.next_below(world.n_responses());
        if loser == winner {
            loser = (loser + 1) % world.n_responses();
        }
        let p_ref = world.reference_distribution();
        let terms = match pair_terms(&policy, &p_ref, 0.5, (x, winner, loser)) {
            Ok(terms) => terms,
            Err(_) => continue, // b~ undefined here; out of the criterion's scope
        };
        // Independent route: the generic-generator empirical risk on the
        // singleton pair. Requires the winner's ratio in-domain too.
        let probs = policy.probs();
        let g_winner = (p_ref.get(x, winner) / probs.get(x, winner) - 0.5) / 0.5;
        if g_winner <= DEFAULT_CLAMP_EPSILON {
            continue;
        }
        let data = UnpairedDataset {
            plus_samples: vec![(x, winner)],
            minus_samples: vec![(x, loser)],
        };
        let generic =
            empirical_breg_loss(&policy, &data, &p_ref, &ConvexGenerator::logistic(), 0.5).unwrap();
        let simplified = simplified_ddro_pair_loss(&terms);
        assert!(
            (generic - simplified).abs() <= 1e-12,
            "config {checked}: generic {generic} vs simplified {simplified}"
        );
        checked += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "runtime {elapsed}s");
    println!("criterion 9 PASS: simplified per-pair identity on 100 configs ({elapsed:.3}s)");
}

/// Criterion 10: rerunning the sweep with an identical config produces
/// byte-identical CSV output.
#[test]
fn criterion_10_sweep_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let world_path = dir.path().join("w1.json");
    ddro_lab::files::write_world(&world_path, &example_world_w1()).unwrap();
    let cfg_for = |out: &str| SweepEffective {
        world: world_path.clone(),
        grid: vec![100, 1000, 10_000],
        seeds: 4,
        seed: 10,
        lr: 0.5,
        steps: 1000,
        jobs: 3,
        loss: "breg-logistic".to_string(),
        out_dir: dir.path().join(out),
    };
    run_sweep(&cfg_for("a")).unwrap();
    run_sweep(&cfg_for("b")).unwrap();
    let read = |run: &str, name: &str| std::fs::read(dir.path().join(run).join(name)).unwrap();
    assert_eq!(
        read("a", "curve.csv"),
        read("b", "curve.csv"),
        "curve.csv differs"
    );
    assert_eq!(
        read("a", "curve.svg"),
        read("b", "curve.svg"),
        "curve.svg differs"
    );
    let elapsed = started.elapsed().as_secs_f64();
    println!("criterion 10 PASS: sweep rerun byte-identical ({elapsed:.2}s)");
}

/// `empirical_loss_eval` is referenced by the audit module; exercising the
/// two-route equality here keeps this target self-contained as the suite
/// summary.
#[test]
fn criteria_suite_banner() {
    let world = example_world_w1();
    let data = world.sample_unpaired(4, 4, 1).unwrap();
    let p_ref = world.reference_distribution();
    let policy = TabularPolicy::init_from_reference(&world, 1e-12);
    let spec = LossSpec::new(ConvexGenerator::logistic(), world.t()).unwrap();
    let eval = empirical_loss_eval(LossForm::Bregman, &spec, &policy, &data, &p_ref, None).unwrap();
    assert!(eval.loss.is_finite());
    println!("acceptance suite: criteria 1-10 above, one PASS line each");
}
