//! Command drivers: each one loads inputs, runs the core, and writes the
//! artifact set for its command, with the merged effective config saved
//! next to the outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use ddro_core::baselines::{bt_fit, bt_fit_expected_from, bt_predicted_probs, BtFit};
use ddro_core::losses::{smoothed_term_grad_norms, ConvexGenerator, LossSpec, SmoothingKind};
use ddro_core::metrics::{l2_error, scaling_fit, ConsistencyCurve, CurvePoint, ScalingFit};
use ddro_core::optimizer::{
    train, EmpiricalObjective, Objective, PopulationObjective, StepRecord, TrainConfig,
};
use ddro_core::rng::{self, replicate_seed};
use ddro_core::world::{build_cyclic_world, random_world};
use ddro_core::{FiniteWorld, Mat, TabularPolicy};

use crate::audit::{run_audits, AuditReport};
use crate::config::{
    config_error, AblateEffective, CheckGradEffective, DemoBtEffective, SweepEffective,
    TrainEffective,
};
use crate::files;
use crate::plot;

/// Floor used when initializing policies from reference mixtures.
const INIT_FLOOR: f64 = 1e-12;

pub fn build_preset_world(
    preset: &str,
    prompts: usize,
    responses: usize,
    t: f64,
    seed: u64,
) -> Result<FiniteWorld> {
    match preset {
        "w1" => Ok(ddro_core::world::example_world_w1()),
        "uniform" => {
            let row: Vec<f64> = vec![1.0 / responses as f64; responses];
            let rows: Vec<&[f64]> = (0..prompts).map(|_| row.as_slice()).collect();
            let uniform = Mat::from_rows(&rows);
            ddro_core::world::build_distribution_world(
                uniform.clone(),
                uniform,
                t,
                vec![1.0 / prompts as f64; prompts],
            )
            .map_err(|e| config_error(format!("invalid uniform world: {e}")))
        }
        "random" => random_world(prompts, responses, t, seed)
            .map_err(|e| config_error(format!("invalid random world: {e}"))),
        other => Err(config_error(format!(
            "unknown preset {other:?} (w1, uniform, random)"
        ))),
    }
}

pub fn run_sample(
    world_path: &Path,
    n_plus: usize,
    n_minus: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let world = files::read_world(world_path)?;
    if n_plus == 0 || n_minus == 0 {
        return Err(config_error("sample counts must be >= 1"));
    }
    let data = world
        .sample_unpaired(n_plus, n_minus, seed)
        .map_err(|e| anyhow::anyhow!("sampling failed: {e}"))?;
    files::write_dataset(out, &data)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub final_error_l2: f64,
    pub wall_ms: f64,
    pub config: TrainEffective,
}

pub struct TrainArtifacts {
    pub summary: TrainSummary,
    pub records: Vec<StepRecord>,
    pub out_dir: PathBuf,
}

pub fn run_train(cfg: &TrainEffective) -> Result<TrainArtifacts> {
    let world = files::read_world(&cfg.world)?;
    let (choice, spec) = cfg.loss_choice()?;
    if (spec.t - world.t()).abs() > 1e-12 {
        bail!("loss spec t diverged from world t");
    }
    let train_config = cfg.train_config()?;
    let policy = TabularPolicy::init_from_reference(&world, INIT_FLOOR);
    let p_ref = world.reference_distribution();

    let started = Instant::now();
    let mut report = match choice {
        files::LossChoice::Population(_) => {
            let objective = PopulationObjective {
                world: &world,
                generator: spec.generator,
                clamp_epsilon: spec.clamp_epsilon,
            };
            train(policy, &objective, &train_config)
        }
        files::LossChoice::Empirical(form, _) => {
            let data = match &cfg.data {
                Some(path) => {
                    let data = files::read_dataset(path)?;
                    data.validate_for(&world)
                        .map_err(|e| config_error(format!("dataset invalid for world: {e}")))?;
                    data
                }
                None => world
                    .sample_unpaired(cfg.n, cfg.n, cfg.seed)
                    .map_err(|e| anyhow::anyhow!("sampling failed: {e}"))?,
            };
            let objective = EmpiricalObjective {
                form,
                spec,
                data: &data,
                p_ref: &p_ref,
            };
            train(policy, &objective, &train_config)
        }
    }
    .map_err(|e| anyhow::anyhow!("training failed: {e}"))?;
    report.wall_ms = started.elapsed().as_secs_f64() * 1e3;

    let summary = TrainSummary {
        final_error_l2: l2_error(&report.final_policy, &world),
        wall_ms: report.wall_ms,
        config: cfg.clone(),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    files::write_json_pretty(&cfg.out_dir.join("config.json"), cfg)?;
    files::write_report_csv(&cfg.out_dir.join("report.csv"), &report.records)?;
    files::write_policy(&cfg.out_dir.join("policy.json"), &report.final_policy)?;
    files::write_json_pretty(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(TrainArtifacts {
        summary,
        records: report.records,
        out_dir: cfg.out_dir.clone(),
    })
}

/// Wire form of a scaling fit.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingFitFile {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub excluded_points: usize,
}

impl From<ScalingFit> for ScalingFitFile {
    fn from(fit: ScalingFit) -> Self {
        Self {
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            excluded_points: fit.excluded_points,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SweepSummary {
    pub fit: ScalingFitFile,
    pub config: SweepEffective,
}

pub struct SweepArtifacts {
    pub curve: ConsistencyCurve,
    pub fit: ScalingFit,
    pub out_dir: PathBuf,
}

/// One consistency replicate: sample n/n, descend the empirical logistic
/// ratio loss, return the final L²(p⁺) error norm.
fn consistency_replicate(
    world: &FiniteWorld,
    n: usize,
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let data = world
        .sample_unpaired(n, n, seed)
        .map_err(|e| anyhow::anyhow!("sampling failed: {e}"))?;
    let p_ref = world.reference_distribution();
    let spec = LossSpec::new(ConvexGenerator::logistic(), world.t())
        .map_err(|e| anyhow::anyhow!("loss spec: {e}"))?;
    let objective = EmpiricalObjective {
        form: ddro_core::losses::LossForm::Bregman,
        spec,
        data: &data,
        p_ref: &p_ref,
    };
    let mut config = TrainConfig::plain_gd(lr, steps);
    config.seed = seed;
    config.telemetry_every = steps; // final policy is all the sweep needs
    let policy = TabularPolicy::init_from_reference(world, INIT_FLOOR);
    let report =
        train(policy, &objective, &config).map_err(|e| anyhow::anyhow!("training failed: {e}"))?;
    Ok(l2_error(&report.final_policy, world).sqrt())
}

pub fn run_sweep(cfg: &SweepEffective) -> Result<SweepArtifacts> {
    let world = files::read_world(&cfg.world)?;
    let tasks: Vec<(usize, usize, usize)> = cfg
        .grid
        .iter()
        .enumerate()
        .flat_map(|(gi, &n)| (0..cfg.seeds).map(move |rep| (gi, n, rep)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .context("building worker pool")?;
    let errors: Vec<Result<f64>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(gi, n, rep)| {
                let seed = replicate_seed(cfg.seed, gi as u64, rep as u64);
                consistency_replicate(&world, n, cfg.lr, cfg.steps, seed)
            })
            .collect()
    });

    let mut points = Vec::new();
    for (gi, &n) in cfg.grid.iter().enumerate() {
        let slice: Vec<f64> = errors[gi * cfg.seeds..(gi + 1) * cfg.seeds]
            .iter()
            .map(|r| r.as_ref().map(|&v| v).map_err(|e| anyhow::anyhow!("{e}")))
            .collect::<Result<_>>()?;
        let mean = slice.iter().sum::<f64>() / slice.len() as f64;
        let stderr = if slice.len() > 1 {
            let var = slice.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                / (slice.len() - 1) as f64;
            (var / slice.len() as f64).sqrt()
        } else {
            0.0
        };
        points.push(CurvePoint {
            n,
            error_mean: mean,
            error_stderr: stderr,
            seeds: slice.len(),
        });
    }
    let curve = ConsistencyCurve::new(points).map_err(|e| anyhow::anyhow!("curve: {e}"))?;
    let fit = scaling_fit(&curve).map_err(|e| anyhow::anyhow!("scaling fit: {e}"))?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    files::write_json_pretty(&cfg.out_dir.join("config.json"), cfg)?;
    files::write_curve_csv(&cfg.out_dir.join("curve.csv"), &curve)?;
    files::write_json_pretty(
        &cfg.out_dir.join("fit.json"),
        &SweepSummary {
            fit: fit.into(),
            config: cfg.clone(),
        },
    )?;
    plot::plot_consistency_curve(&cfg.out_dir.join("curve.svg"), &curve, &fit)?;
    Ok(SweepArtifacts {
        curve,
        fit,
        out_dir: cfg.out_dir.clone(),
    })
}

#[derive(Debug, Serialize)]
pub struct BtReport {
    pub t_pref: f64,
    pub mode: String,
    pub n_pairs: usize,
    pub fitted_rewards: Vec<f64>,
    pub max_reward_gap: f64,
    pub final_nll: f64,
    pub final_grad_norm: f64,
    pub predicted_pairwise: Vec<Vec<f64>>,
    /// Mean predicted probability along the three cycle edges.
    pub predicted_cycle_prob: f64,
    /// Worst |predicted − true| along the cycle edges.
    pub residual: f64,
}

pub fn run_demo_bt(cfg: &DemoBtEffective) -> Result<BtReport> {
    let world =
        build_cyclic_world(cfg.t_pref).map_err(|e| config_error(format!("cyclic world: {e}")))?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let fit: BtFit = if cfg.population {
        // A seeded unequal start shows the collapse is driven by the
        // objective, not by a symmetric init.
        let mut rng = rng::stream(cfg.seed, rng::purpose::REPLICATE);
        let init: Vec<f64> = (0..3).map(|_| 0.5 * rng.next_normal()).collect();
        bt_fit_expected_from(&world, &init, cfg.lr, cfg.steps)
            .map_err(|e| anyhow::anyhow!("population fit failed: {e}"))?
    } else {
        let data = world
            .sample_comparisons(cfg.n_pairs, cfg.seed)
            .map_err(|e| config_error(format!("sampling comparisons: {e}")))?;
        files::write_comparisons(&cfg.out_dir.join("comparisons.csv"), &data)?;
        bt_fit(&data, 3, cfg.lr, cfg.steps)
            .map_err(|e| anyhow::anyhow!("sampled fit failed: {e}"))?
    };

    let predicted = bt_predicted_probs(&fit.rewards);
    let cycle = [(0usize, 1usize), (1, 2), (2, 0)];
    let cycle_probs: Vec<f64> = cycle.iter().map(|&(i, j)| predicted.get(i, j)).collect();
    let report = BtReport {
        t_pref: cfg.t_pref,
        mode: if cfg.population {
            "population".into()
        } else {
            "sampled".into()
        },
        n_pairs: if cfg.population { 0 } else { cfg.n_pairs },
        fitted_rewards: fit.rewards.rewards.clone(),
        max_reward_gap: fit.rewards.max_pairwise_gap(),
        final_nll: fit.final_nll,
        final_grad_norm: fit.final_grad_norm,
        predicted_pairwise: (0..3).map(|i| predicted.row(i).to_vec()).collect(),
        predicted_cycle_prob: cycle_probs.iter().sum::<f64>() / cycle_probs.len() as f64,
        residual: cycle_probs
            .iter()
            .map(|p| (p - cfg.t_pref).abs())
            .fold(0.0f64, f64::max),
    };
    files::write_json_pretty(&cfg.out_dir.join("config.json"), cfg)?;
    files::write_json_pretty(&cfg.out_dir.join("bt_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct AblateSummary {
    /// Whether every per-sample smoothed gradient stayed at or below the
    /// identity gradient at the same policy, at every logged step.
    pub bound_holds: bool,
    pub max_ratio_vs_identity: f64,
    pub final_grad_norms: Vec<(String, f64)>,
    pub config: AblateEffective,
}

pub fn run_ablate(cfg: &AblateEffective) -> Result<AblateSummary> {
    let world = files::read_world(&cfg.world)?;
    let data = world
        .sample_unpaired(cfg.n, cfg.n, cfg.seed)
        .map_err(|e| anyhow::anyhow!("sampling failed: {e}"))?;
    let p_ref = world.reference_distribution();

    let spec_for = |s: SmoothingKind| {
        LossSpec::with(
            ConvexGenerator::logistic(),
            world.t(),
            cfg.gamma,
            s,
            false,
            1e-6,
        )
        .map_err(|e| anyhow::anyhow!("loss spec: {e}"))
    };
    let identity_spec = spec_for(SmoothingKind::Identity)?;

    // Shared seed and data; one descent trajectory per smoothing variant.
    // The loop is explicit so the per-sample bound can be checked against
    // the identity loss at the *same* policy at every logged step.
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    let mut final_grad_norms = Vec::new();
    let mut max_ratio: f64 = 0.0;
    let mut bound_holds = true;

    for s in SmoothingKind::ALL {
        let spec = spec_for(s)?;
        let objective = EmpiricalObjective {
            form: ddro_core::losses::LossForm::Practical,
            spec,
            data: &data,
            p_ref: &p_ref,
        };
        let mut policy = TabularPolicy::init_from_reference(&world, INIT_FLOOR);
        let mut points = Vec::new();
        let mut last_norm = 0.0;
        for step in 0..cfg.steps {
            let eval = objective
                .eval(&policy, None)
                .map_err(|e| anyhow::anyhow!("loss eval: {e}"))?;
            last_norm = eval.grad.l2_norm();
            if step % cfg.telemetry_every == 0 {
                points.push((step, last_norm));
                if s != SmoothingKind::Identity {
                    let (sp, sm) = smoothed_term_grad_norms(&policy, &data, &p_ref, &spec)
                        .map_err(|e| anyhow::anyhow!("per-sample norms: {e}"))?;
                    let (ip, im) = smoothed_term_grad_norms(&policy, &data, &p_ref, &identity_spec)
                        .map_err(|e| anyhow::anyhow!("per-sample norms: {e}"))?;
                    for (bounded, ident) in sp.iter().zip(ip.iter()).chain(sm.iter().zip(im.iter()))
                    {
                        if *ident > 0.0 {
                            max_ratio = max_ratio.max(bounded / ident);
                        }
                        if *bounded > ident + 1e-12 {
                            bound_holds = false;
                        }
                    }
                }
            }
            policy.logits_mut().add_scaled(-cfg.lr, &eval.grad);
        }
        series.push((s.name().to_string(), points));
        final_grad_norms.push((s.name().to_string(), last_norm));
    }

    std::fs::create_dir_all(&cfg.out_dir)?;
    files::write_json_pretty(&cfg.out_dir.join("config.json"), cfg)?;

    // Aligned gradient-norm series, one column per variant.
    let mut csv = String::from("step,identity,sig,logsig,neglogsigneg\n");
    let rows = series[0].1.len();
    for i in 0..rows {
        let step = series[0].1[i].0;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            step, series[0].1[i].1, series[1].1[i].1, series[2].1[i].1, series[3].1[i].1
        ));
    }
    std::fs::write(cfg.out_dir.join("ablate.csv"), csv)?;
    plot::plot_series_overlay(
        &cfg.out_dir.join("ablate.svg"),
        "gradient norm by smoothing",
        "log10 grad norm",
        &series,
    )?;
    let summary = AblateSummary {
        bound_holds,
        max_ratio_vs_identity: max_ratio,
        final_grad_norms,
        config: cfg.clone(),
    };
    files::write_json_pretty(&cfg.out_dir.join("summary.json"), &summary)?;
    if !bound_holds {
        bail!("per-sample smoothing gradient bound violated (max ratio {max_ratio})");
    }
    Ok(summary)
}

pub fn run_check_grad(cfg: &CheckGradEffective) -> Result<AuditReport> {
    let report = run_audits(cfg.trials, cfg.fd_step, cfg.tolerance, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    files::write_json_pretty(&cfg.out_dir.join("config.json"), cfg)?;
    files::write_json_pretty(&cfg.out_dir.join("grad_audit.json"), &report)?;
    Ok(report)
}
