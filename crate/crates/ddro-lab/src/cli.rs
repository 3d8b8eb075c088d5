//! Command-line interface.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::{
    self, resolve_ablate, resolve_check_grad, resolve_demo_bt, resolve_sweep, resolve_train,
    AblateFlags, CheckGradFlags, DemoBtFlags, SweepFlags, TrainFlags,
};
use crate::files;
use crate::runs;

#[derive(Parser)]
#[command(
    name = "ddro",
    about = "Density ratio preference optimization lab over finite worlds",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a world file from a preset.
    World {
        /// w1, uniform, or random.
        #[arg(long, default_value = "w1")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        prompts: usize,
        #[arg(long, default_value_t = 3)]
        responses: usize,
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Sample an unpaired dataset from a world.
    Sample {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_plus: usize,
        #[arg(long, default_value_t = 1000)]
        n_minus: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a tabular policy on an empirical loss.
    Train(TrainFlags),
    /// Error-versus-n sweep with a log-log scaling fit.
    SweepConsistency(SweepFlags),
    /// Fit Bradley-Terry rewards on the cyclic preference world.
    DemoBt(DemoBtFlags),
    /// Run all four smoothing variants on shared data and compare
    /// gradient norms.
    AblateSmoothing(AblateFlags),
    /// Audit every analytic gradient against finite differences.
    CheckGrad(CheckGradFlags),
}

/// Runs a parsed command. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<config::ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::World {
            preset,
            prompts,
            responses,
            t,
            seed,
            out,
        } => {
            let world = runs::build_preset_world(&preset, prompts, responses, t, seed)?;
            files::write_world(&out, &world)?;
            println!(
                "wrote world ({} prompts, {} responses) to {}",
                world.n_prompts(),
                world.n_responses(),
                out.display()
            );
            Ok(())
        }
        Command::Sample {
            world,
            n_plus,
            n_minus,
            seed,
            out,
        } => {
            runs::run_sample(&world, n_plus, n_minus, seed, &out)?;
            println!("wrote {n_plus}+{n_minus} samples to {}", out.display());
            Ok(())
        }
        Command::Train(flags) => {
            let cfg = resolve_train(flags, |path| Ok(files::read_world(path)?.t()))?;
            let artifacts = runs::run_train(&cfg)?;
            println!(
                "final loss {:.6e}, L2(p+) error {:.6e}, {} telemetry rows -> {}",
                artifacts.records.last().map(|r| r.loss).unwrap_or(f64::NAN),
                artifacts.summary.final_error_l2,
                artifacts.records.len(),
                artifacts.out_dir.display()
            );
            Ok(())
        }
        Command::SweepConsistency(flags) => {
            let cfg = resolve_sweep(flags)?;
            let artifacts = runs::run_sweep(&cfg)?;
            println!(
                "slope {:.4}, r2 {:.4} over {} grid points -> {}",
                artifacts.fit.slope,
                artifacts.fit.r_squared,
                artifacts.curve.points().len(),
                artifacts.out_dir.display()
            );
            Ok(())
        }
        Command::DemoBt(flags) => {
            let cfg = resolve_demo_bt(flags)?;
            let report = runs::run_demo_bt(&cfg)?;
            println!(
                "mode {}: predicted cycle prob {:.6} vs true {:.6} (residual {:.6}), max reward gap {:.3e}",
                report.mode,
                report.predicted_cycle_prob,
                report.t_pref,
                report.residual,
                report.max_reward_gap
            );
            Ok(())
        }
        Command::AblateSmoothing(flags) => {
            let cfg = resolve_ablate(flags)?;
            let summary = runs::run_ablate(&cfg)?;
            println!(
                "per-sample bound holds: {} (max ratio vs identity {:.6})",
                summary.bound_holds, summary.max_ratio_vs_identity
            );
            Ok(())
        }
        Command::CheckGrad(flags) => {
            let cfg = resolve_check_grad(flags)?;
            let report = runs::run_check_grad(&cfg)?;
            for entry in &report.entries {
                println!(
                    "{:<34} {:>12.3e}  {}",
                    entry.loss,
                    entry.max_rel_error,
                    if entry.pass { "ok" } else { "FAIL" }
                );
            }
            if !report.all_pass {
                anyhow::bail!("gradient audit failed (tolerance {})", report.tolerance);
            }
            println!(
                "all gradients within {:.1e} of finite differences",
                report.tolerance
            );
            Ok(())
        }
    }
}
