//! Per-command run configuration.
//!
//! Every command accepts `--config <json>` plus flags; flags override file
//! values, remaining gaps take defaults, and the merged effective config is
//! written next to the outputs for provenance.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use ddro_core::losses::{ConvexGenerator, LossSpec};
use ddro_core::optimizer::{BatchMode, OptimizerKind, TrainConfig};

use crate::files::{parse_loss, parse_smoothing, LossSpecFile};

/// Validation failures exit with status 2 rather than 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

/// Default output root: `$DDRO_OUT` or `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("DDRO_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_out_dir(explicit: Option<PathBuf>, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| output_root().join(command))
}

fn load_file_values<T: DeserializeOwned + Default>(config: &Option<PathBuf>) -> Result<T> {
    match config {
        None => Ok(T::default()),
        Some(path) => {
            if !path.exists() {
                return Err(config_error(format!(
                    "config file not found: {}",
                    path.display()
                )));
            }
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| config_error(format!("bad config {}: {e}", path.display())))
        }
    }
}

fn require_world(path: &Option<PathBuf>) -> Result<PathBuf> {
    let path = path
        .clone()
        .ok_or_else(|| config_error("a world file is required (--world)"))?;
    if !path.exists() {
        return Err(config_error(format!(
            "world file not found: {}",
            path.display()
        )));
    }
    Ok(path)
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFlags {
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Dataset CSV; when absent, n⁺ = n⁻ = n samples are drawn instead.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// breg-<generator>, ddro-<generator>, or practical.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub smoothing: Option<String>,
    #[arg(long)]
    pub kl_in_gradient: Option<bool>,
    #[arg(long, allow_negative_numbers = true)]
    pub clamp_epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// plain-gd or adaptive-moment.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Minibatch size; full-dataset steps when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub telemetry_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn merge<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Fully resolved train run; serialized as the effective config.
#[derive(Debug, Clone, Serialize)]
pub struct TrainEffective {
    pub world: PathBuf,
    pub data: Option<PathBuf>,
    pub n: usize,
    pub loss: String,
    pub loss_spec: LossSpecFile,
    pub lr: f64,
    pub steps: usize,
    pub optimizer: String,
    pub batch_size: Option<usize>,
    pub telemetry_every: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl TrainEffective {
    pub fn loss_choice(&self) -> Result<(crate::files::LossChoice, LossSpec)> {
        let choice = parse_loss(&self.loss).map_err(|e| config_error(e.to_string()))?;
        let spec = LossSpec::with(
            ConvexGenerator::new(choice.generator()),
            self.loss_spec.t,
            self.loss_spec.gamma,
            parse_smoothing(&self.loss_spec.smoothing).map_err(|e| config_error(e.to_string()))?,
            self.loss_spec.kl_in_gradient,
            self.loss_spec.clamp_epsilon,
        )
        .map_err(|e| config_error(e.to_string()))?;
        Ok((choice, spec))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "plain-gd" => OptimizerKind::PlainGd,
            "adaptive-moment" => OptimizerKind::AdaptiveMoment,
            other => {
                return Err(config_error(format!(
                    "unknown optimizer {other:?} (plain-gd, adaptive-moment)"
                )))
            }
        };
        Ok(TrainConfig {
            learning_rate: self.lr,
            steps: self.steps,
            optimizer,
            batch: match self.batch_size {
                Some(size) => BatchMode::Minibatch(size),
                None => BatchMode::FullDataset,
            },
            seed: self.seed,
            telemetry_every: self.telemetry_every,
            parameterization: ddro_core::optimizer::Parameterization::FullTabular,
        })
    }
}

/// Resolves train flags against the config file and defaults. `t` comes
/// from the world file, so resolution happens after the world loads.
pub fn resolve_train(
    flags: TrainFlags,
    world_t: impl Fn(&Path) -> Result<f64>,
) -> Result<TrainEffective> {
    let file: TrainFlags = load_file_values(&flags.config)?;
    let world = require_world(&merge(flags.world, file.world))?;
    let t = world_t(&world)?;
    let gamma = merge(flags.gamma, file.gamma).unwrap_or(0.0);
    if gamma < 0.0 {
        return Err(config_error("gamma must be nonnegative"));
    }
    let clamp_epsilon = merge(flags.clamp_epsilon, file.clamp_epsilon).unwrap_or(1e-6);
    if !(clamp_epsilon > 0.0 && clamp_epsilon < 1.0) {
        return Err(config_error("clamp-epsilon must lie in (0, 1)"));
    }
    let loss = merge(flags.loss, file.loss).unwrap_or_else(|| "ddro-logistic".to_string());
    let choice = parse_loss(&loss).map_err(|e| config_error(e.to_string()))?;
    let generator = choice.generator();
    let population = matches!(choice, crate::files::LossChoice::Population(_));
    let smoothing = merge(flags.smoothing, file.smoothing).unwrap_or_else(|| "logsig".to_string());
    parse_smoothing(&smoothing).map_err(|e| config_error(e.to_string()))?;
    let n = merge(flags.n, file.n).unwrap_or(10_000);
    if n == 0 {
        return Err(config_error("n must be >= 1"));
    }
    let steps = merge(flags.steps, file.steps).unwrap_or(2000);
    // Population descents take plain GD at a larger rate; empirical runs
    // default to adaptive moments at a smaller one.
    let lr = merge(flags.lr, file.lr).unwrap_or(if population { 0.1 } else { 0.01 });
    if lr <= 0.0 {
        return Err(config_error("lr must be positive"));
    }
    let default_optimizer = if population {
        "plain-gd"
    } else {
        "adaptive-moment"
    };
    Ok(TrainEffective {
        world,
        data: merge(flags.data, file.data),
        n,
        loss,
        loss_spec: LossSpecFile {
            generator: generator.name().to_string(),
            t,
            gamma,
            smoothing,
            kl_in_gradient: merge(flags.kl_in_gradient, file.kl_in_gradient).unwrap_or(false),
            clamp_epsilon,
        },
        lr,
        steps,
        optimizer: merge(flags.optimizer, file.optimizer)
            .unwrap_or_else(|| default_optimizer.to_string()),
        batch_size: merge(flags.batch_size, file.batch_size),
        telemetry_every: merge(flags.telemetry_every, file.telemetry_every).unwrap_or(1),
        seed: merge(flags.seed, file.seed).unwrap_or(1),
        out_dir: resolve_out_dir(merge(flags.out_dir, file.out_dir), "train"),
    })
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// Comma-separated sample sizes, e.g. 100,1000,10000,100000.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepEffective {
    pub world: PathBuf,
    pub grid: Vec<usize>,
    pub seeds: usize,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub jobs: usize,
    pub loss: String,
    pub out_dir: PathBuf,
}

pub fn resolve_sweep(flags: SweepFlags) -> Result<SweepEffective> {
    let file: SweepFlags = load_file_values(&flags.config)?;
    let world = require_world(&merge(flags.world, file.world))?;
    let grid_str =
        merge(flags.grid, file.grid).unwrap_or_else(|| "100,1000,10000,100000".to_string());
    let mut grid = Vec::new();
    for token in grid_str.split(',') {
        let n: usize = token
            .trim()
            .parse()
            .map_err(|_| config_error(format!("bad grid entry {token:?}")))?;
        grid.push(n);
    }
    grid.sort_unstable();
    grid.dedup();
    if grid.len() < 3 {
        return Err(config_error("need >= 3 grid points"));
    }
    if grid[0] == 0 {
        return Err(config_error("grid entries must be >= 1"));
    }
    let seeds = merge(flags.seeds, file.seeds).unwrap_or(10);
    if seeds == 0 {
        return Err(config_error("seeds must be >= 1"));
    }
    // Plain GD pushes the optimization floor far below statistical error,
    // which the rate measurement needs.
    Ok(SweepEffective {
        world,
        grid,
        seeds,
        seed: merge(flags.seed, file.seed).unwrap_or(1),
        lr: merge(flags.lr, file.lr).unwrap_or(0.5),
        steps: merge(flags.steps, file.steps).unwrap_or(3000),
        jobs: merge(flags.jobs, file.jobs).unwrap_or(4).max(1),
        loss: "breg-logistic".to_string(),
        out_dir: resolve_out_dir(merge(flags.out_dir, file.out_dir), "sweep-consistency"),
    })
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DemoBtFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Cyclic preference strength in [0, 1].
    #[arg(long, allow_negative_numbers = true)]
    pub t_pref: Option<f64>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Fit against exact pairwise probabilities instead of samples.
    #[arg(long)]
    pub population: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoBtEffective {
    pub t_pref: f64,
    pub n_pairs: usize,
    pub population: bool,
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub out_dir: PathBuf,
}

pub fn resolve_demo_bt(flags: DemoBtFlags) -> Result<DemoBtEffective> {
    let file: DemoBtFlags = load_file_values(&flags.config)?;
    let t_pref = merge(flags.t_pref, file.t_pref).unwrap_or(0.8);
    if !(0.0..=1.0).contains(&t_pref) {
        return Err(config_error("t-pref must lie in [0, 1]"));
    }
    Ok(DemoBtEffective {
        t_pref,
        n_pairs: merge(flags.n_pairs, file.n_pairs).unwrap_or(100_000),
        population: flags.population || file.population,
        seed: merge(flags.seed, file.seed).unwrap_or(1),
        lr: merge(flags.lr, file.lr).unwrap_or(1.0),
        steps: merge(flags.steps, file.steps).unwrap_or(4000),
        out_dir: resolve_out_dir(merge(flags.out_dir, file.out_dir), "demo-bt"),
    })
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblateFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub telemetry_every: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateEffective {
    pub world: PathBuf,
    pub n: usize,
    pub gamma: f64,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub telemetry_every: usize,
    pub out_dir: PathBuf,
}

pub fn resolve_ablate(flags: AblateFlags) -> Result<AblateEffective> {
    let file: AblateFlags = load_file_values(&flags.config)?;
    let gamma = merge(flags.gamma, file.gamma).unwrap_or(0.0);
    if gamma < 0.0 {
        return Err(config_error("gamma must be nonnegative"));
    }
    Ok(AblateEffective {
        world: require_world(&merge(flags.world, file.world))?,
        n: merge(flags.n, file.n).unwrap_or(4096),
        gamma,
        lr: merge(flags.lr, file.lr).unwrap_or(0.5),
        steps: merge(flags.steps, file.steps).unwrap_or(400),
        seed: merge(flags.seed, file.seed).unwrap_or(1),
        telemetry_every: merge(flags.telemetry_every, file.telemetry_every).unwrap_or(1),
        out_dir: resolve_out_dir(merge(flags.out_dir, file.out_dir), "ablate-smoothing"),
    })
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CheckGradFlags {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Random evaluation points per audited loss.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Central-difference step.
    #[arg(long, allow_negative_numbers = true)]
    pub fd_step: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckGradEffective {
    pub trials: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub tolerance: f64,
    pub out_dir: PathBuf,
}

pub fn resolve_check_grad(flags: CheckGradFlags) -> Result<CheckGradEffective> {
    let file: CheckGradFlags = load_file_values(&flags.config)?;
    let fd_step = merge(flags.fd_step, file.fd_step).unwrap_or(1e-5);
    if fd_step <= 0.0 {
        return Err(config_error("fd-step must be positive"));
    }
    Ok(CheckGradEffective {
        trials: merge(flags.trials, file.trials).unwrap_or(20).max(1),
        fd_step,
        seed: merge(flags.seed, file.seed).unwrap_or(1),
        tolerance: 1e-6,
        out_dir: resolve_out_dir(merge(flags.out_dir, file.out_dir), "check-grad"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn flags_override_file_values() {
        let dir = tempdir().unwrap();
        let world = dir.path().join("w.json");
        crate::files::write_world(&world, &ddro_core::world::example_world_w1()).unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(
            &cfg_path,
            format!(
                r#"{{"world": "{}", "lr": 0.25, "steps": 7}}"#,
                world.display()
            ),
        )
        .unwrap();
        let flags = TrainFlags {
            config: Some(cfg_path),
            steps: Some(11),
            ..Default::default()
        };
        let effective = resolve_train(flags, |_| Ok(0.5)).unwrap();
        assert_eq!(effective.lr, 0.25); // from file
        assert_eq!(effective.steps, 11); // flag wins
        assert_eq!(effective.loss, "ddro-logistic"); // default
    }

    #[test]
    fn negative_gamma_rejected() {
        let dir = tempdir().unwrap();
        let world = dir.path().join("w.json");
        crate::files::write_world(&world, &ddro_core::world::example_world_w1()).unwrap();
        let flags = TrainFlags {
            world: Some(world),
            gamma: Some(-1.0),
            ..Default::default()
        };
        let err = resolve_train(flags, |_| Ok(0.5)).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(err.to_string().contains("gamma must be nonnegative"));
    }

    #[test]
    fn missing_world_rejected() {
        let flags = TrainFlags {
            world: Some(PathBuf::from("/no/such/world.json")),
            ..Default::default()
        };
        let err = resolve_train(flags, |_| Ok(0.5)).unwrap_err();
        assert!(err.to_string().contains("world file not found"));
    }

    #[test]
    fn sweep_grid_validation() {
        let dir = tempdir().unwrap();
        let world = dir.path().join("w.json");
        crate::files::write_world(&world, &ddro_core::world::example_world_w1()).unwrap();
        let flags = |grid: &str| SweepFlags {
            world: Some(world.clone()),
            grid: Some(grid.to_string()),
            ..Default::default()
        };
        let err = resolve_sweep(flags("100,1000")).unwrap_err();
        assert!(err.to_string().contains(">= 3 grid points"));
        let ok = resolve_sweep(flags("1000,100,10000")).unwrap();
        assert_eq!(ok.grid, vec![100, 1000, 10000]); // sorted
    }

    #[test]
    fn demo_bt_range_check() {
        let err = resolve_demo_bt(DemoBtFlags {
            t_pref: Some(1.5),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("t-pref"));
    }
}
