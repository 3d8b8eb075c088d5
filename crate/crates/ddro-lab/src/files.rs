//! On-disk formats: world and policy JSON, dataset/report/curve CSV.
//!
//! CSV writers format floats with Rust's shortest-roundtrip `Display`, so
//! identical runs produce byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ddro_core::losses::{GeneratorKind, LossForm, SmoothingKind};
use ddro_core::metrics::{ConsistencyCurve, CurvePoint};
use ddro_core::optimizer::StepRecord;
use ddro_core::ratio::RatioField;
use ddro_core::world::build_distribution_world;
use ddro_core::{FiniteWorld, Mat, TabularPolicy, UnpairedDataset};

/// World file: `{n_prompts, n_responses, prompt_dist, p_plus, p_minus, t}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldFile {
    pub n_prompts: usize,
    pub n_responses: usize,
    pub prompt_dist: Vec<f64>,
    pub p_plus: Vec<Vec<f64>>,
    pub p_minus: Vec<Vec<f64>>,
    pub t: f64,
}

impl WorldFile {
    pub fn from_world(world: &FiniteWorld) -> Self {
        let rows = |m: &Mat| (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        Self {
            n_prompts: world.n_prompts(),
            n_responses: world.n_responses(),
            prompt_dist: world.prompt_dist().to_vec(),
            p_plus: rows(world.p_plus()),
            p_minus: rows(world.p_minus()),
            t: world.t(),
        }
    }

    pub fn into_world(self) -> Result<FiniteWorld> {
        let to_mat = |rows: &[Vec<f64>], name: &str| -> Result<Mat> {
            if rows.len() != self.n_prompts || rows.iter().any(|r| r.len() != self.n_responses) {
                bail!("{name} shape does not match (n_prompts, n_responses)");
            }
            Ok(Mat::from_rows(
                &rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>(),
            ))
        };
        let p_plus = to_mat(&self.p_plus, "p_plus")?;
        let p_minus = to_mat(&self.p_minus, "p_minus")?;
        build_distribution_world(p_plus, p_minus, self.t, self.prompt_dist)
            .map_err(|e| anyhow::anyhow!("invalid world: {e}"))
    }
}

pub fn write_world(path: &Path, world: &FiniteWorld) -> Result<()> {
    write_json_pretty(path, &WorldFile::from_world(world))
}

pub fn read_world(path: &Path) -> Result<FiniteWorld> {
    if !path.exists() {
        bail!("world file not found: {}", path.display());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: WorldFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    file.into_world()
}

/// Policy checkpoint: `{logits: [[...]]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyFile {
    pub logits: Vec<Vec<f64>>,
}

pub fn write_policy(path: &Path, policy: &TabularPolicy) -> Result<()> {
    let logits = (0..policy.logits().rows())
        .map(|r| policy.logits().row(r).to_vec())
        .collect();
    write_json_pretty(path, &PolicyFile { logits })
}

pub fn read_policy(path: &Path) -> Result<TabularPolicy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: PolicyFile = serde_json::from_str(&text)?;
    if file.logits.is_empty() {
        bail!("policy has no rows");
    }
    let mat = Mat::from_rows(&file.logits.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
    TabularPolicy::from_logits(mat).map_err(|e| anyhow::anyhow!("invalid policy: {e}"))
}

/// Dataset CSV: header `label,prompt,response`, label in {+, -}.
pub fn write_dataset(path: &Path, data: &UnpairedDataset) -> Result<()> {
    let mut out = String::from("label,prompt,response\n");
    for &(x, y) in &data.plus_samples {
        out.push_str(&format!("+,{x},{y}\n"));
    }
    for &(x, y) in &data.minus_samples {
        out.push_str(&format!("-,{x},{y}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<UnpairedDataset> {
    if !path.exists() {
        bail!("dataset file not found: {}", path.display());
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("label,prompt,response") => {}
        other => bail!("bad dataset header: {other:?}"),
    }
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("");
        let x: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("line {}: bad prompt index", i + 2))?;
        let y: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .with_context(|| format!("line {}: bad response index", i + 2))?;
        match label {
            "+" => plus.push((x, y)),
            "-" => minus.push((x, y)),
            other => bail!("line {}: label must be + or -, got {other:?}", i + 2),
        }
    }
    Ok(UnpairedDataset {
        plus_samples: plus,
        minus_samples: minus,
    })
}

/// Pairwise comparison CSV: `prompt,winner,loser`.
pub fn write_comparisons(path: &Path, comparisons: &[(usize, usize)]) -> Result<()> {
    let mut out = String::from("prompt,winner,loser\n");
    for &(w, l) in comparisons {
        out.push_str(&format!("0,{w},{l}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_comparisons(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("prompt,winner,loser") => {}
        other => bail!("bad comparisons header: {other:?}"),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            bail!("line {}: expected 3 fields", i + 2);
        }
        out.push((f[1].parse()?, f[2].parse()?));
    }
    Ok(out)
}

/// Training telemetry CSV:
/// `step,loss,grad_norm,clamp_hits,g_min,g_max,tilde_neg_mass`.
pub fn write_report_csv(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,loss,grad_norm,clamp_hits,g_min,g_max,tilde_neg_mass\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss, r.grad_norm, r.clamp_hits, r.g_min, r.g_max, r.tilde_neg_mass
        ));
    }
    write_atomic(path, out.as_bytes())
}

/// Consistency curve CSV: `n,error_mean,error_stderr,seeds`.
pub fn write_curve_csv(path: &Path, curve: &ConsistencyCurve) -> Result<()> {
    let mut out = String::from("n,error_mean,error_stderr,seeds\n");
    for p in curve.points() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.n, p.error_mean, p.error_stderr, p.seeds
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_curve_csv(path: &Path) -> Result<ConsistencyCurve> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("n,error_mean,error_stderr,seeds") => {}
        other => bail!("bad curve header: {other:?}"),
    }
    let mut points = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            bail!("bad curve row: {line:?}");
        }
        points.push(CurvePoint {
            n: f[0].parse()?,
            error_mean: f[1].parse()?,
            error_stderr: f[2].parse()?,
            seeds: f[3].parse()?,
        });
    }
    ConsistencyCurve::new(points).map_err(|e| anyhow::anyhow!("invalid curve: {e}"))
}

/// Debug CSV for ratio fields: `prompt,response,value,masked`. Masked-out
/// entries carry an empty value column.
pub fn write_ratio_field_csv(path: &Path, field: &RatioField) -> Result<()> {
    let mut out = String::from("prompt,response,value,masked\n");
    for x in 0..field.rows() {
        for y in 0..field.cols() {
            match field.value(x, y) {
                Some(v) => out.push_str(&format!("{x},{y},{v},false\n")),
                None => out.push_str(&format!("{x},{y},,true\n")),
            }
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Serialized loss spec, mirroring the run-config schema
/// `{generator, t, gamma, smoothing, kl_in_gradient, clamp_epsilon}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossSpecFile {
    pub generator: String,
    pub t: f64,
    pub gamma: f64,
    pub smoothing: String,
    pub kl_in_gradient: bool,
    pub clamp_epsilon: f64,
}

pub fn parse_generator(name: &str) -> Result<GeneratorKind> {
    Ok(match name {
        "logistic" => GeneratorKind::Logistic,
        "quadratic" => GeneratorKind::Quadratic,
        "kl" => GeneratorKind::Kl,
        other => bail!("unknown generator {other:?} (logistic, quadratic, kl)"),
    })
}

pub fn parse_smoothing(name: &str) -> Result<SmoothingKind> {
    Ok(match name {
        "identity" => SmoothingKind::Identity,
        "sig" => SmoothingKind::Sig,
        "logsig" => SmoothingKind::LogSig,
        "neglogsigneg" => SmoothingKind::NegLogSigNeg,
        other => bail!("unknown smoothing {other:?} (identity, sig, logsig, neglogsigneg)"),
    })
}

/// A parsed loss token: an empirical family over a dataset, or the exact
/// population loss over the world itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossChoice {
    Empirical(LossForm, GeneratorKind),
    Population(GeneratorKind),
}

impl LossChoice {
    pub fn generator(self) -> GeneratorKind {
        match self {
            LossChoice::Empirical(_, g) | LossChoice::Population(g) => g,
        }
    }
}

/// Parses a loss token: `breg-<generator>`, `ddro-<generator>`,
/// `population-<generator>`, or `practical`.
pub fn parse_loss(token: &str) -> Result<LossChoice> {
    if token == "practical" {
        return Ok(LossChoice::Empirical(
            LossForm::Practical,
            GeneratorKind::Logistic,
        ));
    }
    let (family, generator) = token.split_once('-').with_context(|| {
        format!("loss must look like breg-logistic, population-kl, or practical, got {token:?}")
    })?;
    let generator = parse_generator(generator)?;
    Ok(match family {
        "breg" => LossChoice::Empirical(LossForm::Bregman, generator),
        "ddro" => LossChoice::Empirical(LossForm::Ddro, generator),
        "population" => LossChoice::Population(generator),
        other => bail!("unknown loss family {other:?} (breg, ddro, population, practical)"),
    })
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}
