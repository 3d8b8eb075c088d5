//! Finite ground-truth preference worlds and feedback-data samplers.
//!
//! A [`FiniteWorld`] holds a prompt distribution `p_x`, the preferred and
//! unpreferred response distributions `p⁺(y|x)` and `p⁻(y|x)`, and the
//! label probability `t ∈ (0, 1)`. The reference model is their mixture
//! `p_ref = t·p⁺ + (1−t)·p⁻`.
//!
//! A [`PairwiseWorld`] instead stores raw pairwise comparison probabilities
//! `Pr[y_i ≻ y_j]`; [`build_cyclic_world`] constructs the three-response
//! cyclic preference that no Bradley-Terry reward vector can reproduce.

use alloc::vec::Vec;
use core::fmt;

use crate::mat::Mat;
use crate::rng::{self, SplitMix64};

/// Row sums and distribution sums must match 1 within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum WorldError {
    /// A row of a conditional distribution does not sum to 1.
    NonStochasticRow {
        matrix: &'static str,
        row: usize,
        sum: f64,
    },
    NegativeEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    /// `t` outside the open interval (0, 1).
    TOutOfOpenInterval(f64),
    ShapeMismatch,
    PromptDistInvalid {
        sum: f64,
    },
    /// Sampler counts must be at least 1.
    ZeroSampleCount,
    EmptyDataset,
    IndexOutOfRange {
        prompt: usize,
        response: usize,
    },
    PrefOutOfRange(f64),
    PrefNotComplementary {
        i: usize,
        j: usize,
        sum: f64,
    },
}

impl fmt::Display for WorldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldError::NonStochasticRow { matrix, row, sum } => {
                write!(f, "row {row} of {matrix} sums to {sum}, not 1")
            }
            WorldError::NegativeEntry {
                matrix,
                row,
                col,
                value,
            } => {
                write!(f, "{matrix}[{row}][{col}] = {value} is negative")
            }
            WorldError::TOutOfOpenInterval(t) => {
                write!(f, "t = {t} out of open interval (0, 1)")
            }
            WorldError::ShapeMismatch => write!(f, "matrix shapes disagree"),
            WorldError::PromptDistInvalid { sum } => {
                write!(f, "prompt distribution sums to {sum}, not 1")
            }
            WorldError::ZeroSampleCount => write!(f, "sample counts must be >= 1"),
            WorldError::EmptyDataset => write!(f, "dataset must be nonempty"),
            WorldError::IndexOutOfRange { prompt, response } => {
                write!(f, "index ({prompt}, {response}) out of range")
            }
            WorldError::PrefOutOfRange(p) => {
                write!(f, "preference probability {p} out of [0, 1]")
            }
            WorldError::PrefNotComplementary { i, j, sum } => {
                write!(f, "pref[{i}][{j}] + pref[{j}][{i}] = {sum}, not 1")
            }
        }
    }
}

impl core::error::Error for WorldError {}

/// Ground-truth generative model over finite prompt and response sets.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteWorld {
    prompt_dist: Vec<f64>,
    p_plus: Mat,
    p_minus: Mat,
    t: f64,
}

fn check_stochastic(m: &Mat, name: &'static str) -> Result<(), WorldError> {
    for r in 0..m.rows() {
        let mut sum = 0.0;
        for c in 0..m.cols() {
            let v = m.get(r, c);
            if v < 0.0 {
                return Err(WorldError::NegativeEntry {
                    matrix: name,
                    row: r,
                    col: c,
                    value: v,
                });
            }
            sum += v;
        }
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(WorldError::NonStochasticRow {
                matrix: name,
                row: r,
                sum,
            });
        }
    }
    Ok(())
}

/// Validates and assembles a world. Fails rather than normalizes.
pub fn build_distribution_world(
    p_plus: Mat,
    p_minus: Mat,
    t: f64,
    prompt_dist: Vec<f64>,
) -> Result<FiniteWorld, WorldError> {
    if !p_plus.same_shape(&p_minus) || p_plus.rows() != prompt_dist.len() {
        return Err(WorldError::ShapeMismatch);
    }
    if !(t > 0.0 && t < 1.0) {
        return Err(WorldError::TOutOfOpenInterval(t));
    }
    check_stochastic(&p_plus, "p_plus")?;
    check_stochastic(&p_minus, "p_minus")?;
    if prompt_dist.iter().any(|&p| p < 0.0) {
        return Err(WorldError::PromptDistInvalid { sum: f64::NAN });
    }
    let sum: f64 = prompt_dist.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(WorldError::PromptDistInvalid { sum });
    }
    Ok(FiniteWorld {
        prompt_dist,
        p_plus,
        p_minus,
        t,
    })
}

impl FiniteWorld {
    pub fn n_prompts(&self) -> usize {
        self.p_plus.rows()
    }

    pub fn n_responses(&self) -> usize {
        self.p_plus.cols()
    }

    pub fn prompt_dist(&self) -> &[f64] {
        &self.prompt_dist
    }

    pub fn p_plus(&self) -> &Mat {
        &self.p_plus
    }

    pub fn p_minus(&self) -> &Mat {
        &self.p_minus
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    /// The reference mixture `p_ref(y|x) = t·p⁺(y|x) + (1−t)·p⁻(y|x)`.
    pub fn reference_distribution(&self) -> Mat {
        let mut out = Mat::zeros(self.n_prompts(), self.n_responses());
        for x in 0..self.n_prompts() {
            for y in 0..self.n_responses() {
                out.set(
                    x,
                    y,
                    self.t * self.p_plus.get(x, y) + (1.0 - self.t) * self.p_minus.get(x, y),
                );
            }
        }
        out
    }

    /// Draws `n_plus` samples from `p_x × p⁺` and `n_minus` from `p_x × p⁻`.
    ///
    /// Deterministic given `seed`; the two sides use independent streams.
    pub fn sample_unpaired(
        &self,
        n_plus: usize,
        n_minus: usize,
        seed: u64,
    ) -> Result<UnpairedDataset, WorldError> {
        if n_plus == 0 || n_minus == 0 {
            return Err(WorldError::ZeroSampleCount);
        }
        let mut plus_rng = rng::stream(seed, rng::purpose::PLUS_SAMPLES);
        let mut minus_rng = rng::stream(seed, rng::purpose::MINUS_SAMPLES);
        let plus = (0..n_plus)
            .map(|_| self.draw_pair(&self.p_plus, &mut plus_rng))
            .collect();
        let minus = (0..n_minus)
            .map(|_| self.draw_pair(&self.p_minus, &mut minus_rng))
            .collect();
        Ok(UnpairedDataset {
            plus_samples: plus,
            minus_samples: minus,
        })
    }

    /// Draws `n` triples `(x, y⁺, y⁻)` with `y⁺ ~ p⁺(·|x)` and `y⁻ ~ p⁻(·|x)`
    /// independently for each prompt draw.
    pub fn sample_paired(&self, n: usize, seed: u64) -> Result<PairedDataset, WorldError> {
        if n == 0 {
            return Err(WorldError::ZeroSampleCount);
        }
        let mut rng = rng::stream(seed, rng::purpose::PAIRED_SAMPLES);
        let triples = (0..n)
            .map(|_| {
                let x = sample_index(&self.prompt_dist, &mut rng);
                let winner = sample_index(self.p_plus.row(x), &mut rng);
                let loser = sample_index(self.p_minus.row(x), &mut rng);
                (x, winner, loser)
            })
            .collect();
        Ok(PairedDataset { triples })
    }

    fn draw_pair(&self, conditional: &Mat, rng: &mut SplitMix64) -> (usize, usize) {
        let x = sample_index(&self.prompt_dist, rng);
        let y = sample_index(conditional.row(x), rng);
        (x, y)
    }
}

/// Inverse-CDF draw from a probability vector. Zero-mass outcomes are never
/// produced; trailing rounding slack falls to the last positive entry.
fn sample_index(probs: &[f64], rng: &mut SplitMix64) -> usize {
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Labeled samples `(prompt, response)` with no cross-response links.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedDataset {
    pub plus_samples: Vec<(usize, usize)>,
    pub minus_samples: Vec<(usize, usize)>,
}

impl UnpairedDataset {
    pub fn n_plus(&self) -> usize {
        self.plus_samples.len()
    }

    pub fn n_minus(&self) -> usize {
        self.minus_samples.len()
    }

    pub fn validate_for(&self, world: &FiniteWorld) -> Result<(), WorldError> {
        if self.plus_samples.is_empty() || self.minus_samples.is_empty() {
            return Err(WorldError::EmptyDataset);
        }
        for &(x, y) in self.plus_samples.iter().chain(self.minus_samples.iter()) {
            if x >= world.n_prompts() || y >= world.n_responses() {
                return Err(WorldError::IndexOutOfRange {
                    prompt: x,
                    response: y,
                });
            }
        }
        Ok(())
    }
}

/// Comparison triples `(prompt, winner, loser)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub triples: Vec<(usize, usize, usize)>,
}

/// Splits winners into plus samples and losers into minus samples.
pub fn pair_to_unpaired(paired: &PairedDataset) -> Result<UnpairedDataset, WorldError> {
    if paired.triples.is_empty() {
        return Err(WorldError::EmptyDataset);
    }
    Ok(UnpairedDataset {
        plus_samples: paired.triples.iter().map(|&(x, w, _)| (x, w)).collect(),
        minus_samples: paired.triples.iter().map(|&(x, _, l)| (x, l)).collect(),
    })
}

/// Pairwise comparison probabilities over a single prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseWorld {
    pref_matrix: Mat,
}

impl PairwiseWorld {
    /// Validates antisymmetry: `pref[i][j] + pref[j][i] = 1` for `i ≠ j`.
    pub fn new(pref_matrix: Mat) -> Result<Self, WorldError> {
        if pref_matrix.rows() != pref_matrix.cols() {
            return Err(WorldError::ShapeMismatch);
        }
        for i in 0..pref_matrix.rows() {
            for j in 0..pref_matrix.cols() {
                let p = pref_matrix.get(i, j);
                if !(0.0..=1.0).contains(&p) {
                    return Err(WorldError::PrefOutOfRange(p));
                }
                if i != j {
                    let sum = p + pref_matrix.get(j, i);
                    if (sum - 1.0).abs() > STOCHASTIC_TOL {
                        return Err(WorldError::PrefNotComplementary { i, j, sum });
                    }
                }
            }
        }
        Ok(Self { pref_matrix })
    }

    pub fn n_responses(&self) -> usize {
        self.pref_matrix.rows()
    }

    pub fn pref(&self, winner: usize, loser: usize) -> f64 {
        self.pref_matrix.get(winner, loser)
    }

    pub fn pref_matrix(&self) -> &Mat {
        &self.pref_matrix
    }

    /// Samples `n` comparisons: an unordered pair `i < j` uniformly, then a
    /// winner with probability `pref[i][j]`. Returns `(winner, loser)` pairs.
    pub fn sample_comparisons(
        &self,
        n: usize,
        seed: u64,
    ) -> Result<Vec<(usize, usize)>, WorldError> {
        if n == 0 {
            return Err(WorldError::ZeroSampleCount);
        }
        let m = self.n_responses();
        let mut pairs = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                pairs.push((i, j));
            }
        }
        let mut rng = rng::stream(seed, rng::purpose::COMPARISONS);
        Ok((0..n)
            .map(|_| {
                let (i, j) = pairs[rng.next_below(pairs.len())];
                if rng.next_f64() < self.pref_matrix.get(i, j) {
                    (i, j)
                } else {
                    (j, i)
                }
            })
            .collect())
    }
}

/// The three-response cyclic preference: `a ≻ b`, `b ≻ c`, `c ≻ a`, each
/// with probability `t_pref`.
pub fn build_cyclic_world(t_pref: f64) -> Result<PairwiseWorld, WorldError> {
    if !(0.0..=1.0).contains(&t_pref) {
        return Err(WorldError::PrefOutOfRange(t_pref));
    }
    let mut pref = Mat::zeros(3, 3);
    for i in 0..3 {
        pref.set(i, i, 0.5);
    }
    // a beats b, b beats c, c beats a.
    for &(w, l) in &[(0usize, 1usize), (1, 2), (2, 0)] {
        pref.set(w, l, t_pref);
        pref.set(l, w, 1.0 - t_pref);
    }
    PairwiseWorld::new(pref)
}

/// A random fully supported world: each conditional row is a normalized
/// vector of `0.05 + U(0, 1)` weights, so every ratio is finite.
/// Deterministic given `seed`.
pub fn random_world(
    n_prompts: usize,
    n_responses: usize,
    t: f64,
    seed: u64,
) -> Result<FiniteWorld, WorldError> {
    if n_prompts == 0 || n_responses == 0 {
        return Err(WorldError::ShapeMismatch);
    }
    let mut rng = rng::stream(seed, rng::purpose::WORLD_GEN);
    let mut draw = |rows: usize, cols: usize| -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            let weights: Vec<f64> = (0..cols).map(|_| 0.05 + rng.next_f64()).collect();
            let sum: f64 = weights.iter().sum();
            for (c, w) in weights.iter().enumerate() {
                m.set(r, c, w / sum);
            }
        }
        m
    };
    let p_plus = draw(n_prompts, n_responses);
    let p_minus = draw(n_prompts, n_responses);
    let prompt = draw(1, n_prompts);
    build_distribution_world(p_plus, p_minus, t, prompt.row(0).to_vec())
}

/// The canonical single-prompt example world used across tests and docs:
/// `p⁺ = (0.5, 0.3, 0.2)`, `p⁻ = (0.2, 0.3, 0.5)`, `t = 0.5`.
pub fn example_world_w1() -> FiniteWorld {
    build_distribution_world(
        Mat::from_rows(&[&[0.5, 0.3, 0.2]]),
        Mat::from_rows(&[&[0.2, 0.3, 0.5]]),
        0.5,
        alloc::vec![1.0],
    )
    .expect("w1 is valid by construction")
}
