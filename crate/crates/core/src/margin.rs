//! Margin between the translation model and the language model, the margin
//! functions built on it, and the token- and sentence-level objectives.
//!
//! Scalar helpers operate on plain `f64`; the `sentence_*` functions build the
//! same quantities on an autodiff [`Graph`] for training. The language model's
//! probabilities always enter as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

#[derive(Debug, Error)]
pub enum MarginError {
    #[error("probability {value} for {which} lies outside [0, 1]")]
    ProbabilityOutOfRange { which: &'static str, value: f64 },
    #[error("margin {0} lies outside [-1, 1]")]
    DeltaOutOfRange(f64),
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("sentence has no non-padding tokens")]
    EmptySentence,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, MarginError>;

/// Default clamp applied to the margin before the logarithmic variant.
pub const LOG_CLAMP_EPSILON: f64 = 1e-6;

/// `p_nmt - p_lm` for one golden token.
pub fn delta(p_nmt: f64, p_lm: f64) -> Result<f64> {
    for (which, value) in [("p_nmt", p_nmt), ("p_lm", p_lm)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MarginError::ProbabilityOutOfRange { which, value });
        }
    }
    Ok(p_nmt - p_lm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginVariant {
    Linear,
    Cube,
    Quintic,
    Log,
}

impl MarginVariant {
    pub const ALL: [MarginVariant; 4] = [Self::Linear, Self::Cube, Self::Quintic, Self::Log];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cube => "cube",
            Self::Quintic => "quintic",
            Self::Log => "log",
        }
    }
}

impl std::str::FromStr for MarginVariant {
    type Err = MarginError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cube" => Ok(Self::Cube),
            "quintic" => Ok(Self::Quintic),
            "log" => Ok(Self::Log),
            other => Err(MarginError::InvalidConfig(format!("unknown margin function '{}'", other))),
        }
    }
}

/// A monotonically nonincreasing map from margin to penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginFunctionSpec {
    pub variant: MarginVariant,
    /// Temperature of the logarithmic variant.
    pub alpha: f64,
    /// Half-width trimmed from each end of [-1, 1] before taking the logarithm.
    pub clamp_epsilon: f64,
}

impl Default for MarginFunctionSpec {
    fn default() -> Self {
        Self { variant: MarginVariant::Quintic, alpha: 10.0, clamp_epsilon: LOG_CLAMP_EPSILON }
    }
}

impl MarginFunctionSpec {
    pub fn new(variant: MarginVariant, alpha: f64, clamp_epsilon: f64) -> Result<Self> {
        let spec = Self { variant, alpha, clamp_epsilon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn of(variant: MarginVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(MarginError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon < 0.1) {
            return Err(MarginError::InvalidConfig(format!(
                "clamp_epsilon must lie in (0, 0.1), got {}",
                self.clamp_epsilon
            )));
        }
        Ok(())
    }

    /// Evaluates M(d) for `d` in [-1, 1].
    pub fn eval(&self, d: f64) -> f64 {
        match self.variant {
            MarginVariant::Linear => (1.0 - d) / 2.0,
            MarginVariant::Cube => (1.0 - d.powi(3)) / 2.0,
            MarginVariant::Quintic => (1.0 - d.powi(5)) / 2.0,
            MarginVariant::Log => {
                let c = d.clamp(-1.0 + self.clamp_epsilon, 1.0 - self.clamp_epsilon);
                ((1.0 - c).ln() - (1.0 + c).ln()) / self.alpha + 0.5
            }
        }
    }

    /// Applies M elementwise to the margins held by `d`.
    pub fn apply(&self, g: &mut Graph, d: Var) -> Var {
        match self.variant {
            MarginVariant::Linear => {
                let s = g.scale(d, -0.5);
                g.add_scalar(s, 0.5)
            }
            MarginVariant::Cube | MarginVariant::Quintic => {
                let n = if self.variant == MarginVariant::Cube { 3 } else { 5 };
                let p = g.powi(d, n);
                let s = g.scale(p, -0.5);
                g.add_scalar(s, 0.5)
            }
            MarginVariant::Log => {
                let eps = self.clamp_epsilon;
                let c = g.clamp(d, -1.0 + eps, 1.0 - eps);
                let neg = g.scale(c, -1.0);
                let one_minus = g.add_scalar(neg, 1.0);
                let one_plus = g.add_scalar(c, 1.0);
                let ln_minus = g.log(one_minus);
                let ln_plus = g.log(one_plus);
                let ratio = g.sub(ln_minus, ln_plus).expect("same shape");
                let s = g.scale(ratio, 1.0 / self.alpha);
                g.add_scalar(s, 0.5)
            }
        }
    }
}

/// Fraction of non-padding tokens whose margin is strictly negative.
pub fn negative_margin_ratio(deltas: &[f64], pad: &[bool]) -> Result<f64> {
    if deltas.len() != pad.len() {
        return Err(MarginError::Misaligned(format!("{} margins vs {} mask entries", deltas.len(), pad.len())));
    }
    let mut total = 0usize;
    let mut negative = 0usize;
    for (&d, &is_pad) in deltas.iter().zip(pad) {
        if is_pad {
            continue;
        }
        total += 1;
        if d < 0.0 {
            negative += 1;
        }
    }
    if total == 0 {
        return Err(MarginError::EmptySentence);
    }
    Ok(negative as f64 / total as f64)
}

/// Whether the sentence-level indicator keeps a sentence with ratio `r`.
///
/// A threshold of 1 or more disables the gate entirely.
pub fn sentence_kept(r: f64, threshold_k: f64) -> bool {
    threshold_k >= 1.0 || r < threshold_k
}

/// Token-level objective: `ce + lambda_margin * margin`.
pub fn mto_loss(ce_nmt: f64, l_margin: f64, lambda_margin: f64) -> f64 {
    ce_nmt + lambda_margin * l_margin
}

/// Sentence-level objective: the token-level loss when the sentence is kept, else 0.
pub fn mso_loss(l_token: f64, r: f64, threshold_k: f64) -> f64 {
    if sentence_kept(r, threshold_k) {
        l_token
    } else {
        0.0
    }
}

/// Joint pretraining loss: `ce_nmt + lambda_lm * ce_lm`.
pub fn pretrain_loss(ce_nmt: f64, ce_lm: f64, lambda_lm: f64) -> f64 {
    ce_nmt + lambda_lm * ce_lm
}

/// How the margin loss weighs each token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginWeight {
    /// `(1 - p_nmt)`, gradient-carrying.
    #[default]
    Weighted,
    /// `(1 - p_nmt)` treated as a constant.
    DetachedWeight,
    /// No weight: plain sum of M(delta).
    Unweighted,
}

/// Margin loss on plain numbers, normalised like [`sentence_cross_entropy`]:
/// summed over non-padding tokens of every sentence and divided by the total
/// count of non-padding tokens.
pub fn margin_loss(p_nmt: &[f64], p_lm: &[f64], pad: &[bool], spec: &MarginFunctionSpec, weight: MarginWeight) -> Result<f64> {
    if p_nmt.len() != p_lm.len() || p_nmt.len() != pad.len() {
        return Err(MarginError::Misaligned(format!(
            "p_nmt has {}, p_lm {}, mask {} entries",
            p_nmt.len(),
            p_lm.len(),
            pad.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..p_nmt.len() {
        if pad[i] {
            continue;
        }
        let d = delta(p_nmt[i], p_lm[i])?;
        let w = match weight {
            MarginWeight::Unweighted => 1.0,
            _ => 1.0 - p_nmt[i],
        };
        total += w * spec.eval(d);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Shape of a padded token grid `[batch, len]` with its padding mask.
#[derive(Clone, Copy, Debug)]
pub struct Grid<'a> {
    pub batch: usize,
    pub len: usize,
    pub pad: &'a [bool],
}

impl Grid<'_> {
    pub fn real_tokens(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }

    fn check(&self, what: &str, n: usize) -> Result<()> {
        if n != self.batch * self.len || self.pad.len() != n {
            return Err(MarginError::Misaligned(format!(
                "{} has {} entries, grid is {}x{} with {} mask entries",
                what,
                n,
                self.batch,
                self.len,
                self.pad.len()
            )));
        }
        Ok(())
    }

    fn keep_mask(&self) -> Tensor {
        let data = self.pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
        Tensor::new(vec![self.batch, self.len], data).expect("grid shape")
    }
}

/// Per-sentence summed negative log-likelihood `[batch]` of golden-token
/// probabilities `[batch, len]`; padding contributes 0.
pub fn sentence_cross_entropy(g: &mut Graph, gold_probs: Var, grid: Grid<'_>) -> Result<Var> {
    grid.check("gold probabilities", g.value(gold_probs).numel())?;
    let safe = g.masked_fill(gold_probs, grid.pad, 1.0)?;
    let logs = g.log(safe);
    let nll = g.scale(logs, -1.0);
    Ok(g.sum_last(nll))
}

/// Per-sentence margin loss `[batch]`. `p_lm` is a constant; gradient flows
/// through `gold_probs` in both the margin and (unless detached or removed)
/// the `1 - p_nmt` weight.
pub fn sentence_margin_loss(
    g: &mut Graph,
    gold_probs: Var,
    p_lm: &[f64],
    grid: Grid<'_>,
    spec: &MarginFunctionSpec,
    weight: MarginWeight,
) -> Result<Var> {
    grid.check("gold probabilities", g.value(gold_probs).numel())?;
    grid.check("language-model probabilities", p_lm.len())?;
    let lm = g.constant(Tensor::new(vec![grid.batch, grid.len], p_lm.to_vec())?);
    let d = g.sub(gold_probs, lm)?;
    let m = spec.apply(g, d);
    let weighted = match weight {
        MarginWeight::Unweighted => m,
        MarginWeight::Weighted | MarginWeight::DetachedWeight => {
            let p = if weight == MarginWeight::DetachedWeight { g.detach(gold_probs) } else { gold_probs };
            let neg = g.scale(p, -1.0);
            let w = g.add_scalar(neg, 1.0);
            g.mul(w, m)?
        }
    };
    let keep = g.constant(grid.keep_mask());
    let masked = g.mul(weighted, keep)?;
    Ok(g.sum_last(masked))
}

/// Negative margin ratio of every sentence in the grid; `None` for sentences
/// that are entirely padding.
pub fn sentence_ratios(p_nmt: &[f64], p_lm: &[f64], grid: Grid<'_>) -> Result<Vec<Option<f64>>> {
    grid.check("p_nmt", p_nmt.len())?;
    grid.check("p_lm", p_lm.len())?;
    let deltas: Vec<f64> = p_nmt.iter().zip(p_lm).map(|(a, b)| a - b).collect();
    (0..grid.batch)
        .map(|b| {
            let span = b * grid.len..(b + 1) * grid.len;
            match negative_margin_ratio(&deltas[span.clone()], &grid.pad[span]) {
                Ok(r) => Ok(Some(r)),
                Err(MarginError::EmptySentence) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// One training margin record: the golden-token probabilities of both models
/// for a single sentence, plus its negative margin ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub id: u64,
    pub tokens: Vec<usize>,
    pub p_nmt: Vec<f64>,
    pub p_lm: Vec<f64>,
    pub delta: Vec<f64>,
    pub r: f64,
}

impl MarginRecord {
    /// Builds a record from unpadded per-token probabilities.
    pub fn new(id: u64, tokens: Vec<usize>, p_nmt: Vec<f64>, p_lm: Vec<f64>) -> Result<Self> {
        if tokens.len() != p_nmt.len() || tokens.len() != p_lm.len() {
            return Err(MarginError::Misaligned(format!(
                "{} tokens, {} p_nmt, {} p_lm",
                tokens.len(),
                p_nmt.len(),
                p_lm.len()
            )));
        }
        let delta = p_nmt.iter().zip(&p_lm).map(|(&a, &b)| delta(a, b)).collect::<Result<Vec<_>>>()?;
        let r = negative_margin_ratio(&delta, &vec![false; delta.len()])?;
        Ok(Self { id, tokens, p_nmt, p_lm, delta, r })
    }
}

/// Writes records as JSON lines, one sentence per line.
pub fn write_records<W: std::io::Write>(mut out: W, records: &[MarginRecord]) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: std::io::BufRead>(input: R) -> std::io::Result<Vec<MarginRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
