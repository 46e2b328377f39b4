//! Two-stage training: joint NMT + LM pretraining, then finetuning the
//! translation model against a frozen language model.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::corpus::{make_batches, sequential_batches, Batch, CorpusError, CorpusSplits, SentencePair};
use crate::margin::{
    margin_loss, sentence_cross_entropy, sentence_kept, sentence_margin_loss, sentence_ratios, Grid, MarginError,
    MarginFunctionSpec, MarginWeight,
};
use crate::model::{Checkpoint, CheckpointError, Forward, ModelBundle, ModelConfig, ModelError, OptimizerState, ParamStore, Trainable};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at {stage} step {step}{}", .snapshot.as_ref().map(|p| format!(" (snapshot written to {})", p.display())).unwrap_or_default())]
    NonFinite { stage: Stage, step: u64, what: String, snapshot: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Margin(#[from] MarginError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics file: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Pretrain => 0x7072_6574,
            Stage::Finetune => 0x6669_6e65,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(format!("unknown stage '{}'", s)),
        }
    }
}

/// Finetuning objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Plain cross-entropy.
    Ce,
    /// Cross-entropy plus the weighted margin loss, per token.
    Mto,
    /// `Mto`, dropping sentences whose negative margin ratio reaches `k`.
    Mso,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(Objective::Ce),
            "mto" => Ok(Objective::Mto),
            "mso" => Ok(Objective::Mso),
            _ => Err(format!("unknown objective '{}' (expected ce, mto or mso)", s)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub objective: Objective,
    pub lambda_margin: f64,
    pub lambda_lm: f64,
    pub threshold_k: f64,
    pub margin_function: MarginFunctionSpec,
    pub weight: MarginWeight,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mto,
            lambda_margin: 5.0,
            lambda_lm: 0.01,
            threshold_k: 0.3,
            margin_function: MarginFunctionSpec::default(),
            weight: MarginWeight::Weighted,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_margin >= 0.0 && self.lambda_margin.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lambda_margin must be >= 0, got {}", self.lambda_margin)));
        }
        if !(self.lambda_lm >= 0.0 && self.lambda_lm.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lambda_lm must be >= 0, got {}", self.lambda_lm)));
        }
        if !(self.threshold_k > 0.0 && self.threshold_k <= 1.0) {
            return Err(TrainError::InvalidConfig(format!("threshold_k must lie in (0, 1], got {}", self.threshold_k)));
        }
        self.margin_function.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub steps_pretrain: u64,
    pub steps_finetune: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Padded-token budget per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
    /// Evaluate every this many steps (0 = only at start and end).
    pub eval_every: u64,
    /// Number of training pairs tracked by the evaluation curves.
    pub eval_sample: usize,
    /// Keep training the LM on its own loss during finetuning.
    pub continue_lm: bool,
    /// Carry the pretraining step count into the finetuning schedule instead
    /// of restarting warmup.
    pub continue_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
            steps_pretrain: 2000,
            steps_finetune: 2000,
            peak_lr: 1e-3,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: 1.0,
            batch_tokens: 1024,
            seed: 1,
            checkpoint_every: 0,
            eval_every: 100,
            eval_sample: 500,
            continue_lm: false,
            continue_schedule: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.model.validate()?;
        if self.warmup_steps == 0 {
            return Err(TrainError::InvalidConfig("warmup_steps must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidConfig(format!("{} must lie in [0, 1), got {}", name, b)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::InvalidConfig("adam_eps must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(TrainError::InvalidConfig("clip_norm must be >= 0".into()));
        }
        if self.batch_tokens == 0 {
            return Err(TrainError::InvalidConfig("batch_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Linear warmup to `peak` at `warmup`, then inverse-square-root decay.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (w.sqrt() / s.sqrt()).min(s / w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments per parameter slot; slots that never received a
/// gradient stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self { step: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    pub fn moments(&self, index: usize) -> Option<(&[f64], &[f64])> {
        Some((self.m[index].as_deref()?, self.v[index].as_deref()?))
    }

    pub fn to_optimizer(&self, store: &ParamStore) -> OptimizerState {
        let moments = store
            .iter()
            .filter_map(|(id, name, t)| {
                let (m, v) = self.moments(id.index())?;
                let shape = t.shape().to_vec();
                Some((name.to_string(), Tensor::new(shape.clone(), m.to_vec()).ok()?, Tensor::new(shape, v.to_vec()).ok()?))
            })
            .collect();
        OptimizerState { step: self.step, moments }
    }

    pub fn from_optimizer(store: &ParamStore, opt: &OptimizerState) -> Result<Self> {
        let mut state = Self::new(store.len());
        state.step = opt.step;
        for (name, m, v) in &opt.moments {
            let id = store
                .id(name)
                .ok_or_else(|| TrainError::InvalidConfig(format!("optimizer state for unknown parameter {}", name)))?;
            if m.shape() != store.get(id).shape() || v.shape() != store.get(id).shape() {
                return Err(TrainError::InvalidConfig(format!("optimizer state for {} has the wrong shape", name)));
            }
            state.m[id.index()] = Some(m.data().to_vec());
            state.v[id.index()] = Some(v.data().to_vec());
        }
        Ok(state)
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` are
/// left untouched, moments included.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(TrainError::InvalidConfig(format!("non-finite gradient for {}", store.name(crate::model::ParamId(i)))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let Some(g) = &grads[id.index()] else { continue };
        let param = store.get_mut(id);
        if g.shape() != param.shape() {
            return Err(TrainError::InvalidConfig(format!("gradient shape {:?} vs parameter {:?}", g.shape(), param.shape())));
        }
        let n = g.numel();
        let m = state.m[id.index()].get_or_insert_with(|| vec![0.0; n]);
        let v = state.v[id.index()].get_or_insert_with(|| vec![0.0; n]);
        for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *p -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Scalar pieces of one batch loss, each normalised by the batch's
/// non-padding target token count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub nmt_ce: f64,
    pub lm_ce: f64,
    pub margin_loss: f64,
    /// Sentences whose ratio reaches the threshold (gated under MSO).
    pub gated: usize,
    pub sentences: usize,
    pub ratios: Vec<Option<f64>>,
}

/// A loss recorded on a graph, ready for `backward`.
pub struct LossGraph<'a> {
    pub f: Forward<'a>,
    pub root: Var,
    pub parts: LossParts,
}

impl LossGraph<'_> {
    /// Runs backward and returns per-parameter gradients.
    pub fn gradients(mut self) -> Result<(LossParts, Vec<Option<Tensor>>)> {
        self.f.g.backward(self.root)?;
        let grads = self.f.binder.gradients(&self.f.g);
        Ok((self.parts, grads))
    }
}

fn grid(batch: &Batch) -> Grid<'_> {
    Grid { batch: batch.tgt_out.batch, len: batch.tgt_out.len, pad: &batch.tgt_out.pad }
}

fn sentence_ce(f: &mut Forward<'_>, probs: Var, batch: &Batch) -> Result<(Var, Var)> {
    let gold = f.g.gather(probs, &batch.tgt_out.ids)?;
    let ce = sentence_cross_entropy(&mut f.g, gold, grid(batch))?;
    Ok((gold, ce))
}

fn token_count(batch: &Batch) -> Result<f64> {
    let n = batch.tgt_out.real_tokens();
    if n == 0 {
        return Err(ModelError::InvalidArgument("batch has no target tokens".into()).into());
    }
    Ok(n as f64)
}

/// Joint pretraining loss `ce_nmt + lambda_lm * ce_lm`. With `lambda_lm = 0`
/// the LM is evaluated off-graph, so LM-only parameters receive no gradient.
pub fn pretrain_graph<'a>(bundle: &ModelBundle, lambda_lm: f64, batch: &Batch, mut f: Forward<'a>) -> Result<LossGraph<'a>> {
    let n = token_count(batch)?;
    let probs = bundle.nmt_probs(&mut f, &batch.src, &batch.tgt_in)?;
    let (gold, ce) = sentence_ce(&mut f, probs, batch)?;
    let ce_total = f.g.sum(ce);
    let nmt = f.g.scale(ce_total, 1.0 / n);
    let p_nmt = f.g.value(gold).data().to_vec();
    let (root, lm_ce, p_lm) = if lambda_lm > 0.0 {
        let lm_probs = bundle.lm_probs(&mut f, &batch.tgt_in)?;
        let (lm_gold, lm_sent) = sentence_ce(&mut f, lm_probs, batch)?;
        let lm_total = f.g.sum(lm_sent);
        let lm = f.g.scale(lm_total, 1.0 / n);
        let weighted = f.g.scale(lm, lambda_lm);
        let root = f.g.add(nmt, weighted)?;
        (root, f.g.value(lm).item(), f.g.value(lm_gold).data().to_vec())
    } else {
        let lm_rows = bundle.lm_forward(&batch.tgt_in)?;
        let p_lm = lm_rows.gather(&batch.tgt_out);
        (nmt, nll(&p_lm, &batch.tgt_out.pad) / n, p_lm)
    };
    let ratios = sentence_ratios(&p_nmt, &p_lm, grid(batch))?;
    let parts = LossParts {
        loss: f.g.value(root).item(),
        nmt_ce: f.g.value(nmt).item(),
        lm_ce,
        margin_loss: 0.0,
        gated: 0,
        sentences: batch.tgt_out.batch,
        ratios,
    };
    Ok(LossGraph { f, root, parts })
}

fn nll(p: &[f64], pad: &[bool]) -> f64 {
    p.iter().zip(pad).filter(|(_, &pad)| !pad).map(|(p, _)| -p.ln()).sum()
}

/// Finetuning loss for `objective`. `p_lm` comes from a dropout-free pass of
/// the frozen LM unless `continue_lm` is set, in which case the LM runs on
/// the same graph and its cross-entropy is added with weight `lambda_lm`.
/// `select` optionally scales each sentence's term (used to probe the
/// gradient of a single sentence).
pub fn finetune_graph<'a>(
    bundle: &ModelBundle,
    obj: &ObjectiveConfig,
    continue_lm: bool,
    batch: &Batch,
    mut f: Forward<'a>,
    select: Option<&[f64]>,
) -> Result<LossGraph<'a>> {
    let n = token_count(batch)?;
    let b = batch.tgt_out.batch;
    if let Some(s) = select {
        if s.len() != b {
            return Err(TrainError::InvalidConfig(format!("selector has {} entries for {} sentences", s.len(), b)));
        }
    }
    let probs = bundle.nmt_probs(&mut f, &batch.src, &batch.tgt_in)?;
    let (gold, ce) = sentence_ce(&mut f, probs, batch)?;
    let p_nmt = f.g.value(gold).data().to_vec();

    let (p_lm, lm_term) = if continue_lm {
        let lm_probs = bundle.lm_probs(&mut f, &batch.tgt_in)?;
        let (lm_gold, lm_sent) = sentence_ce(&mut f, lm_probs, batch)?;
        let lm_total = f.g.sum(lm_sent);
        let lm = f.g.scale(lm_total, 1.0 / n);
        (f.g.value(lm_gold).data().to_vec(), Some(lm))
    } else {
        (bundle.lm_forward(&batch.tgt_in)?.gather(&batch.tgt_out), None)
    };
    let lm_ce = match lm_term {
        Some(v) => f.g.value(v).item(),
        None => nll(&p_lm, &batch.tgt_out.pad) / n,
    };

    let ratios = sentence_ratios(&p_nmt, &p_lm, grid(batch))?;
    let k = obj.threshold_k;
    let gated = ratios.iter().filter(|r| r.is_some_and(|r| !sentence_kept(r, k))).count();

    let per_sentence = match obj.objective {
        Objective::Ce => ce,
        Objective::Mto | Objective::Mso => {
            let m = sentence_margin_loss(&mut f.g, gold, &p_lm, grid(batch), &obj.margin_function, obj.weight)?;
            let m = f.g.scale(m, obj.lambda_margin);
            f.g.add(ce, m)?
        }
    };
    let mut scale: Option<Vec<f64>> = select.map(<[f64]>::to_vec);
    if obj.objective == Objective::Mso {
        let gate: Vec<f64> = ratios.iter().map(|r| if r.is_none_or(|r| sentence_kept(r, k)) { 1.0 } else { 0.0 }).collect();
        scale = Some(match scale {
            Some(s) => s.iter().zip(&gate).map(|(a, b)| a * b).collect(),
            None => gate,
        });
    }
    let per_sentence = match scale {
        Some(s) => {
            let c = f.g.constant(Tensor::new(vec![b], s)?);
            f.g.mul(per_sentence, c)?
        }
        None => per_sentence,
    };
    let total = f.g.sum(per_sentence);
    let mut root = f.g.scale(total, 1.0 / n);
    if let Some(lm) = lm_term {
        let weighted = f.g.scale(lm, obj.lambda_lm);
        root = f.g.add(root, weighted)?;
    }

    let ce_total = f.g.value(ce).data().iter().sum::<f64>() / n;
    let margin = margin_loss(&p_nmt, &p_lm, &batch.tgt_out.pad, &obj.margin_function, obj.weight)?;
    let parts = LossParts {
        loss: f.g.value(root).item(),
        nmt_ce: ce_total,
        lm_ce,
        margin_loss: margin,
        gated,
        sentences: b,
        ratios,
    };
    Ok(LossGraph { f, root, parts })
}

/// One row of the training curve, measured on a fixed sample of training
/// pairs with dropout off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: Stage,
    pub nmt_ce: f64,
    pub lm_ce: f64,
    pub margin_loss: f64,
    pub gated_fraction: f64,
    pub lr: f64,
}

/// Held-out cross-entropies of both models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRow {
    pub step: u64,
    pub stage: Stage,
    pub nmt_ce: f64,
    pub lm_ce: f64,
}

/// Token-averaged statistics of a set of pairs under a dropout-free forward.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub nmt_ce: f64,
    pub lm_ce: f64,
    pub margin_loss: f64,
    pub gated_fraction: f64,
}

const EVAL_BATCH_SENTENCES: usize = 64;

pub fn evaluate(bundle: &ModelBundle, obj: &ObjectiveConfig, pairs: &[SentencePair]) -> Result<EvalStats> {
    if pairs.is_empty() {
        return Err(TrainError::InvalidConfig("evaluation set is empty".into()));
    }
    let (mut nmt, mut lm, mut margin, mut tokens, mut gated) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for batch in sequential_batches(pairs, EVAL_BATCH_SENTENCES) {
        let (p_nmt, p_lm) = bundle.golden_probabilities(&batch)?;
        let pad = &batch.tgt_out.pad;
        let n = batch.tgt_out.real_tokens();
        nmt += nll(&p_nmt, pad);
        lm += nll(&p_lm, pad);
        margin += margin_loss(&p_nmt, &p_lm, pad, &obj.margin_function, obj.weight)? * n as f64;
        tokens += n;
        gated += sentence_ratios(&p_nmt, &p_lm, grid(&batch))?
            .iter()
            .filter(|r| r.is_some_and(|r| !sentence_kept(r, obj.threshold_k)))
            .count();
    }
    let t = tokens as f64;
    Ok(EvalStats { nmt_ce: nmt / t, lm_ce: lm / t, margin_loss: margin / t, gated_fraction: gated as f64 / pairs.len() as f64 })
}

/// What a step hook sees after each optimizer update.
pub struct StepReport<'a> {
    pub stage: Stage,
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub parts: &'a LossParts,
    pub bundle: &'a ModelBundle,
}

pub type StepHook<'h> = dyn FnMut(&StepReport<'_>) + 'h;

/// Optional outputs and controls for a training run.
#[derive(Default)]
pub struct RunOptions<'h> {
    /// Directory for checkpoints and metric files.
    pub out_dir: Option<PathBuf>,
    /// Stop (and checkpoint) after this step, as if interrupted.
    pub stop_after: Option<u64>,
    pub on_step: Option<Box<StepHook<'h>>>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub valid: Vec<ValidRow>,
    pub warnings: Vec<String>,
}

impl TrainOutcome {
    pub fn bundle(&self) -> Result<ModelBundle> {
        Ok(self.checkpoint.bundle()?)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const VALID_METRICS_FILE: &str = "valid_metrics.csv";

pub fn checkpoint_file(stage: Stage) -> String {
    format!("{}.ckpt", stage)
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    config: TrainConfig,
    metrics: Vec<MetricsRow>,
    valid: Vec<ValidRow>,
}

pub fn write_metrics<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Endless batch stream over epochs, reshuffled per (seed, epoch).
struct BatchStream<'c> {
    pairs: &'c [SentencePair],
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Batch>,
    next: usize,
}

impl<'c> BatchStream<'c> {
    fn new(pairs: &'c [SentencePair], batch_tokens: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TrainError::InvalidConfig("training corpus is empty".into()));
        }
        let batches = make_batches(pairs, batch_tokens, seed, 0)?;
        Ok(Self { pairs, batch_tokens, seed, epoch: 0, batches, next: 0 })
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.next == self.batches.len() {
            self.epoch += 1;
            self.batches = make_batches(self.pairs, self.batch_tokens, self.seed, self.epoch)?;
            self.next = 0;
        }
        self.next += 1;
        Ok(self.batches[self.next - 1].clone())
    }

    fn skip(&mut self, n: u64) -> Result<()> {
        let mut left = n;
        while left > 0 {
            let avail = (self.batches.len() - self.next) as u64;
            if left <= avail {
                self.next += left as usize;
                break;
            }
            left -= avail;
            self.next = self.batches.len();
            self.next_batch()?;
            left -= 1;
        }
        Ok(())
    }
}

fn step_rng(seed: u64, stage: Stage, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.salt());
    rng.set_stream(step);
    rng
}

/// Joint pretraining from scratch, or from `resume` if it is a pretraining
/// checkpoint.
pub fn pretrain(config: &TrainConfig, data: &CorpusSplits, resume: Option<&Checkpoint>, opts: RunOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    match resume {
        Some(ck) => {
            if ck.stage != Stage::Pretrain.name() {
                return Err(TrainError::InvalidConfig(format!("cannot resume pretraining from a {} checkpoint", ck.stage)));
            }
            let (bundle, adam, meta) = restore(ck)?;
            run_stage(config, data, Stage::Pretrain, bundle, adam, ck.step, meta, opts)
        }
        None => {
            let mut model = config.model.clone();
            model.vocab_size_src = data.train.src_vocab.len();
            model.vocab_size_tgt = data.train.tgt_vocab.len();
            let bundle = ModelBundle::new(model, config.seed)?;
            let adam = AdamState::new(bundle.store.len());
            run_stage(config, data, Stage::Pretrain, bundle, adam, 0, (Vec::new(), Vec::new()), opts)
        }
    }
}

/// Finetunes from a pretraining checkpoint, or resumes an interrupted
/// finetune from one of its own checkpoints. The architecture always comes
/// from the checkpoint; optimizer moments restart at the stage boundary.
pub fn finetune(config: &TrainConfig, data: &CorpusSplits, from: &Checkpoint, opts: RunOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    match from.stage.parse::<Stage>().map_err(TrainError::InvalidConfig)? {
        Stage::Finetune => {
            let (bundle, adam, meta) = restore(from)?;
            run_stage(config, data, Stage::Finetune, bundle, adam, from.step, meta, opts)
        }
        Stage::Pretrain => {
            let bundle = from.bundle()?;
            let adam = AdamState::new(bundle.store.len());
            run_stage(config, data, Stage::Finetune, bundle, adam, 0, (Vec::new(), Vec::new()), opts)
        }
    }
}

type Curves = (Vec<MetricsRow>, Vec<ValidRow>);

fn restore(ck: &Checkpoint) -> Result<(ModelBundle, AdamState, Curves)> {
    let bundle = ck.bundle()?;
    let adam = match &ck.optimizer {
        Some(o) => AdamState::from_optimizer(&bundle.store, o)?,
        None => AdamState::new(bundle.store.len()),
    };
    let meta: Option<RunMeta> = serde_json::from_value(ck.extra.clone()).ok();
    let curves = meta
        .map(|m| {
            (
                m.metrics.into_iter().filter(|r| r.step <= ck.step).collect(),
                m.valid.into_iter().filter(|r| r.step <= ck.step).collect(),
            )
        })
        .unwrap_or_default();
    Ok((bundle, adam, curves))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    config: &TrainConfig,
    data: &CorpusSplits,
    stage: Stage,
    mut bundle: ModelBundle,
    mut adam: AdamState,
    start: u64,
    curves: Curves,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    let (mut metrics, mut valid) = curves;
    let total = match stage {
        Stage::Pretrain => config.steps_pretrain,
        Stage::Finetune => config.steps_finetune,
    };
    let obj = &config.objective;
    let mut warnings = Vec::new();
    if stage == Stage::Finetune && obj.objective == Objective::Mso && obj.threshold_k >= 1.0 {
        warnings.push(format!("threshold_k = {} disables the sentence gate; MSO reduces to MTO", obj.threshold_k));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let seed = config.seed ^ stage.salt();
    let mut stream = BatchStream::new(&data.train.pairs, config.batch_tokens, seed)?;
    stream.skip(start)?;
    let sample = &data.train.pairs[..config.eval_sample.min(data.train.pairs.len())];
    let trainable = match (stage, config.continue_lm) {
        (Stage::Finetune, false) => Trainable::NmtSide,
        _ => Trainable::All,
    };
    let offset = match stage {
        Stage::Finetune if config.continue_schedule => config.steps_pretrain,
        _ => 0,
    };
    let lr_of = |step: u64| lr_at(step + offset, config.peak_lr, config.warmup_steps);

    let record = |bundle: &ModelBundle, step: u64, metrics: &mut Vec<MetricsRow>, valid: &mut Vec<ValidRow>| -> Result<()> {
        let s = evaluate(bundle, obj, sample)?;
        let lr = if step == 0 { 0.0 } else { lr_of(step) };
        metrics.push(MetricsRow {
            step,
            stage,
            nmt_ce: s.nmt_ce,
            lm_ce: s.lm_ce,
            margin_loss: s.margin_loss,
            gated_fraction: s.gated_fraction,
            lr,
        });
        if !data.valid.pairs.is_empty() {
            let v = evaluate(bundle, obj, &data.valid.pairs)?;
            valid.push(ValidRow { step, stage, nmt_ce: v.nmt_ce, lm_ce: v.lm_ce });
        }
        Ok(())
    };
    let snapshot = |bundle: &ModelBundle, adam: &AdamState, step: u64, metrics: &[MetricsRow], valid: &[ValidRow]| -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_bundle(bundle, stage.name(), step);
        ck.optimizer = Some(adam.to_optimizer(&bundle.store));
        ck.extra = serde_json::to_value(RunMeta { config: config.clone(), metrics: metrics.to_vec(), valid: valid.to_vec() })?;
        Ok(ck)
    };
    let save = |ck: &Checkpoint, name: &str, metrics: &[MetricsRow], valid: &[ValidRow]| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            ck.save(dir.join(name))?;
            write_metrics(&dir.join(METRICS_FILE), metrics)?;
            write_metrics(&dir.join(VALID_METRICS_FILE), valid)?;
        }
        Ok(())
    };

    if start == 0 && metrics.is_empty() {
        record(&bundle, 0, &mut metrics, &mut valid)?;
    }
    let dropout = bundle.config.dropout_rate;
    for step in start + 1..=total {
        let batch = stream.next_batch()?;
        let mut rng = step_rng(config.seed, stage, step);
        let (parts, mut grads) = {
            let f = Forward::train(&bundle.store, trainable, dropout, &mut rng);
            let lg = match stage {
                Stage::Pretrain => pretrain_graph(&bundle, obj.lambda_lm, &batch, f)?,
                Stage::Finetune => finetune_graph(&bundle, obj, config.continue_lm, &batch, f, None)?,
            };
            if !lg.parts.loss.is_finite() {
                let what = format!("loss ({})", lg.parts.loss);
                drop(lg);
                return Err(diverged(&bundle, &adam, stage, step, what, &opts));
            }
            lg.gradients()?
        };
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(diverged(&bundle, &adam, stage, step, "gradient".into(), &opts));
        }
        let grad_norm = clip_gradients(&mut grads, config.clip_norm);
        let lr = lr_of(step);
        adam_step(&mut bundle.store, &grads, &mut adam, lr, config.adam())?;
        if let Some(hook) = opts.on_step.as_mut() {
            hook(&StepReport { stage, step, lr, grad_norm, parts: &parts, bundle: &bundle });
        }
        let last = step == total || opts.stop_after == Some(step);
        if last || (config.eval_every > 0 && step % config.eval_every == 0) {
            record(&bundle, step, &mut metrics, &mut valid)?;
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && !last {
            let ck = snapshot(&bundle, &adam, step, &metrics, &valid)?;
            save(&ck, &format!("{}-{:06}.ckpt", stage, step), &metrics, &valid)?;
        }
        if opts.stop_after == Some(step) && step < total {
            let ck = snapshot(&bundle, &adam, step, &metrics, &valid)?;
            save(&ck, &format!("{}-{:06}.ckpt", stage, step), &metrics, &valid)?;
            return Ok(TrainOutcome { checkpoint: ck, metrics, valid, warnings });
        }
    }
    let ck = snapshot(&bundle, &adam, total.max(start), &metrics, &valid)?;
    save(&ck, &checkpoint_file(stage), &metrics, &valid)?;
    Ok(TrainOutcome { checkpoint: ck, metrics, valid, warnings })
}

fn diverged(bundle: &ModelBundle, adam: &AdamState, stage: Stage, step: u64, what: String, opts: &RunOptions<'_>) -> TrainError {
    let snapshot = opts.out_dir.as_ref().and_then(|dir| {
        let path = dir.join(format!("diverged-{}-{:06}.ckpt", stage, step));
        let mut ck = Checkpoint::from_bundle(bundle, stage.name(), step - 1);
        ck.optimizer = Some(adam.to_optimizer(&bundle.store));
        ck.save(&path).ok().map(|_| path)
    });
    TrainError::NonFinite { stage, step, what, snapshot }
}
