//! Margin diagnostics, the ratio-based corpus filter, BLEU and sweeps.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sequential_batches, Corpus, Label, SentencePair, EOS};
use crate::margin::{sentence_kept, MarginError, MarginRecord, MarginVariant, MarginWeight};
use crate::model::{Checkpoint, ModelBundle, ModelError, DEFAULT_LENGTH_PENALTY};
use crate::trainer::{finetune, RunOptions, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Margin(#[from] MarginError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub const HISTOGRAM_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

/// Margin distribution over non-padding tokens. Percent and average come
/// from the raw deltas, not from the bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub sentences: usize,
    pub tokens: usize,
    pub percent_negative: f64,
    pub average_delta: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Uniform bins over `[-1, 1]`; the last bin is closed on the right.
pub fn histogram(deltas: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(AnalysisError::InvalidArgument("histogram needs at least one bin".into()));
    }
    let width = 2.0 / bins as f64;
    let mut counts = vec![0u64; bins];
    for &d in deltas {
        if !(-1.0..=1.0).contains(&d) {
            return Err(AnalysisError::InvalidArgument(format!("delta {} outside [-1, 1]", d)));
        }
        let i = (((d + 1.0) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin { bin_left: -1.0 + i as f64 * width, bin_right: -1.0 + (i + 1) as f64 * width, count })
        .collect())
}

pub fn stats_from_records(records: &[MarginRecord]) -> Result<MarginStats> {
    let deltas: Vec<f64> = records.iter().flat_map(|r| r.delta.iter().copied()).collect();
    if deltas.is_empty() {
        return Err(AnalysisError::InvalidArgument("no tokens to analyse".into()));
    }
    let negative = deltas.iter().filter(|&&d| d < 0.0).count();
    Ok(MarginStats {
        sentences: records.len(),
        tokens: deltas.len(),
        percent_negative: negative as f64 / deltas.len() as f64,
        average_delta: deltas.iter().sum::<f64>() / deltas.len() as f64,
        histogram: histogram(&deltas, HISTOGRAM_BINS)?,
    })
}

const ANALYSIS_BATCH: usize = 64;

/// Dropout-free margin records for `pairs`, in the given order. Tokens are
/// the target content followed by EOS.
pub fn margin_records(bundle: &ModelBundle, pairs: &[SentencePair]) -> Result<Vec<MarginRecord>> {
    let mut out = Vec::with_capacity(pairs.len());
    for batch in sequential_batches(pairs, ANALYSIS_BATCH) {
        let (p_nmt, p_lm) = bundle.golden_probabilities(&batch)?;
        let len = batch.tgt_out.len;
        for (b, &id) in batch.pair_ids.iter().enumerate() {
            let span = b * len..(b + 1) * len;
            let keep: Vec<usize> = span.clone().filter(|&i| !batch.tgt_out.pad[i]).collect();
            let tokens = keep.iter().map(|&i| batch.tgt_out.ids[i]).collect();
            let pn = keep.iter().map(|&i| p_nmt[i]).collect();
            let pl = keep.iter().map(|&i| p_lm[i]).collect();
            out.push(MarginRecord::new(id, tokens, pn, pl)?);
        }
    }
    Ok(out)
}

/// Seeded sample of `sample_size` pairs (all of them if the corpus is
/// smaller), ordered by pair id.
pub fn sample_pairs(pairs: &[SentencePair], sample_size: usize, seed: u64) -> Vec<SentencePair> {
    let mut picked: Vec<SentencePair> = if sample_size >= pairs.len() {
        pairs.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, pairs.len(), sample_size).into_iter().map(|i| pairs[i].clone()).collect()
    };
    picked.sort_by_key(|p| p.id);
    picked
}

pub fn compute_margin_stats(bundle: &ModelBundle, corpus: &Corpus, sample_size: usize, seed: u64) -> Result<MarginStats> {
    let sample = sample_pairs(&corpus.pairs, sample_size, seed);
    if sample.is_empty() {
        return Err(AnalysisError::InvalidArgument("empty sample".into()));
    }
    stats_from_records(&margin_records(bundle, &sample)?)
}

pub fn write_histogram<W: Write>(out: W, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of flagging pairs whose negative margin ratio reaches `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold_k: f64,
    pub kept: Vec<u64>,
    pub flagged: Vec<u64>,
    pub ratios: Vec<(u64, f64)>,
    pub true_positives: usize,
    pub hallucinated: usize,
    /// Fraction of flagged pairs that were planted hallucinations.
    pub precision: Option<f64>,
    /// Fraction of planted hallucinations that were flagged.
    pub recall: Option<f64>,
}

/// Flags exactly the records the sentence gate would drop at `k`.
pub fn filter_records(records: &[MarginRecord], labels: &HashMap<u64, Label>, threshold_k: f64) -> Result<FilterReport> {
    if !(threshold_k > 0.0 && threshold_k <= 1.0) {
        return Err(AnalysisError::InvalidArgument(format!("threshold_k must lie in (0, 1], got {}", threshold_k)));
    }
    let mut r = FilterReport {
        threshold_k,
        kept: Vec::new(),
        flagged: Vec::new(),
        ratios: Vec::with_capacity(records.len()),
        true_positives: 0,
        hallucinated: 0,
        precision: None,
        recall: None,
    };
    for rec in records {
        let bad = labels.get(&rec.id) == Some(&Label::Hallucinated);
        r.hallucinated += bad as usize;
        r.ratios.push((rec.id, rec.r));
        if sentence_kept(rec.r, threshold_k) {
            r.kept.push(rec.id);
        } else {
            r.flagged.push(rec.id);
            r.true_positives += bad as usize;
        }
    }
    if !r.flagged.is_empty() {
        r.precision = Some(r.true_positives as f64 / r.flagged.len() as f64);
    }
    if r.hallucinated > 0 {
        r.recall = Some(r.true_positives as f64 / r.hallucinated as f64);
    }
    Ok(r)
}

/// Scores every pair and splits the corpus into kept and flagged pairs.
pub fn filter_corpus(bundle: &ModelBundle, corpus: &Corpus, threshold_k: f64) -> Result<(FilterReport, Corpus)> {
    let records = margin_records(bundle, &corpus.pairs)?;
    let labels: HashMap<u64, Label> = corpus.pairs.iter().map(|p| (p.id, p.label)).collect();
    let report = filter_records(&records, &labels, threshold_k)?;
    let kept: std::collections::HashSet<u64> = report.kept.iter().copied().collect();
    let pairs = corpus.pairs.iter().filter(|p| kept.contains(&p.id)).cloned().collect();
    Ok((report, corpus.with_pairs(pairs)))
}

/// Corpus BLEU (×100) with clipped n-gram counts and a brevity penalty. With
/// `smooth`, an n-gram order above 1 with no matches is scored as
/// `(matches + 1) / (total + 1)`; without it, such an order makes BLEU 0.
pub fn bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize, smooth: bool) -> Result<f64> {
    if hyps.is_empty() {
        return Err(AnalysisError::InvalidArgument("BLEU of an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(AnalysisError::InvalidArgument(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    if max_n == 0 {
        return Err(AnalysisError::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(ref_counts.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if matches[n] == 0 {
            if !smooth || n == 0 {
                return Ok(0.0);
            }
            (1.0, totals[n] as f64 + 1.0)
        } else {
            (matches[n] as f64, totals[n] as f64)
        };
        log_sum += (m / t).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

fn ngram_counts<T: Eq + Hash + Clone>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 5, length_penalty: DEFAULT_LENGTH_PENALTY, max_len: 64 }
    }
}

pub fn translate(bundle: &ModelBundle, pairs: &[SentencePair], dc: DecodeConfig) -> Result<Vec<Vec<usize>>> {
    pairs
        .iter()
        .map(|p| {
            let out = if dc.beam_size == 1 {
                bundle.greedy_translate(&p.src, dc.max_len)?
            } else {
                bundle.beam_translate(&p.src, dc.beam_size, dc.max_len, dc.length_penalty)?
            };
            debug_assert!(!out.contains(&EOS));
            Ok(out)
        })
        .collect()
}

/// BLEU of the bundle's translations of `pairs` against their targets.
pub fn evaluate_bleu(bundle: &ModelBundle, pairs: &[SentencePair], dc: DecodeConfig) -> Result<f64> {
    let hyps = translate(bundle, pairs, dc)?;
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    bleu(&hyps, &refs, 4, true)
}

/// Axes of a finetuning sweep. Empty axes keep the base configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda_margin: Vec<f64>,
    pub threshold_k: Vec<f64>,
    pub variant: Vec<MarginVariant>,
    pub alpha: Vec<f64>,
    pub weight: Vec<MarginWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda_margin: f64,
    pub threshold_k: f64,
    pub variant: MarginVariant,
    pub alpha: f64,
    pub weight: MarginWeight,
}

impl SweepCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.objective.lambda_margin = self.lambda_margin;
        c.objective.threshold_k = self.threshold_k;
        c.objective.margin_function.variant = self.variant;
        c.objective.margin_function.alpha = self.alpha;
        c.objective.weight = self.weight;
        c
    }
}

impl SweepGrid {
    pub fn cells(&self, base: &TrainConfig) -> Vec<SweepCell> {
        let o = &base.objective;
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let lambdas = or(&self.lambda_margin, o.lambda_margin);
        let ks = or(&self.threshold_k, o.threshold_k);
        let alphas = or(&self.alpha, o.margin_function.alpha);
        let variants = if self.variant.is_empty() { vec![o.margin_function.variant] } else { self.variant.clone() };
        let weights = if self.weight.is_empty() { vec![o.weight] } else { self.weight.clone() };
        let mut cells = Vec::new();
        for &lambda_margin in &lambdas {
            for &threshold_k in &ks {
                for &variant in &variants {
                    for &alpha in &alphas {
                        for &weight in &weights {
                            cells.push(SweepCell { lambda_margin, threshold_k, variant, alpha, weight });
                        }
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub cell: SweepCell,
    pub bleu: Option<f64>,
    pub average_delta: Option<f64>,
    pub percent_negative: Option<f64>,
    pub error: Option<String>,
}

/// What each sweep cell is scored on.
#[derive(Clone, Debug)]
pub struct SweepEval<'a> {
    pub bleu_pairs: &'a [SentencePair],
    pub stats_pairs: &'a [SentencePair],
    pub decode: DecodeConfig,
}

/// Finetunes every cell from the same pretraining checkpoint. A failing cell
/// is recorded with its error and the sweep moves on.
pub fn run_sweep(
    base: &TrainConfig,
    data: &crate::corpus::CorpusSplits,
    pretrained: &Checkpoint,
    grid: &SweepGrid,
    eval: &SweepEval<'_>,
) -> Result<Vec<SweepRow>> {
    let cells = grid.cells(base);
    if cells.is_empty() {
        return Err(AnalysisError::InvalidArgument("sweep grid is empty".into()));
    }
    Ok(cells
        .into_iter()
        .map(|cell| {
            let run = || -> Result<(f64, MarginStats)> {
                let out = finetune(&cell.apply(base), data, pretrained, RunOptions::default())?;
                let bundle = out.bundle()?;
                let b = evaluate_bleu(&bundle, eval.bleu_pairs, eval.decode)?;
                let s = stats_from_records(&margin_records(&bundle, eval.stats_pairs)?)?;
                Ok((b, s))
            };
            match run() {
                Ok((b, s)) => SweepRow {
                    cell,
                    bleu: Some(b),
                    average_delta: Some(s.average_delta),
                    percent_negative: Some(s.percent_negative),
                    error: None,
                },
                Err(e) => SweepRow { cell, bleu: None, average_delta: None, percent_negative: None, error: Some(e.to_string()) },
            }
        })
        .collect())
}

pub fn write_sweep<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda_margin", "threshold_k", "variant", "alpha", "weight", "bleu", "average_delta", "percent_negative", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let weight = serde_json::to_value(r.cell.weight).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        w.write_record([
            r.cell.lambda_margin.to_string(),
            r.cell.threshold_k.to_string(),
            r.cell.variant.name().to_string(),
            r.cell.alpha.to_string(),
            weight,
            opt(r.bleu),
            opt(r.average_delta),
            opt(r.percent_negative),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, deltas: &[f64]) -> MarginRecord {
        let p_lm = vec![0.5; deltas.len()];
        let p_nmt: Vec<f64> = deltas.iter().map(|d| 0.5 + d).collect();
        MarginRecord::new(id, vec![4; deltas.len()], p_nmt, p_lm).unwrap()
    }

    #[test]
    fn stats_of_hand_built_records() {
        let s = stats_from_records(&[record(0, &[0.2, -0.1, 0.3, -0.4])]).unwrap();
        assert_eq!(s.percent_negative, 0.5);
        assert!(s.average_delta.abs() < 1e-15);
        assert_eq!(s.histogram.len(), HISTOGRAM_BINS);
        assert_eq!(s.histogram.iter().map(|b| b.count).sum::<u64>(), 4);
        assert!(stats_from_records(&[]).is_err());
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[-1.0, 1.0, 0.0, -0.0000001], 4).unwrap();
        assert_eq!(h.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 1, 1, 1]);
        assert_eq!(h[0].bin_left, -1.0);
        assert_eq!(h[3].bin_right, 1.0);
        assert!(histogram(&[1.5], 4).is_err());
    }

    #[test]
    fn filter_thresholds() {
        let recs = [record(0, &[-0.1, -0.2]), record(1, &[0.1, -0.2, 0.1]), record(2, &[0.3])];
        let labels: HashMap<u64, Label> = [(0, Label::Hallucinated), (1, Label::Clean), (2, Label::Clean)].into();
        let r = filter_records(&recs, &labels, 1.0).unwrap();
        assert!(r.flagged.is_empty());
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.precision, None);
        let r = filter_records(&recs, &labels, 0.3).unwrap();
        assert_eq!(r.flagged, vec![0, 1]);
        assert_eq!(r.kept, vec![2]);
        assert_eq!(r.precision, Some(0.5));
        assert_eq!(r.recall, Some(1.0));
        // Exactly at the threshold counts as flagged.
        let r = filter_records(&recs, &labels, 1.0 / 3.0).unwrap();
        assert_eq!(r.flagged, vec![0, 1]);
    }

    #[test]
    fn bleu_basics() {
        let s = |t: &str| t.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        let same = vec![s("a b c d e")];
        assert_eq!(bleu(&same, &same, 4, true).unwrap(), 100.0);
        assert_eq!(bleu(&[s("a b c d")], &[s("a b c e")], 4, false).unwrap(), 0.0);
        let got = bleu(&[s("a b c d")], &[s("a b c e")], 4, true).unwrap();
        let expect = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
        assert!(bleu::<String>(&[], &[], 4, true).is_err());
        assert!(bleu(&[s("a")], &[], 4, true).is_err());
    }

    #[test]
    fn brevity_penalty_applies_to_short_output() {
        let h = vec![vec![1, 2, 3, 4]];
        let r = vec![vec![1, 2, 3, 4, 5, 6, 7, 8]];
        let got = bleu(&h, &r, 4, true).unwrap();
        assert!((got - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn sweep_grid_expands_cartesian_product() {
        let base = TrainConfig::default();
        let g = SweepGrid { lambda_margin: vec![0.0, 5.0], variant: MarginVariant::ALL.to_vec(), ..Default::default() };
        let cells = g.cells(&base);
        assert_eq!(cells.len(), 8);
        assert!(cells.iter().all(|c| c.threshold_k == base.objective.threshold_k));
        assert_eq!(SweepGrid::default().cells(&base).len(), 1);
    }
}
