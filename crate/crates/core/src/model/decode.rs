use super::{Forward, ModelBundle, ModelError, Result, Trainable};
use crate::autodiff::Tensor;
use crate::corpus::{PaddedIds, BOS, EOS};

/// Length-penalty exponent used unless configured otherwise.
pub const DEFAULT_LENGTH_PENALTY: f64 = 0.6;

/// Anything that can score the next token for a set of equal-length prefixes.
pub trait StepScorer {
    /// Natural-log next-token distributions, one row per prefix. Prefixes hold
    /// generated tokens only (no BOS).
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Translation model conditioned on one source sentence. The encoder runs
/// once; each step re-runs the decoder over the whole prefix.
pub struct NmtScorer<'a> {
    bundle: &'a ModelBundle,
    memory: Tensor,
    src_pad: Vec<bool>,
}

impl<'a> NmtScorer<'a> {
    /// `src` holds content tokens; EOS is appended here.
    pub fn new(bundle: &'a ModelBundle, src: &[usize]) -> Result<Self> {
        let row: Vec<usize> = src.iter().copied().chain(std::iter::once(EOS)).collect();
        let ids = PaddedIds::from_rows(&[row]);
        let mut f = Forward::eval(&bundle.store, Trainable::None);
        let mem = bundle.encode(&mut f, &ids)?;
        Ok(Self { bundle, memory: f.g.value(mem).clone(), src_pad: ids.pad })
    }
}

impl StepScorer for NmtScorer<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let rows: Vec<Vec<usize>> = prefixes.iter().map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect()).collect();
        let tgt = PaddedIds::from_rows(&rows);
        let (s, d) = (self.memory.shape()[1], self.memory.shape()[2]);
        let mut mem = Vec::with_capacity(n * s * d);
        let mut pad = Vec::with_capacity(n * s);
        for _ in 0..n {
            mem.extend_from_slice(self.memory.data());
            pad.extend_from_slice(&self.src_pad);
        }
        let mut f = Forward::eval(&self.bundle.store, Trainable::None);
        let memory = f.g.constant(Tensor::new(vec![n, s, d], mem)?);
        let probs = self.bundle.decode_with_memory(&mut f, memory, &pad, &tgt)?;
        let value = f.g.value(probs);
        let v = value.shape()[2];
        Ok((0..n)
            .map(|b| {
                // Prefixes may differ in length only through padding; use each one's last real slot.
                let t = rows[b].len() - 1;
                let off = (b * tgt.len + t) * v;
                value.data()[off..off + v].iter().map(|p| p.ln()).collect()
            })
            .collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token until EOS or `max_len` tokens.
pub fn greedy_decode(scorer: &impl StepScorer, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = scorer.next_log_probs(std::slice::from_ref(&out))?;
        let next = argmax(&lp[0]);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// `((5 + len) / 6)^alpha`; equals 1 when `alpha` is 0.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
}

/// Beam search returning the finished hypothesis with the highest
/// length-normalised log-probability. Hypotheses still open at `max_len`
/// are finished as they stand.
pub fn beam_decode(scorer: &impl StepScorer, beam_size: usize, max_len: usize, alpha: f64) -> Result<Vec<usize>> {
    if beam_size == 0 {
        return Err(ModelError::InvalidArgument("beam_size must be at least 1".into()));
    }
    let mut alive = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
    // (tokens, raw score, penalised score)
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, row) in lps.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                cands.push((alive[h].score + lp, h, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        for &(score, h, tok) in cands.iter().take(beam_size) {
            if tok == EOS {
                let len = alive[h].tokens.len() + 1;
                finished.push((alive[h].tokens.clone(), score / length_penalty(len, alpha)));
            } else {
                let mut tokens = alive[h].tokens.clone();
                tokens.push(tok);
                next.push(Hyp { tokens, score });
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam_size {
            break;
        }
    }
    for h in alive {
        let len = h.tokens.len();
        finished.push((h.tokens, h.score / length_penalty(len, alpha)));
    }
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.1 > finished[best].1 {
            best = i;
        }
    }
    Ok(finished.swap_remove(best).0)
}

impl ModelBundle {
    /// Longest output the decoder can produce (BOS takes one position).
    pub fn max_output_len(&self) -> usize {
        self.config.max_len - 1
    }

    pub fn greedy_translate(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        greedy_decode(&NmtScorer::new(self, src)?, max_len.min(self.max_output_len()))
    }

    pub fn beam_translate(&self, src: &[usize], beam_size: usize, max_len: usize, alpha: f64) -> Result<Vec<usize>> {
        beam_decode(&NmtScorer::new(self, src)?, beam_size, max_len.min(self.max_output_len()), alpha)
    }
}
