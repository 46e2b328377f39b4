//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use marginmt::autodiff::{finite_diff_check, AutodiffError, GradCheckReport, Graph, Tensor, Var};
use marginmt::corpus::{Batch, Label, SentencePair};
use marginmt::margin::{sentence_cross_entropy, sentence_margin_loss, Grid, MarginFunctionSpec, MarginVariant, MarginWeight};
use marginmt::model::{ModelBundle, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Ad<T> = Result<T, AutodiffError>;

pub fn tiny_config(vocab_src: usize, vocab_tgt: usize) -> ModelConfig {
    ModelConfig {
        vocab_size_src: vocab_src,
        vocab_size_tgt: vocab_tgt,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_lm_layers: 1,
        dropout_rate: 0.1,
        max_len: 12,
    }
}

pub fn tiny_bundle(seed: u64) -> ModelBundle {
    ModelBundle::new(tiny_config(12, 10), seed).unwrap()
}

pub fn pairs(rows: &[(Vec<usize>, Vec<usize>)]) -> Vec<SentencePair> {
    rows.iter()
        .enumerate()
        .map(|(i, (s, t))| SentencePair { id: i as u64, src: s.clone(), tgt: t.clone(), label: Label::Clean })
        .collect()
}

pub fn batch_of(rows: &[(Vec<usize>, Vec<usize>)]) -> Batch {
    let owned = pairs(rows);
    Batch::from_pairs(&owned.iter().collect::<Vec<_>>())
}

/// Random sentences over content ids `4..vocab`.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, vocab_src: usize, vocab_tgt: usize, max_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..n)
        .map(|_| {
            let ls = rng.random_range(1..=max_len);
            let lt = rng.random_range(1..=max_len);
            let s = (0..ls).map(|_| rng.random_range(4..vocab_src)).collect();
            let t = (0..lt).map(|_| rng.random_range(4..vocab_tgt)).collect();
            (s, t)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Uniform values whose magnitude is at least `gap`, keeping inputs off kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.5);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Ad<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

type Case = (String, Tensor, Box<dyn Fn(&mut Graph, Var) -> Ad<Var>>);

fn case(name: &str, x: Tensor, f: impl Fn(&mut Graph, Var) -> Ad<Var> + 'static) -> Case {
    (name.to_string(), x, Box::new(f))
}

/// One randomized instance of every primitive (each operand position that
/// can carry a gradient) plus the full token- and sentence-level losses.
pub fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<Case> = Vec::new();

    let b = uniform(r, &[3, 2], -1.0, 1.0);
    let w = uniform(r, &[2, 2], -1.0, 1.0);
    cases.push(case("matmul/left", uniform(r, &[2, 3], -1.0, 1.0), move |g, x| {
        let c = g.constant(b.clone());
        let y = g.matmul(x, c)?;
        project(g, y, &w)
    }));
    let a = uniform(r, &[2, 3], -1.0, 1.0);
    let w = uniform(r, &[2, 2], -1.0, 1.0);
    cases.push(case("matmul/right", uniform(r, &[3, 2], -1.0, 1.0), move |g, x| {
        let c = g.constant(a.clone());
        let y = g.matmul(c, x)?;
        project(g, y, &w)
    }));
    let b = uniform(r, &[2, 2, 2], -1.0, 1.0);
    let w = uniform(r, &[2, 2, 2], -1.0, 1.0);
    cases.push(case("matmul/batched", uniform(r, &[2, 2, 2], -1.0, 1.0), move |g, x| {
        let c = g.constant(b.clone());
        let y = g.matmul(x, c)?;
        project(g, y, &w)
    }));

    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let other = uniform(r, &[3, 4], -1.0, 1.0);
        let w = uniform(r, &[3, 4], -1.0, 1.0);
        let o2 = other.clone();
        let w2 = w.clone();
        let apply = move |g: &mut Graph, a: Var, b: Var| -> Ad<Var> {
            match op {
                0 => g.add(a, b),
                1 => g.sub(a, b),
                _ => g.mul(a, b),
            }
        };
        cases.push(case(&format!("{}/left", name), uniform(r, &[3, 4], -1.0, 1.0), move |g, x| {
            let c = g.constant(other.clone());
            let y = apply(g, x, c)?;
            project(g, y, &w)
        }));
        cases.push(case(&format!("{}/right", name), uniform(r, &[3, 4], -1.0, 1.0), move |g, x| {
            let c = g.constant(o2.clone());
            let y = apply(g, c, x)?;
            project(g, y, &w2)
        }));
        let big = uniform(r, &[3, 4], -1.0, 1.0);
        let w = uniform(r, &[3, 4], -1.0, 1.0);
        cases.push(case(&format!("{}/expanded", name), uniform(r, &[4], -1.0, 1.0), move |g, x| {
            let c = g.constant(big.clone());
            let y = apply(g, c, x)?;
            project(g, y, &w)
        }));
    }

    let w = uniform(r, &[8], -1.0, 1.0);
    cases.push(case("scale", uniform(r, &[8], -1.0, 1.0), move |g, x| {
        let y = g.scale(x, -1.7);
        project(g, y, &w)
    }));
    let w = uniform(r, &[8], -1.0, 1.0);
    cases.push(case("add_scalar", uniform(r, &[8], -1.0, 1.0), move |g, x| {
        let y = g.add_scalar(x, 0.3);
        let y = g.mul(y, y)?;
        project(g, y, &w)
    }));
    let w = uniform(r, &[2, 4], -1.0, 1.0);
    cases.push(case("softmax", uniform(r, &[2, 4], -2.0, 2.0), move |g, x| {
        let y = g.softmax(x);
        project(g, y, &w)
    }));
    let w = uniform(r, &[8], -1.0, 1.0);
    cases.push(case("log", uniform(r, &[8], 0.2, 2.0), move |g, x| {
        let y = g.log(x);
        project(g, y, &w)
    }));
    let w = uniform(r, &[8], -1.0, 1.0);
    cases.push(case("exp", uniform(r, &[8], -1.0, 1.0), move |g, x| {
        let y = g.exp(x);
        project(g, y, &w)
    }));

    let gain = uniform(r, &[4], 0.5, 1.5);
    let bias = uniform(r, &[4], -0.5, 0.5);
    let w = uniform(r, &[2, 4], -1.0, 1.0);
    let (g1, b1, w1) = (gain.clone(), bias.clone(), w.clone());
    cases.push(case("layer_norm/input", uniform(r, &[2, 4], -1.0, 1.0), move |g, x| {
        let gn = g.constant(g1.clone());
        let bs = g.constant(b1.clone());
        let y = g.layer_norm(x, gn, bs, 1e-5)?;
        project(g, y, &w1)
    }));
    let xin = uniform(r, &[2, 4], -1.0, 1.0);
    let (x2, b2, w2) = (xin.clone(), bias.clone(), w.clone());
    cases.push(case("layer_norm/gain", gain.clone(), move |g, gn| {
        let x = g.constant(x2.clone());
        let bs = g.constant(b2.clone());
        let y = g.layer_norm(x, gn, bs, 1e-5)?;
        project(g, y, &w2)
    }));
    cases.push(case("layer_norm/bias", bias, move |g, bs| {
        let x = g.constant(xin.clone());
        let gn = g.constant(gain.clone());
        let y = g.layer_norm(x, gn, bs, 1e-5)?;
        project(g, y, &w)
    }));

    let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
    let w = uniform(r, &[2, 2, 3], -1.0, 1.0);
    cases.push(case("embedding", uniform(r, &[5, 3], -1.0, 1.0), move |g, x| {
        let y = g.embedding(x, &ids, &[2, 2])?;
        project(g, y, &w)
    }));
    let mask: Vec<bool> = (0..8).map(|_| r.random::<bool>()).collect();
    let w = uniform(r, &[8], -1.0, 1.0);
    cases.push(case("masked_fill", uniform(r, &[8], -1.0, 1.0), move |g, x| {
        let y = g.masked_fill(x, &mask, -3.0)?;
        let y = g.mul(y, y)?;
        project(g, y, &w)
    }));
    let w = uniform(r, &[3, 4], -1.0, 1.0);
    cases.push(case("reshape", uniform(r, &[2, 6], -1.0, 1.0), move |g, x| {
        let y = g.reshape(x, &[3, 4])?;
        project(g, y, &w)
    }));
    let w = uniform(r, &[2, 3, 2], -1.0, 1.0);
    cases.push(case("transpose", uniform(r, &[2, 3, 2], -1.0, 1.0), move |g, x| {
        let y = g.transpose(x, 0, 2)?;
        project(g, y, &w)
    }));
    cases.push(case("reduce_sum", uniform(r, &[2, 5], -1.0, 1.0), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    }));
    let w = uniform(r, &[3], -1.0, 1.0);
    cases.push(case("reduce_sum_last", uniform(r, &[3, 4], -1.0, 1.0), move |g, x| {
        let y = g.sum_last(x);
        let y = g.mul(y, y)?;
        project(g, y, &w)
    }));
    cases.push(case("reduce_mean", uniform(r, &[2, 5], -1.0, 1.0), |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.mean(y))
    }));
    let idx: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
    let w = uniform(r, &[3], -1.0, 1.0);
    cases.push(case("gather", uniform(r, &[3, 4], -1.0, 1.0), move |g, x| {
        let y = g.gather(x, &idx)?;
        project(g, y, &w)
    }));
    let w = uniform(r, &[10], -1.0, 1.0);
    cases.push(case("relu", away_from_zero(r, &[10], 0.01), move |g, x| {
        let y = g.relu(x);
        project(g, y, &w)
    }));
    let w = uniform(r, &[10], -1.0, 1.0);
    cases.push(case("gelu", uniform(r, &[10], -2.0, 2.0), move |g, x| {
        let y = g.gelu(x);
        project(g, y, &w)
    }));
    let w = uniform(r, &[10], -1.0, 1.0);
    cases.push(case("clamp", away_from_zero(r, &[10], 0.01).map_abs_gap(0.5, 0.01), move |g, x| {
        let y = g.clamp(x, -0.5, 0.5);
        project(g, y, &w)
    }));
    let w = uniform(r, &[8], -1.0, 1.0);
    cases.push(case("powi", uniform(r, &[8], -1.0, 1.0), move |g, x| {
        let y = g.powi(x, 5);
        project(g, y, &w)
    }));

    for variant in MarginVariant::ALL {
        // A detached weight is not the true derivative, so finite differences
        // only apply to the other two modes.
        for weight in [MarginWeight::Weighted, MarginWeight::Unweighted] {
            let (logits, loss) = objective_case(r, variant, weight, false);
            cases.push(case(&format!("mto/{}/{:?}", variant.name(), weight), logits, loss));
            let (logits, loss) = objective_case(r, variant, weight, true);
            cases.push(case(&format!("mso/{}/{:?}", variant.name(), weight), logits, loss));
        }
    }
    cases
}

trait GapExt {
    fn map_abs_gap(self, edge: f64, gap: f64) -> Tensor;
}

impl GapExt for Tensor {
    /// Nudges values within `gap` of `±edge` out of the kink.
    fn map_abs_gap(mut self, edge: f64, gap: f64) -> Tensor {
        for v in self.data_mut() {
            if (v.abs() - edge).abs() < gap {
                *v = v.signum() * (edge + 2.0 * gap);
            }
        }
        self
    }
}

/// Token- or sentence-level loss on logits `[2, 3, 5]`: softmax, golden
/// probabilities, cross-entropy plus `lambda * margin`, with the second
/// sentence padded at its last position. The sentence-level case gates the
/// first sentence.
fn objective_case(
    r: &mut ChaCha8Rng,
    variant: MarginVariant,
    weight: MarginWeight,
    gated: bool,
) -> (Tensor, impl Fn(&mut Graph, Var) -> Ad<Var> + 'static) {
    let (batch, len, vocab) = (2usize, 3usize, 5usize);
    let logits = uniform(r, &[batch, len, vocab], -2.0, 2.0);
    let gold: Vec<usize> = (0..batch * len).map(|_| r.random_range(0..vocab)).collect();
    let p_lm: Vec<f64> = (0..batch * len).map(|_| r.random_range(0.05..0.95)).collect();
    let pad = vec![false, false, false, false, false, true];
    let spec = MarginFunctionSpec { variant, alpha: 10.0, clamp_epsilon: 1e-6 };
    let lambda = 5.0;
    let f = move |g: &mut Graph, x: Var| -> Ad<Var> {
        let grid = Grid { batch, len, pad: &pad };
        let probs = g.softmax(x);
        let gold_p = g.gather(probs, &gold)?;
        let ce = sentence_cross_entropy(g, gold_p, grid).map_err(to_ad)?;
        let m = sentence_margin_loss(g, gold_p, &p_lm, grid, &spec, weight).map_err(to_ad)?;
        let m = g.scale(m, lambda);
        let mut per = g.add(ce, m)?;
        if gated {
            let gate = g.constant(Tensor::vector(vec![0.0, 1.0]));
            per = g.mul(per, gate)?;
        }
        let total = g.sum(per);
        Ok(g.scale(total, 1.0 / 5.0))
    };
    (logits, f)
}

fn to_ad(e: marginmt::margin::MarginError) -> AutodiffError {
    AutodiffError::InvalidArgument(e.to_string())
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-3;

/// Runs every gradient case for one seed.
pub fn gradient_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    gradient_cases(seed)
        .into_iter()
        .map(|(name, x, f)| {
            let report = finite_diff_check(f, &x, GRADCHECK_EPS, GRADCHECK_TOL)
                .unwrap_or_else(|e| panic!("{} (seed {}): {}", name, seed, e));
            (name, report)
        })
        .collect()
}

/// Corpus BLEU written independently of the library: clipped matches are
/// found by pairing each hypothesis n-gram with an unused, equal reference
/// n-gram.
pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let max_n = 4;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut rl) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        c += h.len();
        rl += r.len();
        for n in 1..=max_n {
            if h.len() < n {
                continue;
            }
            let ref_grams: Vec<String> = if r.len() >= n { (0..=r.len() - n).map(|i| r[i..i + n].join("\u{1}")).collect() } else { vec![] };
            let mut used = vec![false; ref_grams.len()];
            for i in 0..=h.len() - n {
                total[n - 1] += 1;
                let gram = h[i..i + n].join("\u{1}");
                if let Some(j) = (0..ref_grams.len()).find(|&j| !used[j] && ref_grams[j] == gram) {
                    used[j] = true;
                    matched[n - 1] += 1;
                }
            }
        }
    }
    if c == 0 || matched[0] == 0 {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 0..max_n {
        if matched[n] == 0 {
            precisions.push(1.0 / (total[n] as f64 + 1.0));
        } else {
            precisions.push(matched[n] as f64 / total[n] as f64);
        }
    }
    let geo = precisions.iter().product::<f64>().powf(1.0 / max_n as f64);
    let bp = if c > rl { 1.0 } else { (1.0 - rl as f64 / c as f64).exp() };
    100.0 * bp * geo
}

/// Random toy corpus for BLEU agreement: hypotheses are noisy copies of the
/// references over a small alphabet.
pub fn toy_bleu_corpus(seed: u64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.random_range(1..8);
    let alphabet = ["a", "b", "c", "d", "e", "f"];
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..n {
        let len = r.random_range(1..12);
        let reference: Vec<String> = (0..len).map(|_| alphabet[r.random_range(0..alphabet.len())].to_string()).collect();
        let mut hyp = Vec::new();
        for tok in &reference {
            match r.random_range(0..10) {
                0 => {}
                1 => {
                    hyp.push(tok.clone());
                    hyp.push(alphabet[r.random_range(0..alphabet.len())].to_string());
                }
                2 | 3 => hyp.push(alphabet[r.random_range(0..alphabet.len())].to_string()),
                _ => hyp.push(tok.clone()),
            }
        }
        hyps.push(hyp);
        refs.push(reference);
    }
    (hyps, refs)
}

/// Every token sequence up to `max_len` with its log-probability, EOS
/// included unless the sequence reaches `max_len`.
pub fn enumerate_sequences(
    scorer: &impl marginmt::model::StepScorer,
    vocab: usize,
    max_len: usize,
) -> Vec<(Vec<usize>, f64)> {
    use marginmt::corpus::EOS;
    let mut out = Vec::new();
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for depth in 0..=max_len {
        let mut next = Vec::new();
        for (prefix, score) in &frontier {
            let lp = scorer.next_log_probs(std::slice::from_ref(prefix)).unwrap().remove(0);
            if depth == max_len {
                out.push((prefix.clone(), *score));
                continue;
            }
            out.push((prefix.clone(), score + lp[EOS]));
            for t in 0..vocab {
                if t == EOS {
                    continue;
                }
                let mut p = prefix.clone();
                p.push(t);
                next.push((p, score + lp[t]));
            }
        }
        frontier = next;
    }
    out
}

/// Deterministic map used where tests need labelled ids.
pub fn label_map(pairs: &[SentencePair]) -> HashMap<u64, Label> {
    pairs.iter().map(|p| (p.id, p.label)).collect()
}

/// Small lexicon-task splits for fast training tests.
pub fn tiny_splits(n_pairs: usize, seed: u64) -> marginmt::corpus::CorpusSplits {
    let spec = marginmt::corpus::CorpusSpec {
        task: marginmt::corpus::Task::LexiconTranslate,
        n_pairs,
        len_range: (2, 6),
        vocab_size: 16,
        hallucination_rate: 0.1,
        seed,
    };
    marginmt::corpus::generate_splits(&spec, 40, 40).unwrap()
}

/// Training settings sized for tests: a tiny model and short stages.
pub fn tiny_train_config() -> marginmt::trainer::TrainConfig {
    let mut model = tiny_config(16, 16);
    model.max_len = 8;
    marginmt::trainer::TrainConfig {
        model,
        steps_pretrain: 30,
        steps_finetune: 20,
        peak_lr: 3e-3,
        warmup_steps: 10,
        batch_tokens: 64,
        eval_every: 10,
        eval_sample: 50,
        seed: 5,
        ..Default::default()
    }
}

pub fn param_bits(bundle: &ModelBundle) -> Vec<(String, Vec<u64>)> {
    bundle
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
