//! Synthetic bilingual corpora with planted hallucinations, vocabularies and
//! token-budget batching.
//!
//! Source sentences come from a sparse random Markov chain so that the target
//! side has learnable fluency. A hallucinated pair keeps its source but borrows
//! the target of another pair of similar length: the target is a fluent
//! sentence of the target language that does not translate the source.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Successors per token in the source-language Markov chain.
const BRANCHING: usize = 3;
/// Largest length difference between a pair and its hallucination donor.
const DONOR_LENGTH_SLACK: usize = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus parameters: {0}")]
    InvalidArgument(String),
    #[error("pair {id} needs {cost} tokens but the batch budget is {budget}")]
    PairExceedsBudget { id: u64, cost: usize, budget: usize },
    #[error("malformed vocabulary: {0}")]
    BadVocab(String),
    #[error("malformed corpus line {line}: {reason}")]
    BadCorpus { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CorpusError>;

/// Bijection between token strings and contiguous ids. Ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for tok in content {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(CorpusError::BadVocab(format!("token {:?} is empty or contains whitespace", tok)));
            }
            if index.contains_key(&tok) {
                return Err(CorpusError::BadVocab(format!("duplicate token {:?}", tok)));
            }
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-reserved tokens.
    pub fn content_len(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn encode(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn decode_all(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.decode(i).unwrap_or(RESERVED[UNK]).to_string()).collect()
    }

    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{}", t)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(CorpusError::BadVocab(format!("header must be {:?}", RESERVED)));
        }
        Self::new(lines.into_iter().skip(RESERVED.len()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Clean,
    Hallucinated,
}

/// Content token ids only: no BOS, EOS or PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub id: u64,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub label: Label,
}

impl SentencePair {
    /// Positions this pair occupies in a batch: the longer side plus EOS/BOS.
    pub fn cost(&self) -> usize {
        self.src.len().max(self.tgt.len()) + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    LexiconTranslate,
}

impl std::str::FromStr for Task {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "lexicon-translate" | "lexicon" => Ok(Self::LexiconTranslate),
            other => Err(CorpusError::InvalidArgument(format!("unknown task '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub task: Task,
    pub n_pairs: usize,
    /// Inclusive bounds on content length.
    pub len_range: (usize, usize),
    /// Vocabulary size per language, reserved ids included.
    pub vocab_size: usize,
    pub hallucination_rate: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.len_range;
        if lo == 0 || lo > hi {
            return Err(CorpusError::InvalidArgument(format!("length range ({}, {}) is empty or starts at 0", lo, hi)));
        }
        if self.vocab_size <= 8 {
            return Err(CorpusError::InvalidArgument(format!("vocab_size must exceed 8, got {}", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.hallucination_rate) {
            return Err(CorpusError::InvalidArgument(format!(
                "hallucination_rate must lie in [0, 1), got {}",
                self.hallucination_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub pairs: Vec<SentencePair>,
}

/// Parallel splits drawn from one synthetic language.
#[derive(Clone, Debug)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// The synthetic language pair: a Markov chain over source tokens and the
/// task's mapping from source to target.
struct Language {
    task: Task,
    /// `successors[t]`: (next token, cumulative probability).
    successors: Vec<Vec<(usize, f64)>>,
    lexicon: Vec<usize>,
    n_content: usize,
}

impl Language {
    fn new(task: Task, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let n_content = vocab_size - RESERVED.len();
        let successors = (0..n_content)
            .map(|_| {
                let mut pool: Vec<usize> = (0..n_content).collect();
                pool.shuffle(rng);
                let weights: Vec<f64> = (0..BRANCHING).map(|_| 0.2 + rng.random::<f64>()).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                pool.into_iter()
                    .take(BRANCHING)
                    .zip(weights)
                    .map(|(t, w)| {
                        acc += w / total;
                        (t, acc)
                    })
                    .collect()
            })
            .collect();
        let mut lexicon: Vec<usize> = (0..n_content).collect();
        lexicon.shuffle(rng);
        Self { task, successors, lexicon, n_content }
    }

    /// Source sentence as content indices (0-based, before id offset).
    fn sample_source(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut cur = rng.random_range(0..self.n_content);
        out.push(cur);
        while out.len() < len {
            let u: f64 = rng.random();
            let next = self.successors[cur].iter().find(|(_, c)| u < *c).unwrap_or(self.successors[cur].last().unwrap());
            cur = next.0;
            out.push(cur);
        }
        out
    }

    fn translate(&self, src: &[usize]) -> Vec<usize> {
        match self.task {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
            Task::LexiconTranslate => src.iter().map(|&t| self.lexicon[t]).collect(),
        }
    }

    fn vocabs(&self) -> (Vocab, Vocab) {
        let src = Vocab::new((0..self.n_content).map(|i| format!("s{}", i))).expect("generated tokens are unique");
        let tgt = match self.task {
            Task::LexiconTranslate => Vocab::new((0..self.n_content).map(|i| format!("t{}", i))),
            _ => Vocab::new((0..self.n_content).map(|i| format!("s{}", i))),
        }
        .expect("generated tokens are unique");
        (src, tgt)
    }

    fn sample_pairs(
        &self,
        n: usize,
        len_range: (usize, usize),
        rate: f64,
        first_id: u64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<SentencePair> {
        let offset = RESERVED.len();
        let mut pairs: Vec<SentencePair> = (0..n)
            .map(|i| {
                let len = rng.random_range(len_range.0..=len_range.1);
                let src = self.sample_source(len, rng);
                let tgt = self.translate(&src);
                SentencePair {
                    id: first_id + i as u64,
                    src: src.into_iter().map(|t| t + offset).collect(),
                    tgt: tgt.into_iter().map(|t| t + offset).collect(),
                    label: Label::Clean,
                }
            })
            .collect();
        if rate > 0.0 {
            let clean_targets: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
            for i in 0..n {
                if rng.random::<f64>() >= rate {
                    continue;
                }
                let len = pairs[i].src.len();
                let donors: Vec<usize> = (0..n)
                    .filter(|&j| j != i && clean_targets[j].len().abs_diff(len) <= DONOR_LENGTH_SLACK)
                    .filter(|&j| clean_targets[j] != clean_targets[i])
                    .collect();
                let tgt = match donors.as_slice() {
                    [] => {
                        // No suitable donor: translate a fresh source of nearby length.
                        let lo = len.saturating_sub(DONOR_LENGTH_SLACK).max(len_range.0);
                        let hi = len + DONOR_LENGTH_SLACK;
                        let src = self.sample_source(rng.random_range(lo..=hi), rng);
                        self.translate(&src).into_iter().map(|t| t + offset).collect()
                    }
                    d => clean_targets[d[rng.random_range(0..d.len())]].clone(),
                };
                pairs[i].tgt = tgt;
                pairs[i].label = Label::Hallucinated;
            }
        }
        pairs
    }
}

/// Generates one corpus; deterministic in `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lang = Language::new(spec.task, spec.vocab_size, &mut rng);
    let pairs = lang.sample_pairs(spec.n_pairs, spec.len_range, spec.hallucination_rate, 0, &mut rng);
    let (src_vocab, tgt_vocab) = lang.vocabs();
    Ok(Corpus { src_vocab, tgt_vocab, pairs })
}

/// Generates a training corpus (with planted hallucinations) plus clean
/// validation and test splits from the same language. The training split is
/// identical to `generate_corpus(spec)`.
pub fn generate_splits(spec: &CorpusSpec, n_valid: usize, n_test: usize) -> Result<CorpusSplits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lang = Language::new(spec.task, spec.vocab_size, &mut rng);
    let train = lang.sample_pairs(spec.n_pairs, spec.len_range, spec.hallucination_rate, 0, &mut rng);
    let mut held_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_0F_4E1D);
    let first_valid = spec.n_pairs as u64;
    let valid = lang.sample_pairs(n_valid, spec.len_range, 0.0, first_valid, &mut held_rng);
    let test = lang.sample_pairs(n_test, spec.len_range, 0.0, first_valid + n_valid as u64, &mut held_rng);
    let (src_vocab, tgt_vocab) = lang.vocabs();
    let wrap = |pairs| Corpus { src_vocab: src_vocab.clone(), tgt_vocab: tgt_vocab.clone(), pairs };
    Ok(CorpusSplits { train: wrap(train), valid: wrap(valid), test: wrap(test) })
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    id: u64,
    src: Vec<String>,
    tgt: Vec<String>,
    label: Label,
}

impl Corpus {
    pub fn hallucinated_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == Label::Hallucinated).count()
    }

    pub fn with_pairs(&self, pairs: Vec<SentencePair>) -> Corpus {
        Corpus { src_vocab: self.src_vocab.clone(), tgt_vocab: self.tgt_vocab.clone(), pairs }
    }

    pub fn write_pairs<W: Write>(&self, mut out: W) -> Result<()> {
        for p in &self.pairs {
            let line = PairLine {
                id: p.id,
                src: self.src_vocab.decode_all(&p.src),
                tgt: self.tgt_vocab.decode_all(&p.tgt),
                label: p.label,
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_pairs<R: BufRead>(input: R, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Vec<SentencePair>> {
        let mut pairs = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PairLine =
                serde_json::from_str(&line).map_err(|e| CorpusError::BadCorpus { line: n + 1, reason: e.to_string() })?;
            if parsed.src.is_empty() || parsed.tgt.is_empty() {
                return Err(CorpusError::BadCorpus { line: n + 1, reason: "empty sentence".into() });
            }
            pairs.push(SentencePair {
                id: parsed.id,
                src: src_vocab.encode_all(&parsed.src),
                tgt: tgt_vocab.encode_all(&parsed.tgt),
                label: parsed.label,
            });
        }
        Ok(pairs)
    }

    pub fn save_pairs(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_pairs(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_pairs(path: &Path, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<Corpus> {
        let pairs = Self::read_pairs(BufReader::new(File::open(path)?), src_vocab, tgt_vocab)?;
        Ok(Corpus { src_vocab: src_vocab.clone(), tgt_vocab: tgt_vocab.clone(), pairs })
    }
}

pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

impl CorpusSplits {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.train.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
        self.train.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))?;
        self.train.save_pairs(&dir.join(TRAIN_FILE))?;
        self.valid.save_pairs(&dir.join(VALID_FILE))?;
        self.test.save_pairs(&dir.join(TEST_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let src = Vocab::load(&dir.join(SRC_VOCAB_FILE))?;
        let tgt = Vocab::load(&dir.join(TGT_VOCAB_FILE))?;
        Ok(Self {
            train: Corpus::load_pairs(&dir.join(TRAIN_FILE), &src, &tgt)?,
            valid: Corpus::load_pairs(&dir.join(VALID_FILE), &src, &tgt)?,
            test: Corpus::load_pairs(&dir.join(TEST_FILE), &src, &tgt)?,
        })
    }
}

/// A padded `[batch, len]` grid of token ids with its padding mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl PaddedIds {
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let batch = rows.len();
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = vec![PAD; batch * len];
        let mut pad = vec![true; batch * len];
        for (b, row) in rows.iter().enumerate() {
            ids[b * len..b * len + row.len()].copy_from_slice(row);
            pad[b * len..b * len + row.len()].iter_mut().for_each(|p| *p = false);
        }
        Self { ids, pad, batch, len }
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    pub fn row_pad(&self, b: usize) -> &[bool] {
        &self.pad[b * self.len..(b + 1) * self.len]
    }

    pub fn real_tokens(&self) -> usize {
        self.pad.iter().filter(|&&p| !p).count()
    }
}

/// Model-ready view of a set of pairs: the encoder input `src + EOS`, the
/// teacher-forced decoder input `BOS + tgt` and the gold output `tgt + EOS`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: PaddedIds,
    pub tgt_in: PaddedIds,
    pub tgt_out: PaddedIds,
    pub pair_ids: Vec<u64>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&SentencePair]) -> Self {
        let with_eos = |s: &[usize]| s.iter().copied().chain(std::iter::once(EOS)).collect::<Vec<_>>();
        let src: Vec<_> = pairs.iter().map(|p| with_eos(&p.src)).collect();
        let tgt_in: Vec<_> = pairs.iter().map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect()).collect();
        let tgt_out: Vec<_> = pairs.iter().map(|p| with_eos(&p.tgt)).collect();
        Self {
            src: PaddedIds::from_rows(&src),
            tgt_in: PaddedIds::from_rows(&tgt_in),
            tgt_out: PaddedIds::from_rows(&tgt_out),
            pair_ids: pairs.iter().map(|p| p.id).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.pair_ids.len()
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Pairs sorted into similar lengths within pools of this many batches.
const POOL_BATCHES: usize = 32;

/// Partitions one epoch of `pairs` into batches of at most `batch_tokens`
/// padded positions (`size * longest cost`). The order is a deterministic
/// function of `(seed, epoch)` and every pair appears exactly once.
pub fn make_batches(pairs: &[SentencePair], batch_tokens: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if let Some(p) = pairs.iter().find(|p| p.cost() > batch_tokens) {
        return Err(CorpusError::PairExceedsBudget { id: p.id, cost: p.cost(), budget: batch_tokens });
    }
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);

    let mean_cost = pairs.iter().map(SentencePair::cost).sum::<usize>().max(1) / pairs.len().max(1);
    let pool = POOL_BATCHES * (batch_tokens / mean_cost.max(1)).max(1);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for chunk in order.chunks_mut(pool) {
        chunk.sort_by_key(|&i| pairs[i].cost());
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for &i in chunk.iter() {
            let c = pairs[i].cost();
            if !cur.is_empty() && (cur.len() + 1) * longest.max(c) > batch_tokens {
                groups.push(std::mem::take(&mut cur));
                longest = 0;
            }
            longest = longest.max(c);
            cur.push(i);
        }
        if !cur.is_empty() {
            groups.push(cur);
        }
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|g| Batch::from_pairs(&g.iter().map(|&i| &pairs[i]).collect::<Vec<_>>()))
        .collect())
}

/// Fixed-size batches in corpus order, for evaluation.
pub fn sequential_batches(pairs: &[SentencePair], batch_size: usize) -> Vec<Batch> {
    pairs
        .chunks(batch_size.max(1))
        .map(|c| Batch::from_pairs(&c.iter().collect::<Vec<_>>()))
        .collect()
}
