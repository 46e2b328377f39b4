use std::collections::BTreeMap;

use marginmt::corpus::{generate_corpus, make_batches, CorpusSpec, Label, SentencePair, Task, Vocab};
use proptest::prelude::*;

const GOLDEN_COUNTS: &str = include_str!("golden/hallucination_counts.json");

fn lexicon(n: usize, rate: f64, seed: u64) -> CorpusSpec {
    CorpusSpec { task: Task::LexiconTranslate, n_pairs: n, len_range: (4, 16), vocab_size: 64, hallucination_rate: rate, seed }
}

#[test]
fn hallucination_counts_match_golden_values() {
    let golden: BTreeMap<u64, usize> = serde_json::from_str(GOLDEN_COUNTS).unwrap();
    let mut seen = BTreeMap::new();
    for seed in [1u64, 2, 7, 42] {
        let corpus = generate_corpus(&lexicon(1000, 0.1, seed)).unwrap();
        let count = corpus.hallucinated_count();
        // Three binomial standard deviations around 100.
        assert!((73..=127).contains(&count), "seed {}: {}", seed, count);
        seen.insert(seed, count);
    }
    if std::env::var_os("PRINT_GOLDEN").is_some() {
        println!("{}", serde_json::to_string_pretty(&seen).unwrap());
    }
    assert_eq!(seen, golden);
}

#[test]
fn hallucinated_targets_are_length_matched_translations() {
    let corpus = generate_corpus(&lexicon(500, 0.2, 3)).unwrap();
    let clean: Vec<&SentencePair> = corpus.pairs.iter().filter(|p| p.label == Label::Clean).collect();
    for p in corpus.pairs.iter().filter(|p| p.label == Label::Hallucinated) {
        assert!(p.tgt.len().abs_diff(p.src.len()) <= 2, "pair {}", p.id);
        // The target tokens come from the target vocabulary's content range.
        assert!(p.tgt.iter().all(|&t| t >= 4 && t < corpus.tgt_vocab.len()));
    }
    assert!(!clean.is_empty());
}

fn pairs_strategy() -> impl Strategy<Value = Vec<SentencePair>> {
    prop::collection::vec((1usize..12, 1usize..12), 1..60).prop_map(|lens| {
        lens.into_iter()
            .enumerate()
            .map(|(i, (s, t))| SentencePair { id: i as u64, src: vec![4; s], tgt: vec![5; t], label: Label::Clean })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_cover_each_pair_once_within_budget(pairs in pairs_strategy(), budget in 13usize..200, seed in 0u64..1000, epoch in 0u64..4) {
        let batches = make_batches(&pairs, budget, seed, epoch).unwrap();
        let mut ids: Vec<u64> = batches.iter().flat_map(|b| b.pair_ids.clone()).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..pairs.len() as u64).collect::<Vec<_>>());
        for b in &batches {
            let padded = b.size() * b.src.len.max(b.tgt_out.len);
            prop_assert!(padded <= budget, "{} padded positions over {}", padded, budget);
        }
    }

    #[test]
    fn batching_is_deterministic(pairs in pairs_strategy(), seed in 0u64..1000) {
        let a: Vec<Vec<u64>> = make_batches(&pairs, 64, seed, 1).unwrap().into_iter().map(|b| b.pair_ids).collect();
        let b: Vec<Vec<u64>> = make_batches(&pairs, 64, seed, 1).unwrap().into_iter().map(|b| b.pair_ids).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn vocab_round_trips(tokens in prop::collection::btree_set("[a-z]{1,6}", 1..30)) {
        let vocab = Vocab::new(tokens.iter()).unwrap();
        let ids = vocab.encode_all(&tokens.iter().collect::<Vec<_>>());
        let back = vocab.decode_all(&ids);
        prop_assert_eq!(back, tokens.iter().cloned().collect::<Vec<_>>());
        let mut buf = Vec::new();
        vocab.write(&mut buf).unwrap();
        prop_assert_eq!(Vocab::read(std::io::Cursor::new(buf)).unwrap(), vocab);
    }

    #[test]
    fn generation_is_deterministic_per_seed(seed in 0u64..500, rate in 0.0f64..0.5) {
        let spec = CorpusSpec { n_pairs: 60, ..lexicon(60, rate, seed) };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }
}
