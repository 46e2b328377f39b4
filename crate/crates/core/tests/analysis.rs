mod support;

use marginmt::analysis::{
    bleu, filter_corpus, filter_records, histogram, margin_records, run_sweep, stats_from_records, DecodeConfig,
    SweepEval, SweepGrid, HISTOGRAM_BINS,
};
use marginmt::corpus::{make_batches, Label};
use marginmt::margin::{MarginVariant, MarginWeight};
use marginmt::model::{Forward, Trainable};
use marginmt::trainer::{finetune_graph, pretrain, Objective, ObjectiveConfig, RunOptions};
use proptest::prelude::*;

use support::{bleu_oracle, label_map, tiny_splits, tiny_train_config, toy_bleu_corpus};

#[test]
fn bleu_agrees_with_the_oracle_on_fifty_corpora() {
    for seed in 0..50 {
        let (hyps, refs) = toy_bleu_corpus(seed);
        let ours = bleu(&hyps, &refs, 4, true).unwrap();
        let oracle = bleu_oracle(&hyps, &refs);
        assert!((ours - oracle).abs() <= 0.1, "seed {}: {} vs {}", seed, ours, oracle);
    }
}

#[test]
fn identical_corpora_score_exactly_one_hundred() {
    for seed in 0..10 {
        let (_, refs) = toy_bleu_corpus(seed);
        assert_eq!(bleu(&refs, &refs, 4, true).unwrap(), 100.0);
    }
}

#[test]
fn bleu_rejects_misaligned_corpora() {
    let a = vec![vec![1, 2]];
    assert!(bleu(&a, &[], 4, true).is_err());
}

proptest! {
    #[test]
    fn histogram_counts_every_margin(deltas in prop::collection::vec(-1.0f64..=1.0, 0..200)) {
        let bins = histogram(&deltas, HISTOGRAM_BINS).unwrap();
        prop_assert_eq!(bins.len(), HISTOGRAM_BINS);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), deltas.len() as u64);
        prop_assert_eq!(bins[0].bin_left, -1.0);
        prop_assert_eq!(bins[HISTOGRAM_BINS - 1].bin_right, 1.0);
    }
}

#[test]
fn histogram_places_the_right_edge_in_the_last_bin() {
    let bins = histogram(&[1.0, -1.0, 0.0], 4).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 0, 1, 1]);
}

#[test]
fn filter_flags_exactly_the_sentences_the_trainer_gates() {
    let config = tiny_train_config();
    let data = tiny_splits(200, 21);
    let bundle = pretrain(&config, &data, None, RunOptions::default()).unwrap().bundle().unwrap();
    for k in [0.1, 0.3, 0.5] {
        let (report, kept) = filter_corpus(&bundle, &data.train, k).unwrap();
        let obj = ObjectiveConfig { objective: Objective::Mso, threshold_k: k, ..Default::default() };
        let mut gated = Vec::new();
        for batch in make_batches(&data.train.pairs, 64, 3, 0).unwrap() {
            let lg = finetune_graph(&bundle, &obj, false, &batch, Forward::eval(&bundle.store, Trainable::None), None).unwrap();
            for (id, r) in batch.pair_ids.iter().zip(&lg.parts.ratios) {
                if r.is_some_and(|r| r >= k) {
                    gated.push(*id);
                }
            }
        }
        gated.sort_unstable();
        assert_eq!(report.flagged, gated, "k {}", k);
        assert_eq!(kept.pairs.len() + report.flagged.len(), data.train.pairs.len());
        let hallucinated = data.train.hallucinated_count();
        assert_eq!(report.hallucinated, hallucinated);
        if let (Some(p), Some(r)) = (report.precision, report.recall) {
            assert_eq!(p, report.true_positives as f64 / report.flagged.len() as f64);
            assert_eq!(r, report.true_positives as f64 / hallucinated as f64);
        }
    }
}

#[test]
fn stats_follow_the_records() {
    let config = tiny_train_config();
    let data = tiny_splits(200, 22);
    let bundle = pretrain(&config, &data, None, RunOptions::default()).unwrap().bundle().unwrap();
    let records = margin_records(&bundle, &data.valid.pairs).unwrap();
    assert_eq!(records.len(), data.valid.pairs.len());
    let stats = stats_from_records(&records).unwrap();
    let deltas: Vec<f64> = records.iter().flat_map(|r| r.p_nmt.iter().zip(&r.p_lm).map(|(a, b)| a - b)).collect();
    assert_eq!(stats.tokens, deltas.len());
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    assert!((stats.average_delta - mean).abs() < 1e-12);
    let neg = deltas.iter().filter(|&&d| d < 0.0).count() as f64 / deltas.len() as f64;
    assert!((stats.percent_negative - neg).abs() < 1e-12);

    let labels = label_map(&data.valid.pairs);
    let report = filter_records(&records, &labels, 0.3).unwrap();
    // Held-out splits are clean: there is nothing to recall.
    assert_eq!(report.hallucinated, 0);
    assert!(report.recall.is_none());
    assert!(labels.values().all(|l| *l == Label::Clean));
}

#[test]
fn sweep_covers_the_grid_and_survives_bad_cells() {
    let config = tiny_train_config();
    let data = tiny_splits(120, 23);
    let pre = pretrain(&config, &data, None, RunOptions::default()).unwrap().checkpoint;
    let mut base = config.clone();
    base.steps_finetune = 3;
    let grid = SweepGrid {
        lambda_margin: vec![1.0, 5.0],
        variant: vec![MarginVariant::Linear, MarginVariant::Log],
        alpha: vec![10.0, -1.0],
        weight: vec![MarginWeight::Weighted],
        threshold_k: vec![],
    };
    let eval = SweepEval {
        bleu_pairs: &data.test.pairs[..5],
        stats_pairs: &data.valid.pairs[..5],
        decode: DecodeConfig { beam_size: 2, length_penalty: 0.6, max_len: 7 },
    };
    let rows = run_sweep(&base, &data, &pre, &grid, &eval).unwrap();
    assert_eq!(rows.len(), 8);
    for r in &rows {
        if r.cell.alpha < 0.0 {
            assert!(r.error.is_some() && r.bleu.is_none());
        } else {
            assert!(r.error.is_none(), "{:?}", r);
            assert!(r.bleu.is_some() && r.average_delta.is_some());
        }
    }
}
