mod common;

use calonet::causal::{
    build_causal_matrix, causal_score, conditional_entropy, discretize, export, score_matrix, transfer_entropy,
    BinStrategy, BinningSpec, CausalMatrix, GraphFormat, HistoryOrder,
};
use calonet::dataset::{synth_causal, SynthConfig, TimeSeriesSample};
use proptest::prelude::*;
use rand::Rng;
use std::collections::HashMap;

fn entropy_of<K: std::hash::Hash + Eq>(items: impl Iterator<Item = K>) -> f64 {
    let mut counts: HashMap<K, f64> = HashMap::new();
    let mut n = 0.0;
    for k in items {
        *counts.entry(k).or_default() += 1.0;
        n += 1.0;
    }
    counts.values().map(|c| -(c / n) * (c / n).log2()).sum()
}

fn planted(seed: u64) -> TimeSeriesSample {
    synth_causal(&SynthConfig::single_edge(2, 500, 0, 1, 0.9, 0.1), seed).unwrap().dataset.samples[0].clone()
}

#[test]
fn equal_frequency_bins_hold_a_share_each() {
    let spec = BinningSpec::new(8, BinStrategy::EqualFrequency).unwrap();
    for seed in 0..10 {
        let len = 203 + seed as usize;
        let series = common::normal_vec(&mut common::rng(seed), len);
        let symbols = discretize(&series, &spec);
        // Quantile oracle: bin of the value with rank r is floor(r * 8 / L).
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| series[a].total_cmp(&series[b]));
        let mut expected = vec![0; len];
        for (rank, &i) in order.iter().enumerate() {
            expected[i] = rank * 8 / len;
        }
        assert_eq!(symbols, expected);
        for b in 0..8 {
            let count = symbols.iter().filter(|&&s| s == b).count() as f64;
            assert!((count - len as f64 / 8.0).abs() <= 1.0, "bin {b}: {count}");
        }
    }
}

#[test]
fn conditional_entropy_matches_chain_rule() {
    assert_eq!(conditional_entropy(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 1.0);
    for seed in 0..50 {
        let mut r = common::rng(seed);
        let len = r.random_range(1..200);
        let x: Vec<usize> = (0..len).map(|_| r.random_range(0..4)).collect();
        let y: Vec<usize> = (0..len).map(|_| r.random_range(0..3)).collect();
        let oracle = entropy_of(x.iter().zip(&y)) - entropy_of(y.iter());
        let got = conditional_entropy(&x, &y).unwrap();
        assert!((got - oracle).abs() <= 1e-12, "seed {seed}: {got} vs {oracle}");
        assert_eq!(conditional_entropy(&x, &x).unwrap(), 0.0);
    }
}

#[test]
fn copied_bit_stream_carries_one_bit() {
    let spec = BinningSpec::new(2, BinStrategy::EqualWidth).unwrap();
    let mut r = common::rng(5);
    let x: Vec<f64> = (0..10_000).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let mut y = vec![0.0; x.len()];
    y[1..].copy_from_slice(&x[..x.len() - 1]);
    let te = transfer_entropy(&x, &y, &HistoryOrder::default(), &spec).unwrap();
    assert!((te - 1.0).abs() <= 0.05, "{te}");
    let back = transfer_entropy(&y, &x, &HistoryOrder::default(), &spec).unwrap();
    assert!(back < 0.01, "{back}");
}

#[test]
fn score_swaps_to_exact_negation() {
    let (order, spec) = (HistoryOrder::default(), BinningSpec::default());
    for seed in 0..20 {
        let s = planted(seed);
        let (a, b) = (&s.values[0], &s.values[1]);
        let fwd = causal_score(a, b, &order, &spec).unwrap();
        assert_eq!(fwd.to_bits(), (-causal_score(b, a, &order, &spec).unwrap()).to_bits());
        assert_eq!(causal_score(a, a, &order, &spec).unwrap(), 0.0);
    }
}

#[test]
fn planted_edge_scores_and_survives_thresholding() {
    let (order, spec) = (HistoryOrder::default(), BinningSpec::default());
    let (mut positive, mut directed) = (0, 0);
    for seed in 0..100 {
        let s = planted(seed);
        positive += usize::from(causal_score(&s.values[0], &s.values[1], &order, &spec).unwrap() > 0.0);
        let m = build_causal_matrix(&s, 0.0, &order, &spec).unwrap();
        directed += usize::from(m.get(0, 1) > 0.0 && m.get(1, 0) == 0.0);
    }
    assert!(positive >= 95, "positive in {positive}/100");
    assert!(directed >= 95, "directed in {directed}/100");
}

#[test]
fn infinite_threshold_gives_empty_matrix() {
    let s = synth_causal(&SynthConfig::planted_four_class(1), 3).unwrap().dataset.samples[0].clone();
    let m = build_causal_matrix(&s, f64::INFINITY, &HistoryOrder::default(), &BinningSpec::default()).unwrap();
    assert!(m.scores().iter().all(|&v| v == 0.0));
    assert_eq!(m.n(), 6);
}

#[test]
fn three_dimension_example_graph() {
    let mut raw = vec![0.0; 9];
    for (i, j, w) in [(2, 0, 0.1450), (2, 1, 0.2389), (0, 1, 0.0443)] {
        raw[i * 3 + j] = w;
        raw[j * 3 + i] = -w;
    }
    let m = CausalMatrix::from_scores(3, &raw, 0.0).unwrap();
    let edges: Vec<(usize, usize, f64)> = m.to_graph().edges.iter().map(|e| (e.from, e.to, e.weight)).collect();
    assert_eq!(edges.len(), 3);
    for e in [(2, 0, 0.1450), (2, 1, 0.2389), (0, 1, 0.0443)] {
        assert!(edges.contains(&e), "{e:?} missing from {edges:?}");
    }
    let dot = export(&m, GraphFormat::Dot).unwrap();
    assert!(dot.contains("2 -> 0 [label=\"0.1450\"]"));
    let back = CausalMatrix::from_json(&export(&m, GraphFormat::Json).unwrap()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn score_matrix_agrees_with_pairwise_scores() {
    let s = synth_causal(&SynthConfig::planted_four_class(1), 9).unwrap().dataset.samples[2].clone();
    let (order, spec) = (HistoryOrder::default(), BinningSpec::default());
    let raw = score_matrix(&s, &order, &spec).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let direct = causal_score(&s.values[i], &s.values[j], &order, &spec).unwrap();
            assert_eq!(raw[i * 6 + j].to_bits(), direct.to_bits(), "({i},{j})");
        }
    }
}

proptest! {
    #[test]
    fn thresholded_matrix_invariants(seed in 0u64..300, n in 2usize..7, c in 0.0f64..0.3) {
        let mut r = common::rng(seed);
        let values = (0..n).map(|_| common::normal_vec(&mut r, 60)).collect();
        let s = TimeSeriesSample { values, label: 0 };
        let m = build_causal_matrix(&s, c, &HistoryOrder::default(), &BinningSpec::new(3, BinStrategy::EqualFrequency).unwrap()).unwrap();
        m.validate().unwrap();
        for i in 0..n {
            prop_assert_eq!(m.get(i, i), 0.0);
            for j in 0..n {
                let v = m.get(i, j);
                prop_assert!(v == 0.0 || v > c);
                prop_assert!(!(v > 0.0 && m.get(j, i) > 0.0));
            }
        }
        let back = CausalMatrix::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}
