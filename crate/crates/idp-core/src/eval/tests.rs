use std::collections::BTreeMap;

use rand::Rng;

use super::*;
use crate::rng::derive_rng;

fn report_for(ranks: Vec<usize>) -> EvalReport {
    let users = ranks
        .iter()
        .enumerate()
        .map(|(i, &rank)| RankedUser {
            user: i as u32,
            target: 0,
            rank,
            target_score: 0.0,
        })
        .collect();
    build_report(&RankedCandidates { users }, BTreeMap::new()).unwrap()
}

#[test]
fn perfect_ranks_give_ones() {
    let r = report_for(vec![1, 1, 1]);
    assert_eq!(r.get("hr@1"), Some(1.0));
    assert_eq!(r.get("ndcg@1"), Some(1.0));
    assert_eq!(r.get("mrr"), Some(1.0));
}

#[test]
fn single_user_rank_three() {
    let ranks = [3usize];
    assert_eq!(hit_rate(&ranks, 5), 1.0);
    assert!((ndcg(&ranks, 5) - 0.5).abs() < 1e-12); // 1/log2(4)
    assert!((mrr(&ranks) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn hand_computed_mixed_ranks() {
    // ranks {1, 2, 11}: HR@5 = 2/3, NDCG@5 = (1 + 1/log2(3))/3, MRR = (1 + 1/2 + 1/11)/3
    let ranks = [1usize, 2, 11];
    assert!((hit_rate(&ranks, 5) - 2.0 / 3.0).abs() < 1e-9);
    assert!((ndcg(&ranks, 5) - 0.543_643_251_190_485_8).abs() < 1e-9);
    assert!((mrr(&ranks) - 0.530_303_030_303_030_3).abs() < 1e-9);
}

#[test]
fn pessimistic_tie_rule() {
    // target strictly highest -> rank 1
    assert_eq!(rank_of_target(2.0, &[1.0, 0.5]), 1);
    // all 100 scores equal -> rank 100
    let negs = vec![0.7; 99];
    assert_eq!(rank_of_target(0.7, &negs), 100);
}

#[test]
fn rank_matches_full_sort_oracle() {
    let mut rng = derive_rng(11, "eval.oracle");
    for _ in 0..200 {
        let target: f64 = rng.gen();
        let negs: Vec<f64> = (0..99).map(|_| rng.gen()).collect();
        // oracle: sort all candidates descending with the target losing ties
        let mut scored: Vec<(f64, bool)> = negs.iter().map(|&s| (s, false)).collect();
        scored.push((target, true));
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1)) // negatives (false) first on ties
        });
        let oracle = scored.iter().position(|&(_, is_t)| is_t).unwrap() + 1;
        assert_eq!(rank_of_target(target, &negs), oracle);
    }
}

#[test]
fn monotonicity_and_identity_over_random_rank_vectors() {
    let mut rng = derive_rng(7, "eval.mono");
    for _ in 0..1000 {
        let n = rng.gen_range(1..30);
        let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=100)).collect();
        let mut prev_hr = 0.0;
        let mut prev_ndcg = 0.0;
        for k in 1..=10 {
            let h = hit_rate(&ranks, k);
            let n_at = ndcg(&ranks, k);
            assert!(h >= prev_hr);
            assert!(n_at >= prev_ndcg - 1e-15);
            prev_hr = h;
            prev_ndcg = n_at;
        }
        // NDCG@1 = HR@1 exactly: both are the fraction of rank-1 users
        assert_eq!(ndcg(&ranks, 1), hit_rate(&ranks, 1));
        // MRR lower bound with 100 candidates
        let h1 = hit_rate(&ranks, 1);
        assert!(mrr(&ranks) >= h1 + (1.0 - h1) * 0.01 - 1e-12);
        assert!(mrr(&ranks) > 0.0 && mrr(&ranks) <= 1.0);
    }
}

#[test]
fn random_scorer_hits_analytic_baseline() {
    // uniformly random scores over 100 candidates: expected HR@5 = 0.05
    let mut rng = derive_rng(42, "eval.random_scorer");
    let mut ranks = Vec::with_capacity(2000);
    for _ in 0..2000 {
        let target: f64 = rng.gen();
        let negs: Vec<f64> = (0..99).map(|_| rng.gen()).collect();
        ranks.push(rank_of_target(target, &negs));
    }
    let hr5 = hit_rate(&ranks, 5);
    assert!((hr5 - 0.05).abs() <= 0.02, "HR@5 = {hr5}");
}

#[test]
fn report_emission_is_byte_stable() {
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), "42".to_string());
    meta.insert("mode".to_string(), "zero-shot".to_string());
    let users = vec![
        RankedUser { user: 0, target: 3, rank: 1, target_score: 0.9 },
        RankedUser { user: 1, target: 4, rank: 7, target_score: 0.1 },
    ];
    let a = build_report(&RankedCandidates { users: users.clone() }, meta.clone()).unwrap();
    let b = build_report(&RankedCandidates { users }, meta).unwrap();
    assert_eq!(a.to_tsv_string(), b.to_tsv_string());
    assert!(a.to_tsv_string().starts_with("# mode=zero-shot\n# seed=42\n"));
}

#[test]
fn empty_user_set_is_an_error() {
    let err = build_report(&RankedCandidates::default(), BTreeMap::new()).unwrap_err();
    assert!(matches!(err, crate::IdpError::EmptyInput(_)));
}

#[test]
fn report_round_trips_through_parser() {
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), "7".to_string());
    let report = report_for(vec![1, 2, 11]);
    let mut report = report;
    report.metadata = meta;
    let text = report.to_tsv_string();
    let parsed = EvalReport::parse_tsv(&text).unwrap();
    assert_eq!(parsed.metadata, report.metadata);
    assert_eq!(parsed.metrics.len(), report.metrics.len());
    for ((n1, v1), (n2, v2)) in parsed.metrics.iter().zip(&report.metrics) {
        assert_eq!(n1, n2);
        assert!((v1 - v2).abs() < 1e-6); // 6-decimal emission
    }
}
