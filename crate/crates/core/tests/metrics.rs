use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiedrank::embedding::{generate_synthetic, SynthConfig};
use tiedrank::eval::{evaluate, metrics_from_ranks, rank_of_target, MeanPoolEncoder, RetrievalEncoder};

/// AP@10 of one query from its ranked relevance list, via precision at each hit.
fn ap_at_10(relevance: &[bool]) -> f64 {
    let total_relevant = relevance.iter().filter(|&&r| r).count();
    let mut hits = 0;
    let mut acc = 0.0;
    for (k, &rel) in relevance.iter().take(10).enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (k + 1) as f64;
        }
    }
    acc / total_relevant.min(10) as f64
}

fn ranked_list(rank: usize, n: usize) -> Vec<bool> {
    (1..=n).map(|p| p == rank).collect()
}

#[test]
fn metrics_match_definitions_on_200_rank_lists() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let n_audio = rng.random_range(1..=40);
        let q = rng.random_range(1..=30);
        let ranks: Vec<usize> = (0..q).map(|_| rng.random_range(1..=n_audio)).collect();
        let r = metrics_from_ranks(&ranks, n_audio).unwrap();

        let lists: Vec<Vec<bool>> = ranks.iter().map(|&k| ranked_list(k, n_audio)).collect();
        let map: f64 = lists.iter().map(|l| ap_at_10(l)).sum::<f64>() / q as f64;
        let recall = |k: usize| lists.iter().filter(|l| l.iter().take(k).any(|&x| x)).count() as f64 / q as f64;
        assert!((r.map10 - map).abs() <= 1e-12);
        assert!((r.r1 - recall(1)).abs() <= 1e-12);
        assert!((r.r5 - recall(5)).abs() <= 1e-12);
        assert!((r.r10 - recall(10)).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn report_invariants_hold(n_audio in 1usize..60, seed in any::<u64>(), q in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ranks: Vec<usize> = (0..q).map(|_| rng.random_range(1..=n_audio)).collect();
        let r = metrics_from_ranks(&ranks, n_audio).unwrap();
        prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
        prop_assert!(r.r1 <= r.map10 + 1e-15 && r.map10 <= r.r10 + 1e-15);
        prop_assert!((0.0..=1.0).contains(&r.map10));
    }
}

/// Rank by sorting the whole score list (descending, stable on index).
fn sorted_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

#[test]
fn rank_agrees_with_sorting_including_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        let n = rng.random_range(1..30);
        // few distinct values so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let t = rng.random_range(0..n);
        assert_eq!(rank_of_target(&scores, t).unwrap(), sorted_rank(&scores, t));
    }
}

#[test]
fn evaluate_matches_brute_force_scoring() {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 30,
        d_audio: 6,
        d_text: 6,
        noise_sigma: 0.8,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let report = evaluate(&MeanPoolEncoder, &ds).unwrap();
    let audio: Vec<Vec<f64>> = ds.audio().iter().map(|s| MeanPoolEncoder.encode(s).unwrap()).collect();
    for (q, cap) in ds.captions().iter().enumerate() {
        let t = MeanPoolEncoder.encode(cap).unwrap();
        let scores: Vec<f64> = audio.iter().map(|a| a.iter().zip(&t).map(|(x, y)| x * y).sum()).collect();
        assert_eq!(report.per_query[q].id, cap.id);
        assert_eq!(report.per_query[q].rank, sorted_rank(&scores, ds.pairing()[q]));
    }
    assert!(report.map10 < 1.0, "noisy data should not be perfect");
}

#[test]
fn evaluate_is_thread_count_independent() {
    let ds = generate_synthetic(&SynthConfig {
        n_audio: 50,
        d_audio: 6,
        d_text: 6,
        noise_sigma: 1.0,
        ..SynthConfig::default()
    })
    .unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&MeanPoolEncoder, &ds).unwrap())
    };
    let one = run(1);
    assert_eq!(one.to_json(), run(4).to_json());
}

#[test]
fn shuffled_queries_keep_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ranks: Vec<usize> = (0..40).map(|_| rng.random_range(1..=25)).collect();
    let a = metrics_from_ranks(&ranks, 25).unwrap();
    ranks.shuffle(&mut rng);
    let b = metrics_from_ranks(&ranks, 25).unwrap();
    assert!((a.map10 - b.map10).abs() < 1e-12);
    assert_eq!((a.r1, a.r5, a.r10), (b.r1, b.r5, b.r10));
}
