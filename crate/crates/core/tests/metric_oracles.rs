use std::collections::BTreeSet;

use boottod_core::eval::{f1_metrics, hits_at_k, intent_metrics, multilabel_counts, rank_of};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Definitional F1 from the sets of (example, label) decisions.
fn set_f1(pred: &BTreeSet<(usize, usize)>, gold: &BTreeSet<(usize, usize)>) -> f64 {
    let hit = pred.intersection(gold).count();
    harmonic(frac(hit, pred.len()), frac(hit, gold.len()))
}

fn pairs(m: &[Vec<bool>], label: Option<usize>) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    for (i, row) in m.iter().enumerate() {
        for (l, &on) in row.iter().enumerate() {
            if on && label.is_none_or(|x| x == l) {
                s.insert((i, l));
            }
        }
    }
    s
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, labels: usize, density: f64) -> Vec<Vec<bool>> {
    (0..n).map(|_| (0..labels).map(|_| rng.gen_bool(density)).collect()).collect()
}

#[test]
fn f1_matches_set_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.gen_range(1..12);
        let labels = rng.gen_range(1..7);
        let (dp, dg) = (rng.gen_range(0.05..0.7), rng.gen_range(0.05..0.7));
        let pred = random_matrix(&mut rng, n, labels, dp);
        let gold = random_matrix(&mut rng, n, labels, dg);
        let scores = f1_metrics(&multilabel_counts(&pred, &gold, labels));

        let micro = set_f1(&pairs(&pred, None), &pairs(&gold, None));
        let mut macro_sum = 0.0;
        for l in 0..labels {
            macro_sum += set_f1(&pairs(&pred, Some(l)), &pairs(&gold, Some(l)));
        }
        assert_eq!(scores.micro, micro);
        assert_eq!(scores.macro_, macro_sum / labels as f64);
    }
}

/// Rank by sorting candidates on (score descending, index ascending).
fn sorted_rank(scores: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    1 + order.iter().position(|&i| i == truth).unwrap()
}

#[test]
fn k_to_100_matches_sorting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let queries = rng.gen_range(1..20);
        let mut ranks = Vec::new();
        let mut oracle = Vec::new();
        for _ in 0..queries {
            // Small integer scores force plenty of ties.
            let scores: Vec<f64> = (0..100).map(|_| rng.gen_range(0..8) as f64).collect();
            let truth = rng.gen_range(0..100);
            ranks.push(rank_of(&scores, truth));
            oracle.push(sorted_rank(&scores, truth));
        }
        assert_eq!(ranks, oracle);
        for k in [1, 3, 10, 100] {
            let expected = frac(oracle.iter().filter(|&&r| r <= k).count(), oracle.len());
            assert_eq!(hits_at_k(&ranks, k), expected);
        }
        assert_eq!(hits_at_k(&ranks, 100), 1.0);
    }
}

#[test]
fn uniform_random_scoring_hits_one_percent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let trials = 10_000;
    let ranks: Vec<usize> = (0..trials)
        .map(|_| {
            let scores: Vec<f64> = (0..100).map(|_| rng.gen()).collect();
            rank_of(&scores, rng.gen_range(0..100))
        })
        .collect();
    let top1 = hits_at_k(&ranks, 1);
    assert!((top1 - 0.01).abs() <= 0.005, "1-to-100 under random scoring: {top1}");
    let top3 = hits_at_k(&ranks, 3);
    assert!((top3 - 0.03).abs() <= 0.008, "3-to-100 under random scoring: {top3}");
}

#[test]
fn intent_metrics_match_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..30);
        let classes = rng.gen_range(2..6);
        let out = classes - 1;
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let m = intent_metrics(&pred, &gold, out);
        let idx: Vec<usize> = (0..n).collect();
        let correct = |set: &[usize]| set.iter().filter(|&&i| pred[i] == gold[i]).count();
        let ins: Vec<usize> = idx.iter().copied().filter(|&i| gold[i] != out).collect();
        let outs: Vec<usize> = idx.iter().copied().filter(|&i| gold[i] == out).collect();
        assert_eq!(m.acc_all, frac(correct(&idx), n));
        assert_eq!(m.acc_in, (!ins.is_empty()).then(|| frac(correct(&ins), ins.len())));
        assert_eq!(m.recall_out, (!outs.is_empty()).then(|| frac(correct(&outs), outs.len())));
        let detect = idx.iter().filter(|&&i| (pred[i] == out) == (gold[i] == out)).count();
        assert_eq!(m.acc_out, (!outs.is_empty()).then(|| frac(detect, n)));
    }
}
