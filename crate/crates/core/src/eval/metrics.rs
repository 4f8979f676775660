use serde::{Deserialize, Serialize};

/// Per-label confusion counts for binary or multi-label decisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_: f64,
    /// Set when every count is zero.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(c: LabelCounts) -> f64 {
    let p = ratio(c.tp, c.tp + c.fp);
    let r = ratio(c.tp, c.tp + c.fn_);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro F1 pools counts across labels; macro F1 averages per-label F1, with
/// labels that have no gold and no predicted positives contributing 0.
pub fn f1_metrics(counts: &[LabelCounts]) -> F1Scores {
    let pooled = counts.iter().fold(LabelCounts::default(), |a, c| LabelCounts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    let macro_ = if counts.is_empty() {
        0.0
    } else {
        counts.iter().map(|&c| f1(c)).sum::<f64>() / counts.len() as f64
    };
    F1Scores {
        micro: f1(pooled),
        macro_,
        degenerate: pooled == LabelCounts::default(),
    }
}

/// Confusion counts per label from multi-hot predictions and gold labels.
pub fn multilabel_counts(pred: &[Vec<bool>], gold: &[Vec<bool>], num_labels: usize) -> Vec<LabelCounts> {
    let mut counts = vec![LabelCounts::default(); num_labels];
    for (p, g) in pred.iter().zip(gold) {
        for (l, c) in counts.iter_mut().enumerate() {
            match (p[l], g[l]) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    counts
}

/// Intent accuracy family. Out-of-domain figures are `None` when the gold
/// labels contain no out-of-domain example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentMetrics {
    pub acc_all: f64,
    pub acc_in: Option<f64>,
    /// Accuracy of the in-domain vs out-of-domain decision over all examples.
    pub acc_out: Option<f64>,
    pub recall_out: Option<f64>,
}

pub fn intent_metrics(pred: &[usize], gold: &[usize], out_class: usize) -> IntentMetrics {
    assert_eq!(pred.len(), gold.len());
    let n = gold.len() as u64;
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count() as u64;
    let (mut n_in, mut c_in, mut n_out, mut c_out, mut detect) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gold) {
        if g == out_class {
            n_out += 1;
            c_out += (p == out_class) as u64;
        } else {
            n_in += 1;
            c_in += (p == g) as u64;
        }
        detect += ((p == out_class) == (g == out_class)) as u64;
    }
    let has_out = n_out > 0;
    IntentMetrics {
        acc_all: ratio(correct, n),
        acc_in: (n_in > 0).then(|| ratio(c_in, n_in)),
        acc_out: has_out.then(|| ratio(detect, n)),
        recall_out: has_out.then(|| ratio(c_out, n_out)),
    }
}

/// 1-based rank of candidate `truth`; equal scores at lower indices rank first.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < truth))
        .count()
}

/// Fraction of ranks at most `k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tp: u64, fp: u64, fn_: u64) -> LabelCounts {
        LabelCounts { tp, fp, fn_ }
    }

    #[test]
    fn f1_hand_cases() {
        let s = f1_metrics(&[c(1, 0, 0)]);
        assert_eq!((s.micro, s.macro_), (1.0, 1.0));

        let s = f1_metrics(&[c(2, 1, 1), c(1, 0, 1)]);
        assert!((s.micro - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.macro_ - 2.0 / 3.0).abs() < 1e-15);

        let s = f1_metrics(&[c(0, 0, 0), c(0, 0, 0)]);
        assert_eq!((s.micro, s.macro_, s.degenerate), (0.0, 0.0, true));

        let s = f1_metrics(&[c(0, 0, 4)]);
        assert_eq!(s.micro, 0.0);
        assert!(!s.degenerate);
    }

    #[test]
    fn intent_hand_table() {
        let out = 9;
        let mut gold = vec![0; 12];
        let mut pred = vec![0; 10];
        pred.extend([1, 2]);
        gold.extend([out; 4]);
        pred.extend([out, out, out, 3]);
        let m = intent_metrics(&pred, &gold, out);
        assert_eq!(m.recall_out, Some(0.75));
        assert!((m.acc_all - 13.0 / 16.0).abs() < 1e-15);
        assert!((m.acc_in.unwrap() - 10.0 / 12.0).abs() < 1e-15);
        assert!((m.acc_out.unwrap() - 15.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn intent_without_ood_reports_absent() {
        let m = intent_metrics(&[0, 1], &[0, 1], 5);
        assert_eq!(m.acc_all, 1.0);
        assert_eq!(m.acc_in, Some(1.0));
        assert_eq!(m.acc_out, None);
        assert_eq!(m.recall_out, None);
    }

    #[test]
    fn ranks_and_ties() {
        let mut scores = vec![0.5; 100];
        scores[7] = 0.9;
        assert_eq!(rank_of(&scores, 7), 1);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 2), 3);
        assert_eq!(rank_of(&[1.0, 1.0, 1.0], 0), 1);
        let ranks = [1, 2, 5, 100];
        assert_eq!(hits_at_k(&ranks, 1), 0.25);
        assert_eq!(hits_at_k(&ranks, 3), 0.5);
        assert_eq!(hits_at_k(&ranks, 100), 1.0);
    }
}
