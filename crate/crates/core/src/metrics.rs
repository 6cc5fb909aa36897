//! Multi-label evaluation: Jaccard@K, P@N, F1 and ROC-AUC.
//!
//! `scores[d][l]` is the score of label `l` on document `d`; `gold[d]` lists
//! the gold label indices. Rankings break ties toward the lower label index.
//! Undefined ratios (`0/0`) count as 0.

use alloc::vec;
use alloc::vec::Vec;

/// Label indices of the `k` highest scores.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn gold_mask(gold: &[usize], labels: usize) -> Vec<bool> {
    let mut m = vec![false; labels];
    for &g in gold {
        if g < labels {
            m[g] = true;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JaccardResult {
    pub mean: f64,
    pub evaluated: usize,
    /// Documents without gold labels, left out of the mean.
    pub skipped: usize,
}

pub fn jaccard_topk(scores: &[Vec<f64>], gold: &[Vec<usize>], k: usize) -> JaccardResult {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (s, g) in scores.iter().zip(gold) {
        let mask = gold_mask(g, s.len());
        let n_gold = mask.iter().filter(|&&b| b).count();
        if n_gold == 0 {
            skipped += 1;
            continue;
        }
        let top = top_k(s, k);
        let inter = top.iter().filter(|&&l| mask[l]).count();
        let union = top.len() + n_gold - inter;
        sum += inter as f64 / union as f64;
        evaluated += 1;
    }
    JaccardResult {
        mean: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        skipped,
    }
}

pub fn p_at_n(scores: &[Vec<f64>], gold: &[Vec<usize>], n: usize) -> f64 {
    if scores.is_empty() || n == 0 {
        return 0.0;
    }
    let total: f64 = scores
        .iter()
        .zip(gold)
        .map(|(s, g)| {
            let mask = gold_mask(g, s.len());
            top_k(s, n).iter().filter(|&&l| mask[l]).count() as f64 / n as f64
        })
        .sum();
    total / scores.len() as f64
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
}

/// Predictions are `score >= threshold`. Macro averages labels with at least
/// one gold positive.
pub fn f1_scores(scores: &[Vec<f64>], gold: &[Vec<usize>], threshold: f64) -> F1Scores {
    let labels = scores.first().map_or(0, Vec::len);
    let mut tp = vec![0usize; labels];
    let mut fp = vec![0usize; labels];
    let mut fn_ = vec![0usize; labels];
    for (s, g) in scores.iter().zip(gold) {
        let mask = gold_mask(g, labels);
        for l in 0..labels {
            match (s[l] >= threshold, mask[l]) {
                (true, true) => tp[l] += 1,
                (true, false) => fp[l] += 1,
                (false, true) => fn_[l] += 1,
                (false, false) => {}
            }
        }
    }
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let mut sum = 0.0;
    let mut count = 0;
    for l in 0..labels {
        if tp[l] + fn_[l] > 0 {
            sum += f1(tp[l], fp[l], fn_[l]);
            count += 1;
        }
    }
    F1Scores {
        macro_f1: if count == 0 { 0.0 } else { sum / count as f64 },
        micro_f1,
    }
}

/// Mann-Whitney AUC with midranks for ties; `None` unless both classes occur.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucScores {
    pub macro_auc: f64,
    pub micro_auc: f64,
}

pub fn auc_scores(scores: &[Vec<f64>], gold: &[Vec<usize>]) -> AucScores {
    let labels = scores.first().map_or(0, Vec::len);
    let masks: Vec<Vec<bool>> = gold.iter().map(|g| gold_mask(g, labels)).collect();
    let mut sum = 0.0;
    let mut count = 0;
    for l in 0..labels {
        let s: Vec<f64> = scores.iter().map(|r| r[l]).collect();
        let p: Vec<bool> = masks.iter().map(|m| m[l]).collect();
        if let Some(a) = auc(&s, &p) {
            sum += a;
            count += 1;
        }
    }
    let pooled_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let pooled_p: Vec<bool> = masks.iter().flatten().copied().collect();
    AucScores {
        macro_auc: if count == 0 { 0.0 } else { sum / count as f64 },
        micro_auc: auc(&pooled_s, &pooled_p).unwrap_or(0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub jaccard_top20: f64,
    pub jaccard_top30: f64,
    pub jaccard_skipped: usize,
    pub p_at_n: Vec<(usize, f64)>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub macro_auc: f64,
    pub micro_auc: f64,
}

pub const DEFAULT_P_AT: [usize; 3] = [5, 8, 15];

pub fn evaluate(scores: &[Vec<f64>], gold: &[Vec<usize>], p_at: &[usize]) -> EvalResult {
    let j20 = jaccard_topk(scores, gold, 20);
    let j30 = jaccard_topk(scores, gold, 30);
    let f = f1_scores(scores, gold, 0.5);
    let a = auc_scores(scores, gold);
    EvalResult {
        jaccard_top20: j20.mean,
        jaccard_top30: j30.mean,
        jaccard_skipped: j20.skipped,
        p_at_n: p_at.iter().map(|&n| (n, p_at_n(scores, gold, n))).collect(),
        macro_f1: f.macro_f1,
        micro_f1: f.micro_f1,
        macro_auc: a.macro_auc,
        micro_auc: a.micro_auc,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_examples() {
        let s = vec![vec![0.9, 0.8, 0.7, 0.1]];
        assert_eq!(jaccard_topk(&s, &[vec![0, 1, 2]], 3).mean, 1.0);
        assert_eq!(jaccard_topk(&s, &[vec![3]], 3).mean, 0.0);
        assert_eq!(jaccard_topk(&s, &[vec![1, 2, 3]], 3).mean, 0.5);
        let r = jaccard_topk(&[s[0].clone(), s[0].clone()], &[vec![], vec![0]], 1);
        assert_eq!((r.mean, r.evaluated, r.skipped), (1.0, 1, 1));
    }

    #[test]
    fn p_at_n_examples() {
        let s = vec![(0..10).map(|i| 1.0 - i as f64 / 10.0).collect::<Vec<_>>()];
        assert_eq!(p_at_n(&s, &[(0..8).collect()], 8), 1.0);
        assert_eq!(p_at_n(&s, &[vec![9]], 8), 0.0);
        assert_eq!(p_at_n(&s, &[vec![0, 2, 4, 7]], 5), 0.6);
    }

    #[test]
    fn ties_break_to_lower_index() {
        assert_eq!(top_k(&[0.5, 0.7, 0.7, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
    }

    #[test]
    fn f1_examples() {
        let gold = vec![vec![0], vec![1], vec![0, 1]];
        let perfect = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.6]];
        let f = f1_scores(&perfect, &gold, 0.5);
        assert_eq!((f.macro_f1, f.micro_f1), (1.0, 1.0));
        let none = vec![vec![0.0; 2]; 3];
        let f = f1_scores(&none, &gold, 0.5);
        assert_eq!((f.macro_f1, f.micro_f1), (0.0, 0.0));
        // Label 0: tp 2, fp 0, fn 0. Label 1: tp 1, fp 1, fn 1.
        let mixed = vec![vec![0.9, 0.9], vec![0.1, 0.1], vec![0.7, 0.6]];
        let f = f1_scores(&mixed, &gold, 0.5);
        assert!((f.macro_f1 - (1.0 + 0.5) / 2.0).abs() < 1e-15);
        assert!((f.micro_f1 - 6.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_skips_labels_without_positives() {
        let f = f1_scores(&[vec![0.9, 0.9]], &[vec![0]], 0.5);
        assert_eq!(f.macro_f1, 1.0);
        assert!((f.micro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        // Pairs (pos, neg): (0.8,0.3) win, (0.8,0.9) loss, (0.3,0.3) tie, (0.3,0.9) loss.
        assert_eq!(auc(&[0.8, 0.3, 0.3, 0.9], &[true, true, false, false]), Some(0.375));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn auc_scores_macro_excludes_single_class_labels() {
        let scores = vec![vec![0.9, 0.3], vec![0.1, 0.4]];
        let gold = vec![vec![0], vec![0]];
        let a = auc_scores(&scores, &gold);
        assert_eq!(a.macro_auc, 0.0);
        let gold = vec![vec![0], vec![]];
        let a = auc_scores(&scores, &gold);
        assert_eq!(a.macro_auc, 1.0);
        // Pooled positives {0.9}, negatives {0.3, 0.1, 0.4}.
        assert_eq!(a.micro_auc, 1.0);
    }

    #[test]
    fn evaluate_collects_everything() {
        let scores = vec![vec![0.9, 0.1, 0.6], vec![0.2, 0.8, 0.3]];
        let gold = vec![vec![0, 2], vec![1]];
        let r = evaluate(&scores, &gold, &DEFAULT_P_AT);
        assert_eq!(r.micro_f1, 1.0);
        assert_eq!(r.p_at_n.len(), 3);
        assert!((r.jaccard_top20 - (2.0 / 3.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }
}
