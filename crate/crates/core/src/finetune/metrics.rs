//! Evaluation metrics for the downstream tasks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilabelScores {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn sorted_unique(v: &[usize]) -> Vec<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Example-based multi-label metrics averaged over questions.
pub fn metric_multilabel(preds: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<MultilabelScores> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::validation("preds", "needs as many non-zero predictions as truths"));
    }
    let mut sum = [0.0; 4];
    for (p, t) in preds.iter().zip(truth) {
        let (p, t) = (sorted_unique(p), sorted_unique(t));
        if t.is_empty() {
            return Err(Error::validation("truth", "empty truth label set"));
        }
        let inter = intersection_size(&p, &t) as f64;
        let union = (p.len() + t.len()) as f64 - inter;
        let prec = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
        let rec = inter / t.len() as f64;
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        sum[0] += inter / union;
        sum[1] += prec;
        sum[2] += rec;
        sum[3] += f1;
    }
    let n = preds.len() as f64;
    Ok(MultilabelScores {
        acc: sum[0] / n,
        precision: sum[1] / n,
        recall: sum[2] / n,
        f1: sum[3] / n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionScores {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when no pair has distinct truth values.
    pub doa: Option<f64>,
    /// `None` when either input is constant.
    pub pcc: Option<f64>,
}

fn check_pair(preds: &[f64], truth: &[f64]) -> Result<()> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::validation("preds", "needs equal, non-zero lengths"));
    }
    Ok(())
}

pub fn metric_regression(preds: &[f64], truth: &[f64]) -> Result<RegressionScores> {
    check_pair(preds, truth)?;
    let (mae, rmse) = mae_rmse(preds, truth);
    Ok(RegressionScores {
        mae,
        rmse,
        doa: doa(preds, truth),
        pcc: pearson(preds, truth),
    })
}

fn mae_rmse(preds: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = preds.len() as f64;
    let mae = preds.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = preds.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    (mae, mse.sqrt())
}

/// Sample Pearson correlation, `None` for a constant input.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

struct Fenwick(Vec<usize>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, mut i: usize) -> usize {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Degree of agreement: over pairs with `truth_i > truth_j`, the fraction
/// with `pred_i > pred_j`, prediction ties counting one half.
pub fn doa(preds: &[f64], truth: &[f64]) -> Option<f64> {
    let n = preds.len();
    let mut ranks: Vec<f64> = preds.to_vec();
    ranks.sort_by(f64::total_cmp);
    ranks.dedup();
    let rank = |p: f64| ranks.binary_search_by(|r| r.total_cmp(&p)).expect("present");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| truth[a].total_cmp(&truth[b]));
    let mut tree = Fenwick(vec![0; ranks.len() + 1]);
    let (mut pairs, mut score) = (0usize, 0.0);
    let mut inserted = 0;
    let mut g = 0;
    while g < n {
        let mut end = g;
        while end < n && truth[order[end]] == truth[order[g]] {
            end += 1;
        }
        for &i in &order[g..end] {
            let r = rank(preds[i]);
            let below = tree.prefix(r);
            let equal = tree.prefix(r + 1) - below;
            score += below as f64 + 0.5 * equal as f64;
            pairs += inserted;
        }
        for &i in &order[g..end] {
            tree.add(rank(preds[i]));
            inserted += 1;
        }
        g = end;
    }
    (pairs > 0).then(|| score / pairs as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub acc: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
}

pub fn metric_binary(probs: &[f64], labels: &[bool]) -> Result<BinaryScores> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::validation("probs", "needs equal, non-zero lengths"));
    }
    let truth: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    let (mae, rmse) = mae_rmse(probs, &truth);
    let acc = probs
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p >= 0.5) == **l)
        .count() as f64
        / probs.len() as f64;
    Ok(BinaryScores {
        acc,
        auc: auc_pairs(probs, labels),
        mae,
        rmse,
    })
}

/// AUC by enumerating every (positive, negative) pair; ties count one half.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|x| *x.1).map(|x| *x.0).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|x| !*x.1).map(|x| *x.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut s = 0.0;
    for p in &pos {
        for q in &neg {
            s += match p.total_cmp(q) {
                Ordering::Greater => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Less => 0.0,
            };
        }
    }
    Some(s / (pos.len() * neg.len()) as f64)
}

/// AUC from the Mann–Whitney rank statistic with mid-ranks for ties.
pub fn auc_rank(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += order[i..j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
