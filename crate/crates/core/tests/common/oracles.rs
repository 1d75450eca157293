//! Metric definitions written out directly, used as oracles for the
//! library implementations.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Set-based example metrics, written from the definitions.
pub fn multilabel_oracle(preds: &[Vec<usize>], truth: &[Vec<usize>]) -> (f64, f64, f64, f64) {
    let mut acc = 0.0;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        let p: HashSet<usize> = p.iter().copied().collect();
        let t: HashSet<usize> = t.iter().copied().collect();
        let inter = p.intersection(&t).count() as f64;
        let union = p.union(&t).count() as f64;
        let prec = if p.is_empty() { 0.0 } else { inter / p.len() as f64 };
        let rec = inter / t.len() as f64;
        acc += inter / union;
        p_sum += prec;
        r_sum += rec;
        f_sum += if inter == 0.0 { 0.0 } else { 2.0 * inter / (p.len() + t.len()) as f64 };
    }
    let n = preds.len() as f64;
    (acc / n, p_sum / n, r_sum / n, f_sum / n)
}

pub fn pair_auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn pair_doa_oracle(preds: &[f64], truth: &[f64]) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..preds.len() {
        for j in 0..preds.len() {
            if truth[i] > truth[j] {
                n += 1;
                if preds[i] > preds[j] {
                    s += 1.0;
                } else if preds[i] == preds[j] {
                    s += 0.5;
                }
            }
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Mean product of z-scores with population standard deviations.
pub fn pcc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, sd)
    };
    let ((mx, sx), (my, sy)) = (stats(x), stats(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) / sx * ((b - my) / sy)).sum::<f64>() / n
}

/// Values on a coarse grid so ties are common.
pub fn grid(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect()
}
