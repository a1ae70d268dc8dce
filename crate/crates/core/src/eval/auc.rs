//! ROC AUC as the Mann-Whitney statistic (ties credited half), computed by
//! rank-sum in O(n log n), plus percentile-bootstrap confidence intervals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `None` when labels are single-class (the metric is undefined, never 0).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank over the tie group
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Some((rank_sum_pos - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64))
}

/// Percentile bootstrap interval for the AUC. Resamples that lose one of the
/// classes are redrawn a bounded number of times, then skipped; the skip
/// count is returned alongside the interval.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    resamples: usize,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> Option<((f64, f64), usize)> {
    roc_auc(scores, labels)?;
    let n = scores.len();
    let mut stats = Vec::with_capacity(resamples);
    let mut skipped = 0usize;
    let mut s_buf = vec![0.0; n];
    let mut l_buf = vec![0u8; n];
    for _ in 0..resamples {
        let mut value = None;
        for _retry in 0..10 {
            for i in 0..n {
                let j = rng.gen_range(0..n);
                s_buf[i] = scores[j];
                l_buf[i] = labels[j];
            }
            if let Some(v) = roc_auc(&s_buf, &l_buf) {
                value = Some(v);
                break;
            }
        }
        match value {
            Some(v) => stats.push(v),
            None => skipped += 1,
        }
    }
    if stats.is_empty() {
        return None;
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - level) / 2.0;
    let lo_idx = ((alpha * stats.len() as f64).floor() as usize).min(stats.len() - 1);
    let hi_idx = (((1.0 - alpha) * stats.len() as f64).ceil() as usize)
        .saturating_sub(1)
        .min(stats.len() - 1);
    Some(((stats[lo_idx], stats[hi_idx]), skipped))
}
