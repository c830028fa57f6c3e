//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

/// Half credit per tied pair, counted over every positive-negative pair.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            twice += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Σ over distinct thresholds, high to low, of Δrecall × precision, with
/// counts recomputed from scratch at every threshold.
pub fn step_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for t in ts {
        let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = sel.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let r = tp / p;
        ap += (r - prev) * (tp / sel.len() as f64);
        prev = r;
    }
    ap
}

/// Squared distances of `pts` (2-D) to their mean.
fn sse(pts: &[[f64; 2]]) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    pts.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum()
}

/// Lowest inertia over every split of 2-D points into two nonempty parts.
pub fn best_two_partition(flat: &[f64]) -> f64 {
    let pts: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0], c[1]]).collect();
    let n = pts.len();
    let mut best = f64::INFINITY;
    // fixing the last point in part B enumerates each split once
    for mask in 1u32..(1 << (n - 1)) {
        let (a, b): (Vec<_>, Vec<_>) = (0..n).partition(|&i| i < n - 1 && mask >> i & 1 == 1);
        let pa: Vec<[f64; 2]> = a.iter().map(|&i| pts[i]).collect();
        let pb: Vec<[f64; 2]> = b.iter().map(|&i| pts[i]).collect();
        best = best.min(sse(&pa) + sse(&pb));
    }
    best
}
