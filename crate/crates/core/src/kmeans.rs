//! k-means with k-means++ seeding and Lloyd iterations.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid, lowest index on exact ties.
    pub fn assign(&self, point: &[f64]) -> Result<usize> {
        if point.len() != self.dim {
            return Err(Error::Data(format!(
                "point has {} dims, model has {}",
                point.len(),
                self.dim
            )));
        }
        Ok(nearest(&self.centroids, self.dim, point).0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Fits `k` clusters to `points` (`n × dim`, row-major).
pub fn kmeans_fit(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Data(format!(
            "{} values do not form rows of {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if n < k {
        return Err(Error::Data(format!("cannot fit k={k} clusters to {n} points")));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&d2).expect("nonnegative weights").sample(&mut rng)
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        let c = &centroids[centroids.len() - dim..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for i in 0..n {
            let (j, d) = nearest(&centroids, dim, row(i));
            assignments[i] = j;
            inertia += d;
        }
        trace.push(inertia);
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i];
            counts[j] += 1;
            for (s, v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in next[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        repair_empty(&mut next, &mut counts, &mut assignments, points, dim);
        let shift = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            // one more assignment pass so assignments match final centroids
            let mut inertia = 0.0;
            for i in 0..n {
                let (j, d) = nearest(&centroids, dim, row(i));
                assignments[i] = j;
                inertia += d;
            }
            trace.push(inertia);
            break;
        }
    }

    // With fewer distinct points than k the tie rule can leave a cluster
    // empty; hand it a zero-distance duplicate so all k groups stay usable.
    let mut counts = vec![0usize; k];
    assignments.iter().for_each(|&a| counts[a] += 1);
    if counts.contains(&0) {
        repair_empty(&mut centroids, &mut counts, &mut assignments, points, dim);
        let inertia = (0..n)
            .map(|i| sq_dist(row(i), &centroids[assignments[i] * dim..(assignments[i] + 1) * dim]))
            .sum();
        trace.push(inertia);
    }

    let inertia = *trace.last().unwrap();
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        assignments,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Moves each empty cluster's centroid onto the point farthest from its
/// current centroid, taking that point out of its old cluster.
fn repair_empty(
    centroids: &mut [f64],
    counts: &mut [usize],
    assignments: &mut [usize],
    points: &[f64],
    dim: usize,
) {
    let k = counts.len();
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let d = sq_dist(p, &centroids[a * dim..(a + 1) * dim]);
            if best.map_or(true, |(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            centroids[j * dim..(j + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
        }
    }
}

/// Best of several seeds by final inertia (earliest seed wins ties).
pub fn kmeans_best_of(
    points: &[f64],
    dim: usize,
    k: usize,
    seeds: impl IntoIterator<Item = u64>,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for s in seeds {
        let m = kmeans_fit(points, dim, k, s, max_iter, tol)?;
        if best.as_ref().map_or(true, |b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    best.ok_or_else(|| Error::Config("no seeds given".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn two_points_two_clusters() {
        let m = kmeans_fit(&[0.0, 10.0], 1, 2, 0, 100, 1e-6).unwrap();
        let mut c = m.centroids.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![0.0, 10.0]);
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let m = kmeans_fit(&pts, 2, 1, 4, 100, 1e-9).unwrap();
        assert!((m.centroids[0] - 3.0).abs() < 1e-12);
        assert!((m.centroids[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(kmeans_fit(&[1.0], 1, 2, 0, 10, 1e-6).is_err());
        assert!(kmeans_fit(&[1.0, 2.0], 1, 0, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn assign_tie_and_exact() {
        let m = ClusterModel {
            k: 2,
            dim: 1,
            centroids: vec![0.0, 2.0],
            assignments: vec![],
            inertia: 0.0,
            inertia_trace: vec![],
            iterations: 0,
        };
        assert_eq!(m.assign(&[1.0]).unwrap(), 0);
        assert_eq!(m.assign(&[2.0]).unwrap(), 1);
        assert!(m.assign(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn assign_matches_explicit_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<f64> = (0..300).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let m = kmeans_fit(&pts, 3, 5, 2, 100, 1e-6).unwrap();
        for _ in 0..200 {
            let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let dists: Vec<f64> = (0..5).map(|j| sq_dist(&p, m.centroid(j))).collect();
            let mut arg = 0;
            for j in 1..5 {
                if dists[j] < dists[arg] {
                    arg = j;
                }
            }
            assert_eq!(m.assign(&p).unwrap(), arg);
        }
    }

    #[test]
    fn inertia_non_increasing_and_clusters_nonempty() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<f64> = (0..16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = kmeans_fit(&pts, 4, 8, seed, 100, 1e-6).unwrap();
            for w in m.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", m.inertia_trace);
            }
            let mut counts = [0usize; 8];
            m.assignments.iter().for_each(|&a| counts[a] += 1);
            assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        }
    }

    #[test]
    fn duplicate_points_still_fill_k() {
        let pts = [1.0, 1.0, 1.0, 1.0, 5.0, 5.0];
        let m = kmeans_fit(&pts, 1, 3, 0, 50, 1e-9).unwrap();
        let mut counts = [0usize; 3];
        m.assignments.iter().for_each(|&a| counts[a] += 1);
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    // exhaustive search over every 2-partition gives the global optimum
    fn best_two_partition(pts: &[f64], dim: usize) -> f64 {
        let n = pts.len() / dim;
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0.0;
            for side in [0, 1] {
                let members: Vec<usize> = (0..n).filter(|&i| (mask >> i) & 1 == side).collect();
                for d in 0..dim {
                    let mean = members.iter().map(|&i| pts[i * dim + d]).sum::<f64>() / members.len() as f64;
                    cost += members.iter().map(|&i| (pts[i * dim + d] - mean).powi(2)).sum::<f64>();
                }
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn two_clusters_reach_global_optimum_on_separated_data() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut pts = Vec::new();
            for i in 0..8 {
                let off = if i < 4 { 0.0 } else { 6.0 };
                pts.push(off + rng.gen_range(-1.0..1.0));
                pts.push(off + rng.gen_range(-1.0..1.0));
            }
            let m = kmeans_fit(&pts, 2, 2, seed, 100, 1e-9).unwrap();
            let opt = best_two_partition(&pts, 2);
            assert!((m.inertia - opt).abs() < 1e-9, "seed {seed}: {} vs {opt}", m.inertia);
        }
    }

    #[test]
    fn reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = kmeans_fit(&pts, 2, 4, 7, 100, 1e-6).unwrap();
        let b = kmeans_fit(&pts, 2, 4, 7, 100, 1e-6).unwrap();
        assert_eq!(a, b);
    }
}
