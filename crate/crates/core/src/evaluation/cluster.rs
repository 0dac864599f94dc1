//! Silhouette scores and k-means clustering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distances. Points in singleton clusters
/// score 0, as do points whose intra- and nearest inter-cluster distances
/// are both 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Dimension { expected: points.len(), got: labels.len() });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Domain("silhouette needs at least two distinct labels".into()));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k).filter(|&c| c != own && sizes[c] > 0).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Lloyd iterations from k-means++ seeds; the best of `restarts` by inertia.
pub fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, restarts: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = vec![points[rng.gen_range(0..n)].clone()];
        while centers.len() < k {
            let d2: Vec<f64> = points.iter().map(|p| centers.iter().map(|c| dist(p, c).powi(2)).fold(f64::INFINITY, f64::min)).collect();
            let total: f64 = d2.iter().sum();
            let next = if total <= 0.0 {
                rng.gen_range(0..n)
            } else {
                let mut t = rng.gen::<f64>() * total;
                d2.iter().position(|&d| {
                    t -= d;
                    t <= 0.0
                })
                .unwrap_or(n - 1)
            };
            centers.push(points[next].clone());
        }
        let mut labels = vec![usize::MAX; n];
        for _ in 0..300 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let l = (0..k).min_by(|&a, &b| dist(p, &centers[a]).total_cmp(&dist(p, &centers[b]))).expect("k > 0");
                if labels[i] != l {
                    labels[i] = l;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in center.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist(p, &centers[l]).powi(2)).sum();
        if best.as_ref().map_or(true, |(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterChoice {
    pub k: usize,
    pub silhouette: f64,
    pub labels: Vec<usize>,
    /// `(k, silhouette)` for every candidate that produced two or more clusters.
    pub sweep: Vec<(usize, f64)>,
}

/// k-means for each k in `ks`, keeping the k with the highest silhouette.
pub fn cluster_sweep<R: Rng>(points: &[Vec<f64>], ks: std::ops::RangeInclusive<usize>, rng: &mut R) -> Result<ClusterChoice> {
    let mut best: Option<ClusterChoice> = None;
    let mut sweep = Vec::new();
    for k in ks.filter(|&k| k >= 2 && k < points.len()) {
        let labels = kmeans(points, k, 10, rng)?;
        let Ok(s) = silhouette(points, &labels) else { continue };
        sweep.push((k, s));
        if best.as_ref().map_or(true, |b| s > b.silhouette) {
            best = Some(ClusterChoice { k, silhouette: s, labels, sweep: Vec::new() });
        }
    }
    let mut best = best.ok_or_else(|| Error::Domain(format!("no valid clustering of {} points", points.len())))?;
    best.sweep = sweep;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn two_tight_pairs() {
        let p = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        // every point: a = 0.1, b ~ 10.0; s = 1 - a/b
        let want = [(10.05 - 0.1) / 10.05, (9.95 - 0.1) / 9.95, (9.95 - 0.1) / 9.95, (10.05 - 0.1) / 10.05];
        let s = silhouette(&p, &[0, 0, 1, 1]).unwrap();
        assert!((s - want.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!(s > 0.95);
    }

    #[test]
    fn identical_points_score_zero() {
        let p = vec![vec![1.0]; 4];
        assert_eq!(silhouette(&p, &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn single_label_is_error() {
        assert!(silhouette(&[vec![0.0], vec![1.0]], &[0, 0]).is_err());
    }

    #[test]
    fn sweep_finds_three_blobs() {
        let mut rng = stream(2, 0, 0);
        let mut p = Vec::new();
        for c in 0..3 {
            for _ in 0..8 {
                p.push(vec![c as f64 * 5.0 + rng.gen::<f64>() * 0.2, rng.gen::<f64>() * 0.2]);
            }
        }
        let choice = cluster_sweep(&p, 2..=6, &mut rng).unwrap();
        assert_eq!(choice.k, 3);
        assert!(choice.silhouette > 0.9);
    }
}
