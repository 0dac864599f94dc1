//! Exact t-SNE for tens to hundreds of points.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self { perplexity: 10.0, iterations: 1000, learning_rate: 200.0, exaggeration: 12.0, exaggeration_iters: 250 }
    }
}

/// Conditional affinities of row `i` at precision `beta`; returns the row
/// and its Shannon entropy (nats).
fn row_affinities(d2: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let mut p: Vec<f64> = d2.iter().enumerate().map(|(j, &d)| if j == i { 0.0 } else { (-d * beta).exp() }).collect();
    let sum: f64 = p.iter().sum::<f64>().max(1e-300);
    let mut h = 0.0;
    for v in p.iter_mut() {
        *v /= sum;
        if *v > 1e-300 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Symmetric joint affinities whose per-row entropy matches `ln(perplexity)`.
fn joint_affinities(points: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = points.len();
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let mut d2: Vec<f64> = points.iter().map(|q| points[i].iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
        // work relative to the nearest neighbour for numerical range
        let min = d2.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
        d2.iter_mut().for_each(|d| *d -= min);
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let mut row = Vec::new();
        for _ in 0..200 {
            let (r, h) = row_affinities(&d2, i, beta);
            row = r;
            if (h - target).abs() < 1e-10 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// 2-D coordinates for `points`, deterministic in `seed`.
pub fn project_2d(points: &[Vec<f64>], cfg: &TsneConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if !(cfg.perplexity > 0.0) || (n as f64) <= 3.0 * cfg.perplexity {
        return Err(Error::Domain(format!(
            "t-SNE with perplexity {} needs more than {} points, got {n}",
            cfg.perplexity,
            3.0 * cfg.perplexity
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("t-SNE input contains non-finite values".into()));
    }
    let p = joint_affinities(points, cfg.perplexity);
    let mut rng = stream(seed, domain::EVAL, 1);
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [1e-2 * rng.sample::<f64, _>(StandardNormal), 1e-2 * rng.sample::<f64, _>(StandardNormal)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    for it in 0..cfg.iterations {
        let exag = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    num[i * n + j] = 1.0 / (1.0 + d);
                    z += num[i * n + j];
                }
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (exag * p[i * n + j] - num[i * n + j] / z) * num[i * n + j];
                grad[0] += 4.0 * w * (y[i][0] - y[j][0]);
                grad[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for a in 0..2 {
                gains[i][a] = if (grad[a] > 0.0) != (vel[i][a] > 0.0) { gains[i][a] + 0.2 } else { (gains[i][a] * 0.8).max(0.01) };
                vel[i][a] = momentum * vel[i][a] - cfg.learning_rate * gains[i][a] * grad[a];
            }
        }
        for (yi, v) in y.iter_mut().zip(&vel) {
            yi[0] += v[0];
            yi[1] += v[1];
        }
        let mean = [y.iter().map(|v| v[0]).sum::<f64>() / n as f64, y.iter().map(|v| v[1]).sum::<f64>() / n as f64];
        for yi in y.iter_mut() {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "t-SNE coordinates".into() });
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::cluster::silhouette;

    fn blobs(n_each: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = stream(11, 0, 0);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..n_each {
                let mut v: Vec<f64> = (0..128).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
                // centers 10 apart along the first axis
                v[0] += 10.0 * c as f64;
                pts.push(v);
                labels.push(c);
            }
        }
        (pts, labels)
    }

    #[test]
    fn too_few_points_names_bound() {
        let err = project_2d(&vec![vec![0.0]; 30], &TsneConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("30"), "{err}");
    }

    #[test]
    fn separated_blobs_stay_separated() {
        let (pts, labels) = blobs(20);
        let y = project_2d(&pts, &TsneConfig::default(), 3).unwrap();
        assert_eq!(y.len(), 40);
        let coords: Vec<Vec<f64>> = y.iter().map(|p| p.to_vec()).collect();
        assert!(silhouette(&coords, &labels).unwrap() >= 0.8);
    }

    #[test]
    fn same_seed_same_coordinates() {
        let (pts, _) = blobs(16);
        let cfg = TsneConfig { iterations: 200, ..Default::default() };
        assert_eq!(project_2d(&pts, &cfg, 9).unwrap(), project_2d(&pts, &cfg, 9).unwrap());
    }
}
