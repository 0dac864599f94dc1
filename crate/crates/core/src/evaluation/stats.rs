//! Rank correlation, ridge probes and permutation nulls.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranks starting at 1; ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::Domain("rank correlation needs at least 2 points".into()));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

fn check_rows(rows: &[Vec<f64>], what: &str) -> Result<usize> {
    let w = rows.first().map(Vec::len).ok_or_else(|| Error::EmptyTable(what.into()))?;
    if let Some(r) = rows.iter().find(|r| r.len() != w) {
        return Err(Error::Dimension { expected: w, got: r.len() });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} contains non-finite values")));
    }
    Ok(w)
}

/// Per factor, the largest `|rho|` against any single feature column.
pub fn max_abs_spearman(features: &[Vec<f64>], factors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let p = check_rows(features, "features")?;
    let k = check_rows(factors, "factors")?;
    if features.len() != factors.len() {
        return Err(Error::Dimension { expected: factors.len(), got: features.len() });
    }
    let ranked: Vec<Vec<f64>> = (0..p).map(|j| average_ranks(&column(features, j))).collect();
    (0..k)
        .map(|f| {
            let rf = average_ranks(&column(factors, f));
            Ok(ranked.iter().map(|c| pearson(c, &rf).abs()).fold(0.0, f64::max))
        })
        .collect()
}

/// Column-standardized copy; constant columns become zero.
fn standardize(rows: &[Vec<f64>], fit_on: &[usize]) -> Vec<Vec<f64>> {
    let p = rows[0].len();
    let n = fit_on.len() as f64;
    let mut out = rows.to_vec();
    for j in 0..p {
        let mean = fit_on.iter().map(|&i| rows[i][j]).sum::<f64>() / n;
        let var = fit_on.iter().map(|&i| (rows[i][j] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in out.iter_mut() {
            r[j] = if sd > 1e-12 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    out
}

const ALPHAS: [f64; 9] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3, 1e4, 1e5];

/// Ridge fit in kernel form on `train` rows; returns predictions for `test`.
/// The penalty is picked from a fixed grid by closed-form leave-one-out
/// error on the training rows.
fn ridge_predict(x: &[Vec<f64>], y: &[f64], train: &[usize], test: &[usize]) -> Vec<f64> {
    let n = train.len();
    let ym = train.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let gram = DMatrix::from_fn(n, n, |a, b| dot(&x[train[a]], &x[train[b]]));
    let yt = DVector::from_iterator(n, train.iter().map(|&i| y[i] - ym));
    let mut best: Option<(f64, DVector<f64>)> = None;
    for &alpha in &ALPHAS {
        let k = &gram + DMatrix::identity(n, n) * alpha;
        let Some(chol) = k.cholesky() else { continue };
        let kinv = chol.inverse();
        let dual = &kinv * &yt;
        // hat matrix H = G (G + aI)^-1, residual_i / (1 - H_ii)
        let h = &gram * &kinv;
        let fitted = &gram * &dual;
        let loo: f64 = (0..n).map(|i| ((yt[i] - fitted[i]) / (1.0 - h[(i, i)]).max(1e-12)).powi(2)).sum();
        if best.as_ref().map_or(true, |(b, _)| loo < *b) {
            best = Some((loo, dual));
        }
    }
    let Some((_, dual)) = best else {
        return vec![ym; test.len()];
    };
    test.iter().map(|&t| ym + train.iter().enumerate().map(|(a, &i)| dual[a] * dot(&x[t], &x[i])).sum::<f64>()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cross-validated ridge probe from features to each factor. Rows are split
/// into `folds` contiguous-by-permutation folds; predictions from all folds
/// are pooled and scored as `1 - SSE / SST` per factor.
pub fn probe_r2<R: Rng>(features: &[Vec<f64>], factors: &[Vec<f64>], folds: usize, rng: &mut R) -> Result<Vec<f64>> {
    check_rows(features, "features")?;
    let k = check_rows(factors, "factors")?;
    let n = features.len();
    if n != factors.len() {
        return Err(Error::Dimension { expected: factors.len(), got: n });
    }
    if folds < 2 || folds > n || n < 4 {
        return Err(Error::Domain(format!("cannot run {folds}-fold probe on {n} rows")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut pred = vec![vec![0.0; k]; n];
    for f in 0..folds {
        let test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        let train: Vec<usize> = order.iter().copied().filter(|i| !test.contains(i)).collect();
        let x = standardize(features, &train);
        for j in 0..k {
            let y = column(factors, j);
            for (t, p) in test.iter().zip(ridge_predict(&x, &y, &train, &test)) {
                pred[*t][j] = p;
            }
        }
    }
    Ok((0..k)
        .map(|j| {
            let y = column(factors, j);
            let m = y.iter().sum::<f64>() / n as f64;
            let sst: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
            let sse: f64 = y.iter().zip(&pred).map(|(v, p)| (v - p[j]).powi(2)).sum();
            if sst > 0.0 {
                1.0 - sse / sst
            } else {
                0.0
            }
        })
        .collect())
}

/// Factor-recovery summary of one feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecovery {
    /// Per factor, max `|rho|` over feature columns.
    pub max_abs_spearman: Vec<f64>,
    /// Per factor, cross-validated probe R^2.
    pub probe_r2: Vec<f64>,
    /// Mean of `probe_r2`.
    pub probe_r2_mean: f64,
    /// 95th percentile of max `|rho|` with factor rows shuffled.
    pub null_max_abs_spearman_q95: Vec<f64>,
}

pub fn factor_recovery<R: Rng>(features: &[Vec<f64>], factors: &[Vec<f64>], permutations: usize, rng: &mut R) -> Result<FactorRecovery> {
    let rho = max_abs_spearman(features, factors)?;
    let folds = features.len().min(5);
    let r2 = probe_r2(features, factors, folds, rng)?;
    let q95 = permutation_null(features, factors, permutations, rng)?;
    Ok(FactorRecovery {
        probe_r2_mean: r2.iter().sum::<f64>() / r2.len() as f64,
        max_abs_spearman: rho,
        probe_r2: r2,
        null_max_abs_spearman_q95: q95,
    })
}

/// Per factor, the 95th percentile of max `|rho|` after shuffling rows.
pub fn permutation_null<R: Rng>(features: &[Vec<f64>], factors: &[Vec<f64>], permutations: usize, rng: &mut R) -> Result<Vec<f64>> {
    let k = check_rows(factors, "factors")?;
    if permutations == 0 {
        return Ok(vec![f64::NAN; k]);
    }
    let mut draws = vec![Vec::with_capacity(permutations); k];
    let mut shuffled = factors.to_vec();
    for _ in 0..permutations {
        shuffled.shuffle(rng);
        for (d, v) in draws.iter_mut().zip(max_abs_spearman(features, &shuffled)?) {
            d.push(v);
        }
    }
    Ok(draws
        .into_iter()
        .map(|mut d| {
            d.sort_by(f64::total_cmp);
            d[((d.len() as f64 * 0.95).ceil() as usize).clamp(1, d.len()) - 1]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_hand_value() {
        // rank differences d = (0, 0, 1, -1, 0): rho = 1 - 6*2 / (5*24) = 0.9
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
    }

    #[test]
    fn copied_factors_recover_perfectly() {
        let mut rng = stream(3, 0, 0);
        let f: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let rec = factor_recovery(&f, &f, 20, &mut rng).unwrap();
        assert!(rec.max_abs_spearman.iter().all(|&r| (r - 1.0).abs() < 1e-12));
        assert!(rec.probe_r2.iter().all(|&r| r > 0.99), "{:?}", rec.probe_r2);
    }

    #[test]
    fn cube_is_rank_invariant() {
        let mut rng = stream(4, 0, 0);
        let f: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.gen::<f64>() - 0.5]).collect();
        let cubed: Vec<Vec<f64>> = f.iter().map(|r| vec![r[0].powi(3)]).collect();
        assert!((max_abs_spearman(&cubed, &f).unwrap()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_codes_stay_in_null_band() {
        let mut hits = 0;
        for trial in 0..40 {
            let mut rng = stream(5, 0, trial);
            let codes: Vec<Vec<f64>> = (0..100).map(|_| (0..128).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let f: Vec<Vec<f64>> = (0..100).map(|_| vec![rng.gen::<f64>()]).collect();
            if max_abs_spearman(&codes, &f).unwrap()[0] < 0.4 {
                hits += 1;
            }
        }
        assert!(hits >= 38, "{hits}/40");
    }

    #[test]
    fn single_row_is_error() {
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn spearman_is_bounded_and_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 3..30), seed in 0u64..100) {
            let mut rng = stream(seed, 0, 0);
            let b: Vec<f64> = a.iter().map(|_| rng.gen::<f64>()).collect();
            let r = spearman(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((r - spearman(&b, &a).unwrap()).abs() < 1e-12);
        }
    }
}
