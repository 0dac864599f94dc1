//! Exact Euclidean distance transforms on anisotropic grids.
//!
//! Separable lower-envelope algorithm (Felzenszwalb & Huttenlocher), one 1-d
//! pass per axis. Grids are row-major with the last axis fastest.

const FAR: f64 = 1e30;

/// Squared distance from every cell to the nearest `feature` cell, in
/// physical units given by `spacing`. Cells with no feature anywhere get `FAR`.
pub fn squared_edt(features: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    assert_eq!(dims.len(), spacing.len());
    assert_eq!(features.len(), dims.iter().product::<usize>());
    let mut d: Vec<f64> = features.iter().map(|&f| if f { 0.0 } else { FAR }).collect();
    let rank = dims.len();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..rank {
        let n = dims[axis];
        if n <= 1 {
            continue;
        }
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let w2 = spacing[axis] * spacing[axis];
        for o in 0..outer {
            for i in 0..stride {
                let base = o * n * stride + i;
                line.clear();
                line.extend((0..n).map(|k| d[base + k * stride]));
                envelope_1d(&line, w2, &mut out);
                for (k, &v) in out.iter().enumerate() {
                    d[base + k * stride] = v;
                }
            }
        }
    }
    d
}

/// `out[p] = min_q f[q] + w2 * (p - q)^2`.
fn envelope_1d(f: &[f64], w2: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, FAR);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    // skip leading cells with nothing reachable
    let Some(first) = f.iter().position(|&x| x < FAR) else { return };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= FAR {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64)) / (2.0 * w2 * (q - p) as f64);
            // z[0] is -inf, so this stops at k == 0
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let q = v[j];
        let dp = p as f64 - q as f64;
        *o = f[q] + w2 * dp * dp;
    }
}

/// Distance (physical units) from each inside cell of `mask` to the nearest
/// outside cell. Everything beyond the grid counts as outside along axes
/// with more than one cell; outside cells get 0.
pub fn distance_to_boundary(mask: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    // pad each non-degenerate axis with one outside layer
    let pdims: Vec<usize> = dims.iter().map(|&n| if n > 1 { n + 2 } else { n }).collect();
    let offs: Vec<usize> = dims.iter().map(|&n| usize::from(n > 1)).collect();
    let total: usize = pdims.iter().product();
    let mut features = vec![true; total];
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    for (lin, &m) in mask.iter().enumerate() {
        let mut rem = lin;
        for a in (0..rank).rev() {
            idx[a] = rem % dims[a];
            rem /= dims[a];
        }
        let mut p = 0;
        for a in 0..rank {
            p = p * pdims[a] + idx[a] + offs[a];
        }
        features[p] = !m;
    }
    let sq = squared_edt(&features, &pdims, spacing);
    let mut out = vec![0.0; mask.len()];
    for (lin, o) in out.iter_mut().enumerate() {
        let mut rem = lin;
        for a in (0..rank).rev() {
            idx[a] = rem % dims[a];
            rem /= dims[a];
        }
        let mut p = 0;
        for a in 0..rank {
            p = p * pdims[a] + idx[a] + offs[a];
        }
        *o = sq[p].sqrt();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_sq(features: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
        let coords = |lin: usize| {
            let mut rem = lin;
            let mut c = vec![0usize; dims.len()];
            for a in (0..dims.len()).rev() {
                c[a] = rem % dims[a];
                rem /= dims[a];
            }
            c
        };
        (0..features.len())
            .map(|p| {
                let cp = coords(p);
                features
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f)
                    .map(|(q, _)| {
                        let cq = coords(q);
                        cp.iter().zip(&cq).zip(spacing).map(|((&a, &b), &s)| ((a as f64 - b as f64) * s).powi(2)).sum()
                    })
                    .fold(FAR, f64::min)
            })
            .collect()
    }

    #[test]
    fn single_feature_line() {
        let f = [false, false, true, false];
        assert_eq!(squared_edt(&f, &[4], &[1.0]), vec![4.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn no_features_stays_far() {
        assert!(squared_edt(&[false; 6], &[2, 3], &[1.0, 1.0]).iter().all(|&v| v >= FAR));
    }

    #[test]
    fn square_inscribed_distance() {
        // 40x40 square at 1 mm inside a 60x60 grid
        let dims = [60, 60];
        let mask: Vec<bool> = (0..3600).map(|i| (10..50).contains(&(i / 60)) && (10..50).contains(&(i % 60))).collect();
        let d = distance_to_boundary(&mask, &dims, &[1.0, 1.0]);
        let max = d.iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 20.0);
        assert_eq!(d[10 * 60 + 10], 1.0);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn grid_border_counts_as_outside() {
        let d = distance_to_boundary(&[true; 5], &[1, 5], &[2.0, 0.5]);
        assert_eq!(d, vec![0.5, 1.0, 1.5, 1.0, 0.5]);
    }

    proptest! {
        #[test]
        fn matches_brute_force_2d(
            bits in proptest::collection::vec(proptest::bool::weighted(0.2), 7 * 9),
            sy in 0.5f64..2.0, sx in 0.5f64..2.0,
        ) {
            let dims = [7, 9];
            let got = squared_edt(&bits, &dims, &[sy, sx]);
            let want = brute_sq(&bits, &dims, &[sy, sx]);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }

        #[test]
        fn matches_brute_force_3d(
            bits in proptest::collection::vec(proptest::bool::weighted(0.1), 4 * 5 * 6),
        ) {
            let dims = [4, 5, 6];
            let sp = [2.5, 0.8, 1.0];
            let got = squared_edt(&bits, &dims, &sp);
            let want = brute_sq(&bits, &dims, &sp);
            for (a, b) in got.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-9 * b.max(1.0));
            }
        }
    }
}
