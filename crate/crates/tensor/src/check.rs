//! Central finite differences for verifying tape gradients.

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` of `f` along coordinate `i`
/// of `x`. `x` is restored before returning.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Outcome of comparing one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `analytic[i]` against central differences at the given coordinates.
pub fn check_coordinates(
    name: &str,
    x: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GroupCheck {
    let mut out = GroupCheck {
        name: name.to_string(),
        checked: 0,
        max_relative_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in coords {
        let numeric = central_difference(x, i, h, &mut f);
        let err = relative_error(analytic[i], numeric, floor);
        out.checked += 1;
        if err >= out.max_relative_error {
            out.max_relative_error = err;
            out.worst_index = i;
            out.worst_analytic = analytic[i];
            out.worst_numeric = numeric;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let mut x = vec![2.0];
        let d = central_difference(&mut x, 0, 1e-3, |v| v[0].powi(3));
        assert!((d - 12.0).abs() < 1e-5);
        assert_eq!(x[0], 2.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1.0, 1.01, 1e-6) - 0.01 / 1.01).abs() < 1e-12);
    }
}
