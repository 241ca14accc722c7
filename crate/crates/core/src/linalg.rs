//! Dense solvers for the small systems the pipeline needs: least squares
//! via Householder QR and square solves via partially pivoted LU.

/// Minimizes `||A x - b||` for a row-major `A` of shape
/// `m × n` (`m >= n`). Returns `None` when `A` is rank deficient.
pub fn least_squares(a: &[f64], m: usize, n: usize, b: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m);
    if m < n || n == 0 {
        return None;
    }
    let mut r = a.to_vec();
    let mut rhs = b.to_vec();
    let scale = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = scale.max(f64::MIN_POSITIVE) * 1e-12 * (m as f64).sqrt();
    let mut v = vec![0.0; m];
    for k in 0..n {
        let norm = (k..m).map(|i| r[i * n + k] * r[i * n + k]).sum::<f64>().sqrt();
        if norm <= tol {
            return None;
        }
        let alpha = if r[k * n + k] > 0.0 { -norm } else { norm };
        for i in k..m {
            v[i] = r[i * n + k];
        }
        v[k] -= alpha;
        let vnorm2 = (k..m).map(|i| v[i] * v[i]).sum::<f64>();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..n {
            let dot = (k..m).map(|i| v[i] * r[i * n + j]).sum::<f64>();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                r[i * n + j] -= f * v[i];
            }
        }
        let dot = (k..m).map(|i| v[i] * rhs[i]).sum::<f64>();
        let f = 2.0 * dot / vnorm2;
        for i in k..m {
            rhs[i] -= f * v[i];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s = rhs[k] - ((k + 1)..n).map(|j| r[k * n + j] * x[j]).sum::<f64>();
        x[k] = s / r[k * n + k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Solves the square system `A x = b` (row-major `n × n`).
pub fn solve(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut lu = a.to_vec();
    let mut x = b.to_vec();
    let scale = lu.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = scale.max(f64::MIN_POSITIVE) * 1e-14;
    for k in 0..n {
        let pivot = (k..n)
            .max_by(|&i, &j| lu[i * n + k].abs().total_cmp(&lu[j * n + k].abs()))
            .unwrap_or(k);
        if lu[pivot * n + k].abs() <= tol {
            return None;
        }
        if pivot != k {
            for j in 0..n {
                lu.swap(k * n + j, pivot * n + j);
            }
            x.swap(k, pivot);
        }
        let d = lu[k * n + k];
        for i in (k + 1)..n {
            let f = lu[i * n + k] / d;
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lu[i * n + j] -= f * lu[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s = x[k] - ((k + 1)..n).map(|j| lu[k * n + j] * x[j]).sum::<f64>();
        x[k] = s / lu[k * n + k];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_fit() {
        // rows: [1, x]
        let xs = [0.0, 1.0, 2.0, 3.0];
        let a: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let b: Vec<f64> = xs.iter().map(|&x| 3.0 + 2.0 * x).collect();
        let c = least_squares(&a, 4, 2, &b).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_none() {
        let a = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(least_squares(&a, 3, 2, &[1.0, 2.0, 3.0]).is_none());
        assert!(solve(&[1.0, 2.0, 2.0, 4.0], 2, &[1.0, 1.0]).is_none());
    }

    #[test]
    fn square_solve_with_pivoting() {
        let a = [0.0, 1.0, 1.0, 1.0];
        let x = solve(&a, 2, &[2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
