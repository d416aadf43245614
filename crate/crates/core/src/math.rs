//! Small numeric helpers: compensated summation, dense linear algebra on
//! tiny matrices, and a symmetric eigensolver for operator norms.

/// Neumaier-compensated sum. Error stays O(1) ulp independent of length,
/// which keeps probability normalization exact to ~1e-16 even at n = 1e6.
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// a += s * b
pub fn axpy(a: &mut [f64], s: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (x, y) in a.iter_mut().zip(b) {
        *x += s * y;
    }
}

pub fn scale(a: &mut [f64], s: f64) {
    for x in a.iter_mut() {
        *x *= s;
    }
}

/// Largest eigenvalue of a symmetric matrix via cyclic Jacobi rotations.
/// Intended for tiny matrices (operator norms of per-sample Jacobians).
pub fn symmetric_max_eigenvalue(mat: &[Vec<f64>]) -> f64 {
    let n = mat.len();
    if n == 0 {
        return 0.0;
    }
    debug_assert!(mat.iter().all(|row| row.len() == n));
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

/// Operator (spectral) norm of a rectangular matrix given as rows.
pub fn operator_norm(rows: &[Vec<f64>]) -> f64 {
    let m = rows.len();
    if m == 0 {
        return 0.0;
    }
    // Gram matrix J J^T is m x m; rows are typically few (output dims).
    let mut gram = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let v = dot(&rows[i], &rows[j]);
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    symmetric_max_eigenvalue(&gram).max(0.0).sqrt()
}

/// Solve A x = b for a small symmetric positive-definite system by Gaussian
/// elimination with partial pivoting. Panics on a singular system.
pub fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    assert!(a.iter().all(|row| row.len() == n) && b.len() == n);
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        assert!(m[pivot][col].abs() > 1e-12, "singular system");
        m.swap(col, pivot);
        for row in (col + 1)..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = m[col][n];
        for k in (col + 1)..n {
            v -= m[col][k] * x[k];
        }
        x[col] = v / m[col][col];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kahan_handles_many_small_terms() {
        let n = 1_000_000;
        let xs = vec![0.1; n];
        let s = kahan_sum(xs.iter().copied());
        assert_relative_eq!(s, 100_000.0, epsilon = 1e-9);
        // Alternating large/small magnitudes that defeat naive summation.
        let mut ys = Vec::with_capacity(2 * n);
        for _ in 0..n {
            ys.push(1e16);
            ys.push(1.0);
        }
        ys.push(-1e16 * n as f64);
        assert_eq!(kahan_sum(ys.iter().copied()), n as f64);
    }

    #[test]
    fn jacobi_matches_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let a = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        assert_relative_eq!(symmetric_max_eigenvalue(&a), 3.0, epsilon = 1e-12);
        // Diagonal matrix.
        let d = vec![vec![5.0, 0.0], vec![0.0, -7.0]];
        assert_relative_eq!(symmetric_max_eigenvalue(&d), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn operator_norm_of_diagonal_rows() {
        // Rows of diag(3, 4): spectral norm 4.
        let rows = vec![vec![3.0, 0.0], vec![0.0, 4.0]];
        assert_relative_eq!(operator_norm(&rows), 4.0, epsilon = 1e-12);
        // Rank-one matrix [1 2; 2 4] has norm 5.
        let r1 = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert_relative_eq!(operator_norm(&r1), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_linear_small_system() {
        let a = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let b = vec![1.0, 2.0];
        let x = solve_linear(&a, &b);
        assert_relative_eq!(4.0 * x[0] + x[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[0] + 3.0 * x[1], 2.0, epsilon = 1e-12);
    }
}
