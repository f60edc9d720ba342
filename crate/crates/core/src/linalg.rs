//! Small dense solvers for the local weighted least-squares fits and the
//! kernel ridge black-box. Matrices are row-major `Vec<f64>`.

use crate::error::{MapleError, Result};

/// Relative pivot tolerance below which a system is reported as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Weighted normal equations `ZᵀWZ` and `ZᵀWy` over the columns `cols` of the
/// rows listed in `support` (pairs of row index and weight).
///
/// Each entry is accumulated independently in support order, so the system
/// for a subset of columns is bit-identical to the corresponding sub-block of
/// the system for a superset.
pub fn weighted_normal_equations(
    x: &[Vec<f64>],
    y: &[f64],
    support: &[(usize, f64)],
    cols: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let m = cols.len();
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for &(i, w) in support {
        let row = &x[i];
        for (a, &ca) in cols.iter().enumerate() {
            let wa = w * row[ca];
            rhs[a] += wa * y[i];
            for (b, &cb) in cols.iter().enumerate().take(a + 1) {
                gram[a * m + b] += wa * row[cb];
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            gram[b * m + a] = gram[a * m + b];
        }
    }
    (gram, rhs)
}

/// Extracts the principal sub-block of a square row-major matrix.
pub fn sub_block(matrix: &[f64], dim: usize, keep: &[usize]) -> Vec<f64> {
    let m = keep.len();
    let mut out = vec![0.0; m * m];
    for (a, &ka) in keep.iter().enumerate() {
        for (b, &kb) in keep.iter().enumerate() {
            out[a * m + b] = matrix[ka * dim + kb];
        }
    }
    out
}

/// Solves `(G + ridge·P) β = r` where `P` is diagonal with ones on the
/// penalized positions. `G` must be symmetric positive semi-definite.
pub fn solve_ridge(gram: &[f64], rhs: &[f64], ridge: f64, penalized: &[bool]) -> Result<Vec<f64>> {
    let m = rhs.len();
    let mut a = gram.to_vec();
    for (j, &pen) in penalized.iter().enumerate() {
        if pen {
            a[j * m + j] += ridge;
        }
    }
    cholesky_solve(a, rhs.to_vec(), m)
}

/// In-place Cholesky factorization followed by forward and back substitution.
pub fn cholesky_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = if scale > 0.0 { scale * PIVOT_TOLERANCE } else { f64::MIN_POSITIVE };
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > tol) {
            return Err(MapleError::Singular);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        // [[4,2],[2,3]] x = [2,1] -> x = [0.5, 0]
        let x = cholesky_solve(vec![4.0, 2.0, 2.0, 3.0], vec![2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15);
        assert!(x[1].abs() < 1e-15);
    }

    #[test]
    fn rank_one_is_singular_without_ridge() {
        let x = vec![vec![1.0, 2.0]];
        let (g, r) = weighted_normal_equations(&x, &[3.0], &[(0, 1.0)], &[0, 1]);
        assert!(matches!(
            solve_ridge(&g, &r, 0.0, &[false, true]),
            Err(MapleError::Singular)
        ));
        let beta = solve_ridge(&g, &r, 1e-6, &[false, true]).unwrap();
        assert!((dot(&beta, &x[0]) - 3.0).abs() < 1e-5);
    }

    #[test]
    fn sub_block_matches_direct_assembly() {
        let x = vec![vec![1.0, 0.3, -1.2], vec![1.0, 2.0, 0.7], vec![1.0, -0.4, 0.1]];
        let y = [0.5, -1.0, 2.0];
        let support = [(0, 0.2), (1, 0.5), (2, 0.3)];
        let (full, _) = weighted_normal_equations(&x, &y, &support, &[0, 1, 2]);
        let (direct, _) = weighted_normal_equations(&x, &y, &support, &[0, 2]);
        assert_eq!(sub_block(&full, 3, &[0, 2]), direct);
    }
}
