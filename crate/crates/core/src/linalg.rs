//! Small dense helpers on row-major slices.

use nalgebra::{DMatrix, DVector};

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius(m: &[f64]) -> f64 {
    norm(m)
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `out = a (r×k) · b (k×c)`.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * c + j];
            }
            out[i * c + j] = s;
        }
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn to_matrix(m: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, m)
}

/// Inverse of a square matrix, `None` if singular.
pub fn inverse(m: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 1 {
        return (m[0] != 0.0).then(|| vec![1.0 / m[0]]);
    }
    if n == 2 {
        let det = m[0] * m[3] - m[1] * m[2];
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        return Some(vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]);
    }
    let inv = to_matrix(m, n, n).try_inverse()?;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv[(i, j)];
        }
    }
    Some(out)
}

/// Solves `m x = rhs` for symmetric positive definite `m`.
pub fn solve_spd(m: &[f64], rhs: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 1 {
        return (m[0] > 0.0).then(|| vec![rhs[0] / m[0]]);
    }
    let chol = to_matrix(m, n, n).cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    Some(x.iter().copied().collect())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![m[0]];
    }
    let sym = to_matrix(m, n, n);
    let sym = (&sym + sym.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Singular values, descending.
pub fn singular_values(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut sv: Vec<f64> = to_matrix(m, rows, cols)
        .singular_values()
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_small_matrices() {
        let m = [2.0, 1.0, 1.0, 3.0];
        let inv = inverse(&m, 2).unwrap();
        let mut prod = [0.0; 4];
        matmul(&m, &inv, 2, 2, 2, &mut prod);
        assert!(dist(&prod, &identity(2)) < 1e-14);
        let m3 = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let inv3 = inverse(&m3, 3).unwrap();
        let mut prod3 = [0.0; 9];
        matmul(&m3, &inv3, 3, 3, 3, &mut prod3);
        assert!(dist(&prod3, &identity(3)) < 1e-13);
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn spd_solve_and_eigenvalues() {
        let m = [4.0, 1.0, 1.0, 3.0];
        let x = solve_spd(&m, &[1.0, 2.0], 2).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        let ev = symmetric_eigenvalues(&[2.0, 0.0, 0.0, 5.0], 2);
        assert_eq!(ev, vec![2.0, 5.0]);
        assert!(solve_spd(&[-1.0, 0.0, 0.0, 1.0], &[1.0, 1.0], 2).is_none());
    }
}
