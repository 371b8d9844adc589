//! Up-looking sparse Cholesky factorization.
//!
//! The row pattern of `L` is found by walking the elimination tree from each
//! nonzero of the lower triangle of `A` (the `ereach` traversal), so the
//! numeric work touches only structural nonzeros of the factor.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

const NONE: usize = usize::MAX;

/// Lower-triangular factor `L` with `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    /// `perm[new] = old`; `None` means natural ordering.
    perm: Option<Vec<usize>>,
    /// CSC storage of `L`; the diagonal entry comes first in every column.
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Factorizes a symmetric positive definite matrix in natural ordering.
///
/// Only the lower triangle of `a` is read.
pub fn sparse_cholesky(a: &SparseMatrix) -> Result<CholeskyFactor> {
    factorize(a, None)
}

/// Factorizes `P A P^T` where `perm[new] = old`.
pub fn sparse_cholesky_permuted(a: &SparseMatrix, perm: Vec<usize>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if perm.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: perm.len() });
    }
    let mut inv = vec![NONE; n];
    for (new, &old) in perm.iter().enumerate() {
        if old >= n || inv[old] != NONE {
            return Err(Error::InvalidParams("permutation is not a bijection".into()));
        }
        inv[old] = new;
    }
    let t: Vec<_> = a.triplets().map(|(i, j, v)| (inv[i], inv[j], v)).collect();
    let permuted = SparseMatrix::from_triplets(n, n, &t);
    factorize(&permuted, Some(perm))
}

fn factorize(a: &SparseMatrix, perm: Option<Vec<usize>>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch { expected: n, got: a.ncols() });
    }

    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        let (cols, _) = a.row(k);
        for &start in cols {
            if start >= k {
                break;
            }
            let mut i = start;
            while i != NONE && i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == NONE {
                    parent[i] = k;
                }
                i = next;
            }
        }
    }

    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut x = vec![0.0; n];
    let mut flag = vec![NONE; n];
    let mut stack = vec![0usize; n];
    let mut path = vec![0usize; n];

    for k in 0..n {
        let mut top = n;
        flag[k] = k;
        let (cols, vals) = a.row(k);
        for (&start, &v) in cols.iter().zip(vals) {
            if start > k {
                break;
            }
            x[start] += v;
            if start == k {
                continue;
            }
            let mut len = 0;
            let mut i = start;
            while flag[i] != k {
                path[len] = i;
                len += 1;
                flag[i] = k;
                i = parent[i];
            }
            while len > 0 {
                len -= 1;
                top -= 1;
                stack[top] = path[len];
            }
        }

        let mut d = x[k];
        x[k] = 0.0;
        for &i in &stack[top..n] {
            let col = &columns[i];
            let lki = x[i] / col[0].1;
            x[i] = 0.0;
            for &(r, v) in &col[1..] {
                x[r] -= v * lki;
            }
            d -= lki * lki;
            columns[i].push((k, lki));
        }
        if !(d > 0.0 && d.is_finite()) {
            let row = perm.as_ref().map_or(k, |p| p[k]);
            return Err(Error::NotPositiveDefinite(row));
        }
        columns[k].push((k, d.sqrt()));
    }

    let nnz = columns.iter().map(Vec::len).sum();
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    col_ptr.push(0);
    for col in columns {
        for (r, v) in col {
            row_idx.push(r);
            values.push(v);
        }
        col_ptr.push(row_idx.len());
    }
    Ok(CholeskyFactor { n, perm, col_ptr, row_idx, values })
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn permutation(&self) -> Option<&[usize]> {
        self.perm.as_deref()
    }

    #[inline]
    fn column(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        (&self.row_idx[a..b], &self.values[a..b])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.values[self.col_ptr[j]]).collect()
    }

    /// `log |A| = 2 sum_j log L(j, j)`
    pub fn log_det(&self) -> f64 {
        2.0 * self.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// The factor `L` as a CSR matrix (in the permuted ordering).
    pub fn lower(&self) -> SparseMatrix {
        let mut t = Vec::with_capacity(self.nnz());
        for j in 0..self.n {
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                t.push((i, j, v));
            }
        }
        SparseMatrix::from_triplets(self.n, self.n, &t)
    }

    /// Solves `L y = b` in place (permuted ordering).
    pub fn solve_lower_in_place(&self, y: &mut [f64]) {
        for j in 0..self.n {
            let (rows, vals) = self.column(j);
            y[j] /= vals[0];
            let yj = y[j];
            if yj != 0.0 {
                for (&r, &v) in rows[1..].iter().zip(&vals[1..]) {
                    y[r] -= v * yj;
                }
            }
        }
    }

    /// Solves `L^T x = y` in place (permuted ordering).
    pub fn solve_upper_in_place(&self, x: &mut [f64]) {
        for j in (0..self.n).rev() {
            let (rows, vals) = self.column(j);
            let mut s = x[j];
            for (&r, &v) in rows[1..].iter().zip(&vals[1..]) {
                s -= v * x[r];
            }
            x[j] = s / vals[0];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::ShapeMismatch { expected: self.n, got: b.len() });
        }
        let mut z: Vec<f64> = match &self.perm {
            Some(p) => p.iter().map(|&old| b[old]).collect(),
            None => b.to_vec(),
        };
        self.solve_lower_in_place(&mut z);
        self.solve_upper_in_place(&mut z);
        Ok(match &self.perm {
            Some(p) => {
                let mut x = vec![0.0; self.n];
                for (new, &old) in p.iter().enumerate() {
                    x[old] = z[new];
                }
                x
            }
            None => z,
        })
    }

    /// `L^T M` for a dense `M`, in the permuted ordering.
    pub(crate) fn lower_transpose_mul_dense(&self, m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
        let mut out = nalgebra::DMatrix::zeros(self.n, m.ncols());
        for i in 0..self.n {
            let (rows, vals) = self.column(i);
            for (&k, &v) in rows.iter().zip(vals) {
                for c in 0..m.ncols() {
                    out[(i, c)] += v * m[(k, c)];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    fn reconstruct(f: &CholeskyFactor) -> DMatrix<f64> {
        let l = f.lower().to_dense();
        &l * l.transpose()
    }

    #[test]
    fn identity_factor() {
        let f = sparse_cholesky(&SparseMatrix::identity(5)).unwrap();
        assert_eq!(f.lower().to_dense(), DMatrix::identity(5, 5));
    }

    #[test]
    fn two_by_two_by_hand() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 3.0)]);
        let f = sparse_cholesky(&a).unwrap();
        let l = f.lower().to_dense();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        // [[4,2],[2,3]] x = (2,1): x = (1/2, 0)
        let x = f.solve(&[2.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
        let x = f.solve(&[1.0, 1.0]).unwrap();
        assert!((x[0] - 0.125).abs() < 1e-15 && (x[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn random_dense_spd_reconstruction() {
        let a = random_spd(50, 3);
        let sa = SparseMatrix::from_dense(&a);
        let f = sparse_cholesky(&sa).unwrap();
        let err = (reconstruct(&f) - &a).abs().max();
        assert!(err <= 1e-10 * a.abs().max(), "reconstruction error {err}");
        assert!(f.diagonal().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn sparse_pattern_and_permutation() {
        // 2D 5-point Laplacian plus identity on a 6x5 grid
        let (nx, ny) = (6, 5);
        let n = nx * ny;
        let mut t = Vec::new();
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                t.push((i, i, 5.0));
                if x + 1 < nx {
                    t.push((i, i + 1, -1.0));
                    t.push((i + 1, i, -1.0));
                }
                if y + 1 < ny {
                    t.push((i, i + nx, -1.0));
                    t.push((i + nx, i, -1.0));
                }
            }
        }
        let a = SparseMatrix::from_triplets(n, n, &t);
        let f = sparse_cholesky(&a).unwrap();
        assert!((reconstruct(&f) - a.to_dense()).abs().max() < 1e-12);

        let perm: Vec<usize> = (0..n).rev().collect();
        let fp = sparse_cholesky_permuted(&a, perm.clone()).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let x1 = f.solve(&b).unwrap();
        let x2 = fp.solve(&b).unwrap();
        for i in 0..n {
            assert!((x1[i] - x2[i]).abs() < 1e-12);
        }
        let r = a.mul_vec(&x1);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
        assert!((f.log_det() - fp.log_det()).abs() < 1e-10);
    }

    #[test]
    fn not_positive_definite() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)]);
        assert!(matches!(sparse_cholesky(&a), Err(Error::NotPositiveDefinite(1))));
        let z = SparseMatrix::from_triplets(2, 2, &[(1, 1, 1.0)]);
        assert!(matches!(sparse_cholesky(&z), Err(Error::NotPositiveDefinite(0))));
    }

    #[test]
    fn solve_dimension_mismatch() {
        let f = sparse_cholesky(&SparseMatrix::identity(3)).unwrap();
        assert!(matches!(f.solve(&[1.0, 2.0]), Err(Error::ShapeMismatch { .. })));
        assert_eq!(f.solve(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn random_spd_solve_residual() {
        let a = random_spd(30, 11);
        let f = sparse_cholesky(&SparseMatrix::from_dense(&a)).unwrap();
        let b: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let x = f.solve(&b).unwrap();
        let r = &a * nalgebra::DVector::from_row_slice(&x) - nalgebra::DVector::from_row_slice(&b);
        assert!(r.norm() / nalgebra::DVector::from_row_slice(&b).norm() < 1e-9);
    }
}
