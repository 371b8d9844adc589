//! Reverse-mode derivative of the Cholesky factorization.
//!
//! For `A = L L^T` and an upstream gradient `L_bar` with respect to the lower
//! triangle of `L`, the symmetric input gradient is
//!
//! ```text
//! A_bar = 1/2 L^{-T} ltu(L^T L_bar) L^{-1}
//! ```
//!
//! where `ltu` copies the lower triangle onto the upper one. `A_bar` is the
//! gradient over symmetric perturbations: `df = <A_bar, dA>` for any
//! symmetric `dA`.

use nalgebra::DMatrix;

use super::cholesky::CholeskyFactor;
use crate::error::{Error, Result};

/// Copies the lower triangle (diagonal included) onto the upper triangle.
pub fn ltu(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| if i >= j { m[(i, j)] } else { m[(j, i)] })
}

/// Backward pass through a sparse factor. `l_bar` is dense and indexed in the
/// factor's (possibly permuted) ordering; the result is in the original
/// ordering of `A`.
pub fn cholesky_backward(factor: &CholeskyFactor, l_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = factor.dim();
    if l_bar.nrows() != n || l_bar.ncols() != n {
        return Err(Error::ShapeMismatch { expected: n * n, got: l_bar.nrows() * l_bar.ncols() });
    }
    let lower_bar = DMatrix::from_fn(n, n, |i, j| if i >= j { l_bar[(i, j)] } else { 0.0 });
    let mut s = ltu(&factor.lower_transpose_mul_dense(&lower_bar));

    // s <- L^{-T} s
    for c in 0..n {
        let mut col: Vec<f64> = s.column(c).iter().copied().collect();
        factor.solve_upper_in_place(&mut col);
        s.column_mut(c).copy_from_slice(&col);
    }
    // s <- s L^{-1} = (L^{-T} s^T)^T
    let mut st = s.transpose();
    for c in 0..n {
        let mut col: Vec<f64> = st.column(c).iter().copied().collect();
        factor.solve_upper_in_place(&mut col);
        st.column_mut(c).copy_from_slice(&col);
    }
    let grad = st.transpose() * 0.5;
    let grad = symmetrize(grad);

    Ok(match factor.permutation() {
        None => grad,
        Some(p) => {
            let mut out = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    out[(p[i], p[j])] = grad[(i, j)];
                }
            }
            out
        }
    })
}

/// Dense counterpart taking `L` explicitly.
pub fn cholesky_backward_dense(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    if l.ncols() != n || l_bar.shape() != (n, n) {
        return Err(Error::ShapeMismatch { expected: n * n, got: l_bar.nrows() * l_bar.ncols() });
    }
    let lower_bar = DMatrix::from_fn(n, n, |i, j| if i >= j { l_bar[(i, j)] } else { 0.0 });
    let p = ltu(&(l.transpose() * lower_bar));
    let lt = l.transpose();
    let left = lt.solve_upper_triangular(&p).ok_or(Error::NotPositiveDefinite(0))?;
    let right = lt.solve_upper_triangular(&left.transpose()).ok_or(Error::NotPositiveDefinite(0))?.transpose();
    Ok(symmetrize(right * 0.5))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}
