use crate::error::{Error, Result};
use crate::grid::dot;
use crate::linalg::cholesky::{sparse_cholesky, CholeskyFactor};
use crate::sparse::SparseMatrix;

/// Action of `M^{-1}` for a symmetric positive definite preconditioner `M`.
pub trait Preconditioner: Send + Sync {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

pub struct Jacobi {
    inv_diag: Vec<f64>,
}

impl Jacobi {
    pub fn new(diag: &[f64]) -> Result<Self> {
        if let Some(i) = diag.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::NotPositiveDefinite(i));
        }
        Ok(Self { inv_diag: diag.iter().map(|d| 1.0 / d).collect() })
    }
}

impl Preconditioner for Jacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((z, r), d) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *z = r * d;
        }
    }
}

/// Independent Cholesky solves on contiguous diagonal blocks.
pub struct BlockJacobi {
    blocks: Vec<CholeskyFactor>,
}

impl BlockJacobi {
    pub fn new(blocks: &[SparseMatrix]) -> Result<Self> {
        let mut offset = 0;
        let mut factors = Vec::with_capacity(blocks.len());
        for b in blocks {
            let f = sparse_cholesky(b).map_err(|e| match e {
                Error::NotPositiveDefinite(r) => Error::NotPositiveDefinite(offset + r),
                other => other,
            })?;
            offset += b.nrows();
            factors.push(f);
        }
        Ok(Self { blocks: factors })
    }
}

impl Preconditioner for BlockJacobi {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        let mut offset = 0;
        for f in &self.blocks {
            let n = f.dim();
            let zs = &mut z[offset..offset + n];
            zs.copy_from_slice(&r[offset..offset + n]);
            f.solve_lower_in_place(zs);
            f.solve_upper_in_place(zs);
            offset += n;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients from a zero start. Stops once
/// `|b - A x| <= tol |b|`.
pub fn pcg_solve<A, P>(apply_a: A, b: &[f64], precond: &P, tol: f64, max_iter: usize) -> Result<PcgOutcome>
where
    A: Fn(&[f64]) -> Vec<f64>,
    P: Preconditioner + ?Sized,
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(PcgOutcome { x, iterations: 0, relative_residual: 0.0 });
    }
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        let ap = apply_a(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite(0));
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= tol {
            return Ok(PcgOutcome { x, iterations: it, relative_residual: rel });
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::MaxIterations { iterations: max_iter, residual: rel })
}
