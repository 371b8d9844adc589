//! Optimal interpolation in precision form.
//!
//! The posterior mean minimizes
//!
//! ```text
//! J(x) = (y - H x)^T R^{-1} (y - H x) + lambda x^T Q x
//! ```
//!
//! so it solves `(lambda Q + H^T R^{-1} H) x = H^T R^{-1} y`. Gradients keep
//! the factor 2 of the squared norms: `grad J = 2 (-H^T R^{-1} d + lambda Q x)`.

use crate::error::{Error, Result};
use crate::grid::{dot, Trajectory};
use crate::linalg::cholesky::{sparse_cholesky, CholeskyFactor};
use crate::linalg::pcg::{pcg_solve, IdentityPreconditioner, Jacobi, Preconditioner};
use crate::precision::{BlockPrecision, ObservationSet};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcgPreconditioner {
    None,
    Jacobi,
    BlockDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMethod {
    /// Sparse Cholesky of the full posterior precision.
    Direct,
    Pcg {
        preconditioner: PcgPreconditioner,
        tol: f64,
        max_iter: usize,
    },
}

impl SolveMethod {
    pub fn pcg() -> Self {
        SolveMethod::Pcg { preconditioner: PcgPreconditioner::BlockDiagonal, tol: 1e-8, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone)]
pub struct OiSolution {
    pub x: Trajectory,
    /// PCG iterations; zero for the direct method.
    pub iterations: usize,
    pub relative_residual: f64,
}

enum Backend {
    Direct(CholeskyFactor),
    Pcg { precond: Box<dyn Preconditioner>, tol: f64, max_iter: usize },
}

/// `lambda Q + H^T R^{-1} H` prepared for repeated solves with different
/// observation values on the same mask. Shareable across threads.
pub struct PosteriorSolver {
    post: BlockPrecision,
    obs: ObservationSet,
    backend: Backend,
}

impl PosteriorSolver {
    pub fn new(q: &BlockPrecision, obs: &ObservationSet, lambda: f64, method: SolveMethod) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidParams(format!("prior weight must be positive, got {lambda}")));
        }
        let scaled = if lambda == 1.0 { q.clone() } else { scale_precision(q, lambda)? };
        let post = crate::precision::posterior_precision(&scaled, obs)?;
        let backend = match method {
            SolveMethod::Direct => Backend::Direct(sparse_cholesky(&post.to_full())?),
            SolveMethod::Pcg { preconditioner, tol, max_iter } => {
                let precond: Box<dyn Preconditioner> = match preconditioner {
                    PcgPreconditioner::None => Box::new(IdentityPreconditioner),
                    PcgPreconditioner::Jacobi => Box::new(Jacobi::new(&post.diagonal())?),
                    PcgPreconditioner::BlockDiagonal => Box::new(post.block_preconditioner()?),
                };
                Backend::Pcg { precond, tol, max_iter }
            }
        };
        Ok(Self { post, obs: obs.clone(), backend })
    }

    pub fn posterior(&self) -> &BlockPrecision {
        &self.post
    }

    /// Posterior mean for observation values `values` on the stored mask.
    pub fn solve_values(&self, values: &[f64]) -> Result<OiSolution> {
        if values.len() != self.obs.len() {
            return Err(Error::ShapeMismatch { expected: self.obs.len(), got: values.len() });
        }
        let rhs = self.obs.scatter_weighted(values);
        self.solve_rhs(&rhs)
    }

    pub fn solve_rhs(&self, rhs: &[f64]) -> Result<OiSolution> {
        let grid = *self.post.grid();
        let (x, iterations) = match &self.backend {
            Backend::Direct(f) => (f.solve(rhs)?, 0),
            Backend::Pcg { precond, tol, max_iter } => {
                let out = pcg_solve(|v| self.post.mul_vec(v), rhs, precond.as_ref(), *tol, *max_iter)?;
                (out.x, out.iterations)
            }
        };
        let relative_residual = relative_residual(&self.post, &x, rhs);
        Ok(OiSolution { x: Trajectory::from_vec(grid, x)?, iterations, relative_residual })
    }

    pub fn solve(&self) -> Result<OiSolution> {
        self.solve_values(self.obs.values())
    }
}

fn relative_residual(a: &BlockPrecision, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let bn = dot(b, b).sqrt();
    if bn == 0.0 {
        r
    } else {
        r / bn
    }
}

fn scale_precision(q: &BlockPrecision, s: f64) -> Result<BlockPrecision> {
    let scale = |v: &[SparseMatrix]| v.iter().map(|b| b.scale(s)).collect::<Vec<_>>();
    BlockPrecision::from_blocks(*q.grid(), scale(q.diag_blocks()), scale(q.upper_blocks()))
}

/// Posterior mean `(Q + H^T R^{-1} H)^{-1} H^T R^{-1} y`.
pub fn oi_solve_precision(q: &BlockPrecision, obs: &ObservationSet, method: SolveMethod) -> Result<Trajectory> {
    Ok(oi_solve_detailed(q, obs, 1.0, method)?.x)
}

pub fn oi_solve_detailed(
    q: &BlockPrecision,
    obs: &ObservationSet,
    lambda: f64,
    method: SolveMethod,
) -> Result<OiSolution> {
    PosteriorSolver::new(q, obs, lambda, method)?.solve()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostTerms {
    pub data: f64,
    pub prior: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.data + self.prior
    }
}

fn check(x: &Trajectory, obs: &ObservationSet, q: &BlockPrecision) -> Result<()> {
    x.check_grid(q.grid())?;
    x.check_grid(obs.grid())
}

pub fn variational_cost(x: &Trajectory, obs: &ObservationSet, q: &BlockPrecision, lambda: f64) -> Result<CostTerms> {
    check(x, obs, q)?;
    let hx = obs.observe(x.as_slice());
    let data = hx.iter().zip(obs.values()).zip(obs.noise_var()).map(|((h, y), r)| (y - h) * (y - h) / r).sum();
    let prior = lambda * dot(x.as_slice(), &q.mul_vec(x.as_slice()));
    Ok(CostTerms { data, prior })
}

pub fn variational_grad(x: &Trajectory, obs: &ObservationSet, q: &BlockPrecision, lambda: f64) -> Result<Trajectory> {
    check(x, obs, q)?;
    let hx = obs.observe(x.as_slice());
    let d: Vec<f64> = obs.values().iter().zip(&hx).map(|(y, h)| y - h).collect();
    let data = obs.scatter_weighted(&d);
    let qx = q.mul_vec(x.as_slice());
    let g = qx.iter().zip(&data).map(|(qx, hd)| 2.0 * (lambda * qx - hd)).collect();
    Trajectory::from_vec(*x.grid(), g)
}
