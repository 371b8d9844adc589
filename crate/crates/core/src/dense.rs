//! Dense covariance-form reference computations.
//!
//! Everything here is `O(n^2)` memory and `O(n^3)` time in the trajectory
//! dimension and refuses problems above [`DENSE_LIMIT`]. Transition matrices
//! are inverted with a dense LU, independently of the sparse factorizations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::Trajectory;
use crate::operator::ParamFields;
use crate::precision::ObservationSet;
use crate::state_space::{InitialState, TransitionStep};

pub const DENSE_LIMIT: usize = 5000;

fn guard(n: usize) -> Result<()> {
    if n > DENSE_LIMIT {
        return Err(Error::DimensionGuard { dim: n, limit: DENSE_LIMIT });
    }
    Ok(())
}

fn dense_transition(theta: &ParamFields, t: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let step = TransitionStep::build(theta, t)?;
    let m = step.a_solve().to_dense().lu().try_inverse().ok_or(Error::SingularTransition(t))?;
    let var = step.noise_std().iter().map(|s| s * s).collect();
    Ok((m, var))
}

/// Covariance of `x_0`.
pub fn initial_covariance(theta: &ParamFields, initial: InitialState) -> Result<DMatrix<f64>> {
    let m = theta.grid().state_dim();
    guard(m)?;
    match initial {
        InitialState::White { sigma0 } => Ok(DMatrix::identity(m, m) * (sigma0 * sigma0)),
        InitialState::Stationary { burn_in, sigma0 } => {
            let (m0, var) = dense_transition(theta, 0)?;
            let mut p = DMatrix::identity(m, m) * (sigma0 * sigma0);
            for _ in 0..burn_in {
                p += DMatrix::from_diagonal(&DVector::from_vec(var.clone()));
                p = &m0 * p * m0.transpose();
            }
            Ok(p)
        }
    }
}

/// Full trajectory covariance of the recursion, block by block:
/// `P_{t,t} = M_t (P_{t-1,t-1} + V_t) M_t^T` and `P_{t,s} = M_t P_{t-1,s}`.
pub fn trajectory_covariance(theta: &ParamFields, initial: InitialState) -> Result<DMatrix<f64>> {
    let g = theta.grid();
    let (m, nt) = (g.state_dim(), g.nt);
    guard(g.trajectory_dim())?;
    let mut p = DMatrix::zeros(nt * m, nt * m);
    p.view_mut((0, 0), (m, m)).copy_from(&initial_covariance(theta, initial)?);
    for t in 1..nt {
        let (mt, var) = dense_transition(theta, t)?;
        for s in 0..t {
            let prev = p.view(((t - 1) * m, s * m), (m, m)).into_owned();
            let block = &mt * prev;
            p.view_mut((s * m, t * m), (m, m)).copy_from(&block.transpose());
            p.view_mut((t * m, s * m), (m, m)).copy_from(&block);
        }
        let mut prev = p.view(((t - 1) * m, (t - 1) * m), (m, m)).into_owned();
        for i in 0..m {
            prev[(i, i)] += var[i];
        }
        let diag = &mt * prev * mt.transpose();
        p.view_mut((t * m, t * m), (m, m)).copy_from(&diag);
    }
    Ok(p)
}

/// Posterior mean `P H^T (H P H^T + R)^{-1} y` with zero prior mean.
pub fn oi_solve_dense_oracle(theta: &ParamFields, initial: InitialState, obs: &ObservationSet) -> Result<Trajectory> {
    let p = trajectory_covariance(theta, initial)?;
    oi_dense_from_covariance(&p, obs)
}

pub fn oi_dense_from_covariance(p: &DMatrix<f64>, obs: &ObservationSet) -> Result<Trajectory> {
    let grid = *obs.grid();
    let n = grid.trajectory_dim();
    if p.nrows() != n {
        return Err(Error::ShapeMismatch { expected: n, got: p.nrows() });
    }
    let idx = obs.indices();
    if idx.is_empty() {
        return Ok(Trajectory::zeros(grid));
    }
    let k = idx.len();
    let s = DMatrix::from_fn(k, k, |a, b| p[(idx[a], idx[b])] + if a == b { obs.noise_var()[a] } else { 0.0 });
    let w = s.cholesky().ok_or(Error::NotPositiveDefinite(0))?.solve(&DVector::from_column_slice(obs.values()));
    let x: Vec<f64> = (0..n).map(|i| idx.iter().zip(w.iter()).map(|(&j, wj)| p[(i, j)] * wj).sum()).collect();
    Trajectory::from_vec(grid, x)
}

/// Posterior covariance `P - P H^T (H P H^T + R)^{-1} H P`.
pub fn posterior_covariance(p: &DMatrix<f64>, obs: &ObservationSet) -> Result<DMatrix<f64>> {
    let idx = obs.indices();
    if idx.is_empty() {
        return Ok(p.clone());
    }
    let n = p.nrows();
    let k = idx.len();
    let s = DMatrix::from_fn(k, k, |a, b| p[(idx[a], idx[b])] + if a == b { obs.noise_var()[a] } else { 0.0 });
    let ph = DMatrix::from_fn(n, k, |i, a| p[(i, idx[a])]);
    let sol = s.cholesky().ok_or(Error::NotPositiveDefinite(0))?.solve(&ph.transpose());
    Ok(p - &ph * sol)
}

/// `1/2 x^T P^{-1} x + 1/2 log|P| + n/2 log(2 pi)`.
pub fn gaussian_nll(p: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let n = p.nrows();
    let chol = p.clone().cholesky().ok_or(Error::NotPositiveDefinite(0))?;
    let xv = DVector::from_column_slice(x);
    let sol = chol.solve(&xv);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * xv.dot(&sol) + 0.5 * log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}
