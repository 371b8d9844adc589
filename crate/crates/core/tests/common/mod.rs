#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spde_gmrf::operator::{assemble_fdm_operator, ParamFields, ParamKind};
use spde_gmrf::precision::ObservationSet;
use spde_gmrf::state_space::InitialState;
use spde_gmrf::{SpaceTimeGrid, Trajectory};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Non-stationary parameters with every field drawn cellwise from a valid box.
pub fn random_theta(rng: &mut ChaCha8Rng, grid: SpaceTimeGrid, alpha: u32) -> ParamFields {
    let n = grid.trajectory_dim();
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let fields = [
        draw(0.3, 1.5),
        draw(-0.5, 0.5),
        draw(-0.5, 0.5),
        draw(0.5, 1.5),
        draw(-0.3, 0.3),
        draw(0.5, 1.5),
        draw(0.5, 2.0),
    ];
    ParamFields::from_fields(grid, fields, alpha).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng) -> SpaceTimeGrid {
    let nx = rng.random_range(3..=6);
    let ny = rng.random_range(3..=6);
    let nt = rng.random_range(2..=5);
    let dt = [0.5, 1.0][rng.random_range(0..2)];
    SpaceTimeGrid::new(nx, ny, nt, 1.0, 1.0, dt).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, grid: &SpaceTimeGrid, density: f64) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..grid.trajectory_dim()).map(|_| rng.random::<f64>() < density).collect();
    mask[0] = true;
    mask
}

pub fn random_obs(rng: &mut ChaCha8Rng, grid: &SpaceTimeGrid) -> ObservationSet {
    let mask = random_mask(rng, grid, 0.3);
    let n = mask.iter().filter(|&&b| b).count();
    let values = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let noise = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
    ObservationSet::new(*grid, mask, values, noise).unwrap()
}

/// `M_t = (I + dt L_t^{alpha/2})^{-1}` and the noise variances `(dt tau)^2`,
/// built from the operator matrix with dense algebra only.
pub fn dense_step(theta: &ParamFields, t: usize) -> (DMatrix<f64>, Vec<f64>) {
    let g = theta.grid();
    let m = g.state_dim();
    let l = assemble_fdm_operator(theta, t).unwrap().to_dense();
    let mut lk = DMatrix::identity(m, m);
    for _ in 0..theta.alpha / 2 {
        lk = &lk * &l;
    }
    let a = DMatrix::identity(m, m) + lk * g.dt;
    let inv = a.lu().try_inverse().expect("invertible transition");
    let tau = theta.get(ParamKind::Tau);
    let var = (0..m).map(|c| (g.dt * tau[t * m + c]).powi(2)).collect();
    (inv, var)
}

/// Covariance of the whole trajectory, propagated block by block from
/// `x_t = M_t (x_{t-1} + e_t)`.
pub fn dense_covariance(theta: &ParamFields, initial: InitialState) -> DMatrix<f64> {
    let g = theta.grid();
    let (m, nt) = (g.state_dim(), g.nt);
    let p0 = match initial {
        InitialState::White { sigma0 } => DMatrix::identity(m, m) * sigma0 * sigma0,
        InitialState::Stationary { burn_in, sigma0 } => {
            let (m0, var) = dense_step(theta, 0);
            let mut p = DMatrix::identity(m, m) * sigma0 * sigma0;
            for _ in 0..burn_in {
                p = &m0 * (p + DMatrix::from_diagonal(&DVector::from_vec(var.clone()))) * m0.transpose();
            }
            p
        }
    };
    // x = T e with e = (x_0, e_1, ..., e_{nt-1}) independent blocks
    let n = nt * m;
    let mut t_mat = DMatrix::zeros(n, n);
    let mut d = DMatrix::zeros(n, n);
    d.view_mut((0, 0), (m, m)).copy_from(&p0);
    t_mat.view_mut((0, 0), (m, m)).copy_from(&DMatrix::identity(m, m));
    for t in 1..nt {
        let (mt, var) = dense_step(theta, t);
        for i in 0..m {
            d[(t * m + i, t * m + i)] = var[i];
        }
        for s in 0..t {
            let prev = t_mat.view(((t - 1) * m, s * m), (m, m)).into_owned();
            t_mat.view_mut((t * m, s * m), (m, m)).copy_from(&(&mt * prev));
        }
        t_mat.view_mut((t * m, t * m), (m, m)).copy_from(&mt);
    }
    &t_mat * d * t_mat.transpose()
}

/// Kalman-gain form `x = P H^T (H P H^T + R)^{-1} y`.
pub fn dense_kalman(p: &DMatrix<f64>, obs: &ObservationSet) -> Vec<f64> {
    let idx = obs.indices();
    let k = idx.len();
    let s = DMatrix::from_fn(k, k, |a, b| p[(idx[a], idx[b])] + if a == b { obs.noise_var()[a] } else { 0.0 });
    let ph = DMatrix::from_fn(p.nrows(), k, |i, a| p[(i, idx[a])]);
    let gain = &ph * s.lu().try_inverse().unwrap();
    (gain * DVector::from_column_slice(obs.values())).iter().copied().collect()
}

pub fn dense_posterior_cov(p: &DMatrix<f64>, obs: &ObservationSet) -> DMatrix<f64> {
    let idx = obs.indices();
    let k = idx.len();
    let s = DMatrix::from_fn(k, k, |a, b| p[(idx[a], idx[b])] + if a == b { obs.noise_var()[a] } else { 0.0 });
    let ph = DMatrix::from_fn(p.nrows(), k, |i, a| p[(i, idx[a])]);
    p - &ph * s.lu().try_inverse().unwrap() * ph.transpose()
}

pub fn log_det_lu(p: &DMatrix<f64>) -> f64 {
    let lu = p.clone().lu();
    lu.u().diagonal().iter().map(|v| v.abs().ln()).sum()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn mse(a: &Trajectory, b: &Trajectory) -> f64 {
    let n = a.as_slice().len() as f64;
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}
