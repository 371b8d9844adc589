//! Negative log-likelihood of trajectories under the SPDE prior, its
//! parameter gradient, and likelihood-descent fitting.
//!
//! ```text
//! NLL(x) = 1/2 (x^T Q x - log|Q|) + dim/2 log(2 pi)
//! ```
//!
//! The trace-mode gradient differentiates the joint density step by step:
//! with `r_t = A_t x_t - x_{t-1}` the quadratic form is
//! `x_0^T P_0^{-1} x_0 + sum_t r_t^T W_t r_t`, and `log|Q|` splits into
//! `log|P_0^{-1}| + sum_t log|A_t^T W_t A_t|`, whose derivatives come from the
//! Cholesky backward pass. A stationary initial state adds a reverse sweep
//! through the burn-in recursion.

use nalgebra::DMatrix;

use crate::dense::DENSE_LIMIT;
use crate::error::{Error, Result};
use crate::grid::{dot, SpaceTimeGrid, Trajectory};
use crate::linalg::backward::cholesky_backward;
use crate::linalg::cholesky::sparse_cholesky;
use crate::linalg::logdet::log_det_block_with;
use crate::operator::{accumulate_operator_gradient, stencil_entries, ParamFields, ParamKind, StationaryParams};
use crate::optim::{OptimizerState, StepOperator};
use crate::parallel::{try_map_indexed, Execution};
use crate::precision::{block_precision_from_model, noise_weights, BlockPrecision};
use crate::sparse::SparseMatrix;
use crate::state_space::{InitialCovariance, InitialState, PriorModel};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    FiniteDiff,
    Trace,
}

/// Gradient with respect to every entry of the seven parameter fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    grid: SpaceTimeGrid,
    fields: [Vec<f64>; 7],
}

impl ParamGradient {
    pub fn zeros(grid: SpaceTimeGrid) -> Self {
        let n = grid.trajectory_dim();
        Self { grid, fields: std::array::from_fn(|_| vec![0.0; n]) }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn get(&self, kind: ParamKind) -> &[f64] {
        &self.fields[kind as usize]
    }

    pub fn get_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        &mut self.fields[kind as usize]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.fields.iter().flatten().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.fields.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Gradient with respect to the seven values of a stationary field.
    pub fn stationary(&self) -> [f64; 7] {
        std::array::from_fn(|k| self.fields[k].iter().sum())
    }

    pub fn scale(&mut self, s: f64) {
        self.fields.iter_mut().flatten().for_each(|v| *v *= s);
    }
}

/// Prior precision and its log-determinant for one parameter value, ready to
/// score any number of trajectories.
pub struct Likelihood {
    theta: ParamFields,
    model: PriorModel,
    q: BlockPrecision,
    log_det: f64,
    exec: Execution,
}

impl Likelihood {
    pub fn new(theta: &ParamFields, initial: InitialState, exec: Execution) -> Result<Self> {
        let model = PriorModel::with_execution(theta, initial, exec)?;
        let q = block_precision_from_model(&model, exec)?;
        let log_det = log_det_block_with(&q, exec)?;
        Ok(Self { theta: theta.clone(), model, q, log_det, exec })
    }

    /// Moves to new parameters, rebuilding only the changed time slabs.
    pub fn refresh(&mut self, theta: &ParamFields) -> Result<usize> {
        if *theta == self.theta {
            return Ok(0);
        }
        let n = self.model.refresh(&self.theta, theta, self.exec)?;
        self.q = block_precision_from_model(&self.model, self.exec)?;
        self.log_det = log_det_block_with(&self.q, self.exec)?;
        self.theta = theta.clone();
        Ok(n)
    }

    pub fn theta(&self) -> &ParamFields {
        &self.theta
    }

    pub fn precision(&self) -> &BlockPrecision {
        &self.q
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn model(&self) -> &PriorModel {
        &self.model
    }

    pub fn nll(&self, x: &Trajectory) -> Result<f64> {
        x.check_grid(self.q.grid())?;
        let n = self.q.dim() as f64;
        Ok(0.5 * (dot(x.as_slice(), &self.q.mul_vec(x.as_slice())) - self.log_det) + 0.5 * n * LN_2PI)
    }

    /// Mean NLL, summed in member order.
    pub fn mean_nll(&self, xs: &[Trajectory]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::InvalidParams("need at least one trajectory".into()));
        }
        let terms = try_map_indexed(self.exec, xs.len(), |i| self.nll(&xs[i]))?;
        Ok(terms.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Trace-mode gradient of the mean NLL over `xs`.
    pub fn gradient(&self, xs: &[Trajectory]) -> Result<ParamGradient> {
        if xs.is_empty() {
            return Err(Error::InvalidParams("need at least one trajectory".into()));
        }
        for x in xs {
            x.check_grid(self.q.grid())?;
        }
        let g = *self.q.grid();
        let theta = &self.theta;
        let k = (theta.alpha / 2) as usize;
        let inv_n = 1.0 / xs.len() as f64;
        let gens = self.q.generators().expect("prior precision keeps generators");
        let steps = self.model.steps();

        let per_step = try_map_indexed(self.exec, steps.len(), |i| {
            let step = &steps[i];
            let t = step.t;
            let m = g.state_dim();
            let a = step.a_solve();
            let w = noise_weights(step)?;
            // -1/2 log|A^T W A|
            let factor = sparse_cholesky(&gens.step_precisions[i])?;
            let l_bar =
                DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(m, factor.diagonal().iter().map(|d| 2.0 / d)));
            let s_bar = cholesky_backward(&factor, &l_bar)?;
            let a_sbar = a.mul_dense(&s_bar);
            let mut g_a = DMatrix::from_fn(m, m, |r, c| -w[r] * a_sbar[(r, c)]);
            let mut g_w: Vec<f64> = (0..m)
                .map(|r| {
                    let (cols, vals) = a.row(r);
                    -0.5 * cols.iter().zip(vals).map(|(&c, v)| a_sbar[(r, c)] * v).sum::<f64>()
                })
                .collect();
            // 1/2 r^T W r averaged over trajectories
            for x in xs {
                let (prev, cur) = (x.slab(t - 1), x.slab(t));
                let mut r = a.mul_vec(cur);
                for (ri, p) in r.iter_mut().zip(prev) {
                    *ri -= p;
                }
                for row in 0..m {
                    let wr = w[row] * r[row] * inv_n;
                    if wr != 0.0 {
                        for (col, xc) in cur.iter().enumerate() {
                            g_a[(row, col)] += wr * xc;
                        }
                    }
                    g_w[row] += 0.5 * r[row] * r[row] * inv_n;
                }
            }
            let g_l = power_pullback(step.core(), &g_a, k) * g.dt;
            let mut grad = ParamGradient::zeros(g);
            let entries = stencil_entries(theta, t);
            accumulate_operator_gradient(theta, t, &entries, |r, c| g_l[(r, c)], 1.0, &mut grad.fields);
            let tau = theta.tau();
            for (c, gw) in g_w.iter().enumerate() {
                // W = (dt tau)^-2
                grad.fields[ParamKind::Tau as usize][t * m + c] += gw * (-2.0 * w[c] / tau[t * m + c]);
            }
            Ok::<_, Error>(grad)
        })?;

        let mut total = ParamGradient::zeros(g);
        for part in per_step {
            for (dst, src) in total.fields.iter_mut().zip(part.fields) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        self.initial_gradient(xs, &mut total)?;
        Ok(total)
    }

    /// Contribution of `1/2 x_0^T P_0^{-1} x_0 + 1/2 log|P_0|` through the
    /// stationary burn-in; nothing for a white initial state.
    fn initial_gradient(&self, xs: &[Trajectory], total: &mut ParamGradient) -> Result<()> {
        let InitialState::Stationary { burn_in, sigma0 } = self.model.initial() else {
            return Ok(());
        };
        let InitialCovariance::Dense(p0) = self.model.initial_covariance() else {
            unreachable!("stationary initial state has a dense covariance")
        };
        let step0 = self.model.init_step().expect("stationary model keeps its slice-0 step");
        let g = *self.q.grid();
        let m = g.state_dim();
        let p0_inv = p0.clone().cholesky().ok_or(Error::NotPositiveDefinite(0))?.inverse();
        let mut c0 = DMatrix::zeros(m, m);
        for x in xs {
            let v = nalgebra::DVector::from_column_slice(x.slab(0));
            c0 += &v * v.transpose();
        }
        c0 /= xs.len() as f64;
        let mut p_bar = (&p0_inv * c0 * &p0_inv) * -0.5 + &p0_inv * 0.5;

        let mmat = step0.dense_m()?;
        let var: Vec<f64> = step0.noise_std().iter().map(|s| s * s).collect();
        let mut cs = Vec::with_capacity(burn_in);
        let mut p = DMatrix::identity(m, m) * (sigma0 * sigma0);
        for _ in 0..burn_in {
            for (i, v) in var.iter().enumerate() {
                p[(i, i)] += v;
            }
            cs.push(p.clone());
            p = &mmat * &p * mmat.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        let mut m_bar = DMatrix::zeros(m, m);
        let mut v_bar = vec![0.0; m];
        for c in cs.iter().rev() {
            m_bar += (&p_bar * &mmat * c) * 2.0;
            let c_bar = mmat.transpose() * &p_bar * &mmat;
            for (i, vb) in v_bar.iter_mut().enumerate() {
                *vb += c_bar[(i, i)];
            }
            p_bar = c_bar;
        }
        // M = A^{-1}: dM = -M dA M
        let a_bar = -(mmat.transpose() * m_bar * mmat.transpose());
        let k = (self.theta.alpha / 2) as usize;
        let g_l = power_pullback(step0.core(), &a_bar, k) * g.dt;
        let entries = stencil_entries(&self.theta, 0);
        accumulate_operator_gradient(&self.theta, 0, &entries, |r, c| g_l[(r, c)], 1.0, &mut total.fields);
        let tau = self.theta.tau();
        for (c, vb) in v_bar.iter().enumerate() {
            // V = (dt tau)^2
            total.fields[ParamKind::Tau as usize][c] += vb * 2.0 * g.dt * g.dt * tau[c];
        }
        Ok(())
    }
}

/// Given `G = df/dP` for `P = L^k`, returns `df/dL = sum_j (L^T)^j G (L^T)^(k-1-j)`.
fn power_pullback(l: &SparseMatrix, g: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    if k == 1 {
        return g.clone();
    }
    let lt = l.transpose();
    // left_pows[j] = (L^T)^j G
    let mut left = vec![g.clone()];
    for j in 1..k {
        left.push(lt.mul_dense(&left[j - 1]));
    }
    let mut out = DMatrix::zeros(g.nrows(), g.ncols());
    for (j, lj) in left.iter().enumerate() {
        // lj (L^T)^(k-1-j) = (L^(k-1-j) lj^T)^T
        let mut acc = lj.transpose();
        for _ in 0..(k - 1 - j) {
            acc = l.mul_dense(&acc);
        }
        out += acc.transpose();
    }
    out
}

pub fn nll(x: &Trajectory, theta: &ParamFields, initial: InitialState) -> Result<f64> {
    Likelihood::new(theta, initial, Execution::default())?.nll(x)
}

pub fn mean_nll(xs: &[Trajectory], theta: &ParamFields, initial: InitialState, exec: Execution) -> Result<f64> {
    Likelihood::new(theta, initial, exec)?.mean_nll(xs)
}

pub fn nll_grad(x: &Trajectory, theta: &ParamFields, initial: InitialState, mode: GradMode) -> Result<ParamGradient> {
    mean_nll_grad(std::slice::from_ref(x), theta, initial, mode, Execution::default())
}

/// Gradient of the mean NLL over `xs` with respect to every field entry.
pub fn mean_nll_grad(
    xs: &[Trajectory],
    theta: &ParamFields,
    initial: InitialState,
    mode: GradMode,
    exec: Execution,
) -> Result<ParamGradient> {
    match mode {
        GradMode::Trace => Likelihood::new(theta, initial, exec)?.gradient(xs),
        GradMode::FiniteDiff => {
            let g = *theta.grid();
            let n = g.trajectory_dim();
            if n > DENSE_LIMIT {
                return Err(Error::DimensionGuard { dim: n, limit: DENSE_LIMIT });
            }
            let vals = try_map_indexed(exec, 7 * n, |idx| {
                let kind = ParamKind::ALL[idx / n];
                let i = idx % n;
                let v = theta.get(kind)[i];
                let h = 1e-5 * (1.0 + v.abs());
                let eval = |delta: f64| {
                    let mut th = theta.clone();
                    th.get_mut(kind)[i] = v + delta;
                    Likelihood::new(&th, initial, Execution::Sequential)?.mean_nll(xs)
                };
                Ok::<_, Error>((eval(h)? - eval(-h)?) / (2.0 * h))
            })?;
            let mut grad = ParamGradient::zeros(g);
            for (idx, d) in vals.into_iter().enumerate() {
                grad.fields[idx / n][idx % n] = d;
            }
            Ok(grad)
        }
    }
}

/// Gradient of the mean NLL with respect to the seven values of a stationary
/// parameter set.
pub fn stationary_nll_grad(
    xs: &[Trajectory],
    params: StationaryParams,
    grid: SpaceTimeGrid,
    alpha: u32,
    initial: InitialState,
    mode: GradMode,
    exec: Execution,
) -> Result<[f64; 7]> {
    match mode {
        GradMode::Trace => {
            let theta = ParamFields::stationary(grid, params, alpha);
            Ok(Likelihood::new(&theta, initial, exec)?.gradient(xs)?.stationary())
        }
        GradMode::FiniteDiff => {
            let base = params.to_array();
            let vals = try_map_indexed(exec, 14, |idx| {
                let k = idx / 2;
                let h = 1e-5 * (1.0 + base[k].abs());
                let mut p = base;
                p[k] += if idx % 2 == 0 { h } else { -h };
                let theta = ParamFields::stationary(grid, StationaryParams::from_array(p), alpha);
                Likelihood::new(&theta, initial, Execution::Sequential)?.mean_nll(xs)
            })?;
            Ok(std::array::from_fn(|k| {
                let h = 1e-5 * (1.0 + base[k].abs());
                (vals[2 * k] - vals[2 * k + 1]) / (2.0 * h)
            }))
        }
    }
}

/// Squared-difference roughness of every field over `t`, `y` and `x`
/// neighbours, and its gradient added into `grad` with weight `weight`.
pub fn smoothness_penalty(theta: &ParamFields, weight: f64, grad: Option<&mut ParamGradient>) -> f64 {
    let g = theta.grid();
    let m = g.state_dim();
    let mut total = 0.0;
    let mut grad = grad;
    for kind in ParamKind::ALL {
        let f = theta.get(kind);
        for i in 0..g.trajectory_dim() {
            let (t, y, x) = (i / m, (i % m) / g.nx, i % g.nx);
            let nbrs =
                [(x + 1 < g.nx).then_some(i + 1), (y + 1 < g.ny).then_some(i + g.nx), (t + 1 < g.nt).then_some(i + m)];
            for j in nbrs.into_iter().flatten() {
                let d = f[j] - f[i];
                total += weight * d * d;
                if let Some(gr) = grad.as_deref_mut() {
                    gr.fields[kind as usize][j] += 2.0 * weight * d;
                    gr.fields[kind as usize][i] -= 2.0 * weight * d;
                }
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy)]
pub struct FitConfig {
    pub optimizer: StepOperator,
    pub max_steps: usize,
    /// Optimize one value per parameter broadcast over the grid.
    pub stationary: bool,
    pub grad_mode: GradMode,
    pub initial: InitialState,
    /// Weight of [`smoothness_penalty`]; zero disables it.
    pub smoothness: f64,
    /// Projection floor for `kappa`, `tau` and diffusion eigenvalues.
    pub floor: f64,
    pub exec: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optimizer: StepOperator::adam(0.05),
            max_steps: 100,
            stationary: true,
            grad_mode: GradMode::FiniteDiff,
            initial: InitialState::default(),
            smoothness: 0.0,
            floor: 1e-6,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best parameters seen.
    pub theta: ParamFields,
    /// Objective after each step; entry 0 is the starting value.
    pub loss_curve: Vec<f64>,
    pub best_loss: f64,
    pub best_step: usize,
}

/// First-order descent on the mean NLL of `trajectories`.
pub fn fit_params(trajectories: &[Trajectory], theta0: &ParamFields, cfg: &FitConfig) -> Result<FitResult> {
    if trajectories.is_empty() {
        return Err(Error::InvalidParams("need at least one trajectory".into()));
    }
    cfg.optimizer.validate()?;
    let grid = *theta0.grid();
    let alpha = theta0.alpha;
    let objective = |theta: &ParamFields| -> Result<f64> {
        let nll = mean_nll(trajectories, theta, cfg.initial, cfg.exec)?;
        let pen =
            if cfg.smoothness > 0.0 && !cfg.stationary { smoothness_penalty(theta, cfg.smoothness, None) } else { 0.0 };
        Ok(nll + pen)
    };

    let mut theta = if cfg.stationary { ParamFields::stationary(grid, theta0.mean(), alpha) } else { theta0.clone() };
    let start = objective(&theta)?;
    if !start.is_finite() {
        return Err(Error::DivergedFit(0));
    }
    let mut result = FitResult { theta: theta.clone(), loss_curve: vec![start], best_loss: start, best_step: 0 };
    let n_params = if cfg.stationary { 7 } else { 7 * grid.trajectory_dim() };
    let mut opt = OptimizerState::new(cfg.optimizer, n_params);

    for step in 1..=cfg.max_steps {
        if cfg.stationary {
            let p = theta.mean();
            let grad = stationary_nll_grad(trajectories, p, grid, alpha, cfg.initial, cfg.grad_mode, cfg.exec)?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedFit(step));
            }
            let mut v = p.to_array();
            opt.step(&mut v, &grad);
            theta = ParamFields::stationary(grid, StationaryParams::from_array(v), alpha);
        } else {
            let mut grad = mean_nll_grad(trajectories, &theta, cfg.initial, cfg.grad_mode, cfg.exec)?;
            if cfg.smoothness > 0.0 {
                smoothness_penalty(&theta, cfg.smoothness, Some(&mut grad));
            }
            let flat_grad = grad.flat();
            if flat_grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedFit(step));
            }
            let mut flat: Vec<f64> = theta.flat().collect();
            opt.step(&mut flat, &flat_grad);
            theta = unflatten(grid, &flat, alpha)?;
        }
        theta.project(cfg.floor);
        let loss = objective(&theta)?;
        if !loss.is_finite() {
            return Err(Error::DivergedFit(step));
        }
        result.loss_curve.push(loss);
        if loss < result.best_loss {
            result.best_loss = loss;
            result.best_step = step;
            result.theta = theta.clone();
        }
    }
    Ok(result)
}

pub(crate) fn unflatten(grid: SpaceTimeGrid, flat: &[f64], alpha: u32) -> Result<ParamFields> {
    let n = grid.trajectory_dim();
    ParamFields::from_fields(grid, std::array::from_fn(|k| flat[k * n..(k + 1) * n].to_vec()), alpha)
}
