//! Backward-Euler state-space form of the SPDE and prior sampling.
//!
//! ```text
//! x_{t+1} = M_{t+1} (x_t + dt tau_{t+1} . z_{t+1}),   M_t = (I + dt L_t^(alpha/2))^{-1}
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{SpaceTimeGrid, Trajectory};
use crate::linalg::cholesky::{sparse_cholesky, CholeskyFactor};
use crate::operator::{apply_fractional, assemble_fdm_operator, validate_params, ParamFields};
use crate::parallel::{try_map_indexed, Execution};
use crate::rng::{standard_normals, stream, Purpose};
use crate::sparse::SparseMatrix;

/// Dimension above which the dense stationary initial covariance is refused.
pub const STATIONARY_DENSE_LIMIT: usize = 2500;

#[derive(Debug, Clone)]
enum MSolve {
    /// `A` itself is symmetric positive definite.
    Spd(CholeskyFactor),
    /// Factor of `A^T A`.
    Normal(CholeskyFactor),
}

/// One implicit step: `A_solve = I + dt L_t^(alpha/2)` and the noise scales
/// `dt tau_t`.
#[derive(Debug, Clone)]
pub struct TransitionStep {
    pub t: usize,
    core: SparseMatrix,
    a_solve: SparseMatrix,
    noise_std: Vec<f64>,
    solver: MSolve,
}

impl TransitionStep {
    pub fn build(theta: &ParamFields, t: usize) -> Result<Self> {
        let g = theta.grid();
        let m = g.state_dim();
        let core = assemble_fdm_operator(theta, t)?;
        let power = apply_fractional(core.clone(), theta.alpha)?.to_sparse();
        let a_solve = SparseMatrix::identity(m).linear_combination(1.0, &power, g.dt)?;
        let singular = |e: Error| match e {
            Error::NotPositiveDefinite(_) => Error::SingularTransition(t),
            other => other,
        };
        let solver = if a_solve.is_symmetric(0.0) {
            match sparse_cholesky(&a_solve) {
                Ok(f) => MSolve::Spd(f),
                Err(_) => MSolve::Normal(sparse_cholesky(&a_solve.transpose().mul(&a_solve)?).map_err(singular)?),
            }
        } else {
            MSolve::Normal(sparse_cholesky(&a_solve.transpose().mul(&a_solve)?).map_err(singular)?)
        };
        let noise_std = theta.tau()[t * m..(t + 1) * m].iter().map(|tau| g.dt * tau).collect();
        Ok(Self { t, core, a_solve, noise_std, solver })
    }

    /// The core operator `L_t`.
    pub fn core(&self) -> &SparseMatrix {
        &self.core
    }

    pub fn a_solve(&self) -> &SparseMatrix {
        &self.a_solve
    }

    /// Per-cell noise standard deviation `dt tau_t`.
    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    /// `M_t v`.
    pub fn apply_m(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.solver {
            MSolve::Spd(f) => f.solve(v),
            MSolve::Normal(f) => f.solve(&self.a_solve.mul_transpose_vec(v)),
        }
    }

    /// `M_t^T v`.
    pub fn apply_m_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.solver {
            MSolve::Spd(f) => f.solve(v),
            MSolve::Normal(f) => Ok(self.a_solve.mul_vec(&f.solve(v)?)),
        }
    }

    /// Dense `M_t`, column by column.
    pub fn dense_m(&self) -> Result<DMatrix<f64>> {
        let m = self.a_solve.nrows();
        let mut out = DMatrix::zeros(m, m);
        let mut e = vec![0.0; m];
        for j in 0..m {
            e[j] = 1.0;
            let col = self.apply_m(&e)?;
            out.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        Ok(out)
    }

    fn step(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let rhs: Vec<f64> = x.iter().zip(z).zip(&self.noise_std).map(|((x, z), s)| x + s * z).collect();
        self.apply_m(&rhs)
    }
}

/// One transition per `t = 1..nt`.
pub fn build_transition(theta: &ParamFields) -> Result<Vec<TransitionStep>> {
    build_transition_with(theta, Execution::default())
}

pub fn build_transition_with(theta: &ParamFields, exec: Execution) -> Result<Vec<TransitionStep>> {
    validate_params(theta).structural_result()?;
    let nt = theta.grid().nt;
    try_map_indexed(exec, nt - 1, |i| TransitionStep::build(theta, i + 1))
}

/// Distribution of `x_0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialState {
    /// `x_0 ~ N(0, sigma0^2 I)`.
    White { sigma0: f64 },
    /// `burn_in` steps of the slice-0 dynamics started from white noise.
    Stationary { burn_in: usize, sigma0: f64 },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Stationary { burn_in: 20, sigma0: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub enum InitialCovariance {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

/// Everything needed to sample from, or write the density of, the prior.
#[derive(Debug, Clone)]
pub struct PriorModel {
    grid: SpaceTimeGrid,
    initial: InitialState,
    init_step: Option<TransitionStep>,
    steps: Vec<TransitionStep>,
    p0: InitialCovariance,
}

impl PriorModel {
    pub fn new(theta: &ParamFields, initial: InitialState) -> Result<Self> {
        Self::with_execution(theta, initial, Execution::default())
    }

    pub fn with_execution(theta: &ParamFields, initial: InitialState, exec: Execution) -> Result<Self> {
        let grid = *theta.grid();
        let steps = build_transition_with(theta, exec)?;
        let m = grid.state_dim();
        let (init_step, p0) = match initial {
            InitialState::White { sigma0 } => (None, InitialCovariance::Diagonal(vec![sigma0 * sigma0; m])),
            InitialState::Stationary { burn_in, sigma0 } => {
                if m > STATIONARY_DENSE_LIMIT {
                    return Err(Error::DimensionGuard { dim: m, limit: STATIONARY_DENSE_LIMIT });
                }
                let step0 = TransitionStep::build(theta, 0)?;
                let cov = burn_in_covariance(&step0.dense_m()?, step0.noise_std(), burn_in, sigma0);
                (Some(step0), InitialCovariance::Dense(cov))
            }
        };
        Ok(Self { grid, initial, init_step, steps, p0 })
    }

    /// Rebuilds only the transitions whose parameter slab differs between
    /// `old` (the parameters this model was built from) and `new`. Returns
    /// the number of rebuilt slabs.
    pub fn refresh(&mut self, old: &ParamFields, new: &ParamFields, exec: Execution) -> Result<usize> {
        if old.alpha != new.alpha || old.grid() != new.grid() {
            *self = Self::with_execution(new, self.initial, exec)?;
            return Ok(self.grid.nt);
        }
        validate_params(new).structural_result()?;
        let changed: Vec<usize> = (0..self.grid.nt).filter(|&t| !old.slab_eq(new, t)).collect();
        let rebuilt = try_map_indexed(exec, changed.len(), |i| TransitionStep::build(new, changed[i]))?;
        for step in rebuilt {
            if step.t == 0 {
                if let InitialState::Stationary { burn_in, sigma0 } = self.initial {
                    let cov = burn_in_covariance(&step.dense_m()?, step.noise_std(), burn_in, sigma0);
                    self.p0 = InitialCovariance::Dense(cov);
                    self.init_step = Some(step);
                }
            } else {
                let t = step.t;
                self.steps[t - 1] = step;
            }
        }
        Ok(changed.len())
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn initial(&self) -> InitialState {
        self.initial
    }

    /// Transitions for `t = 1..nt`; `steps()[t - 1]` produces `x_t`.
    pub fn steps(&self) -> &[TransitionStep] {
        &self.steps
    }

    /// The slice-0 transition used by the stationary burn-in.
    pub fn init_step(&self) -> Option<&TransitionStep> {
        self.init_step.as_ref()
    }

    pub fn initial_covariance(&self) -> &InitialCovariance {
        &self.p0
    }

    /// `P_0^{-1}` as a (possibly dense-filled) sparse matrix.
    pub fn initial_precision(&self) -> Result<SparseMatrix> {
        match &self.p0 {
            InitialCovariance::Diagonal(var) => {
                if let Some(i) = var.iter().position(|&v| !(v > 0.0)) {
                    return Err(Error::DegenerateNoise { t: 0, min_tau: var[i].sqrt() });
                }
                Ok(SparseMatrix::from_diagonal(&var.iter().map(|v| 1.0 / v).collect::<Vec<_>>()))
            }
            InitialCovariance::Dense(cov) => {
                let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite(0))?;
                let inv = chol.inverse();
                let sym = (&inv + inv.transpose()) * 0.5;
                Ok(SparseMatrix::from_dense(&sym))
            }
        }
    }

    /// Runs the recursion from `x0` with explicit noise `noise[t - 1] = z_t`.
    pub fn propagate(&self, x0: &[f64], noise: &[Vec<f64>]) -> Result<Trajectory> {
        let m = self.grid.state_dim();
        if x0.len() != m {
            return Err(Error::ShapeMismatch { expected: m, got: x0.len() });
        }
        if noise.len() != self.steps.len() {
            return Err(Error::ShapeMismatch { expected: self.steps.len(), got: noise.len() });
        }
        let mut traj = Trajectory::zeros(self.grid);
        traj.slab_mut(0).copy_from_slice(x0);
        for (step, z) in self.steps.iter().zip(noise) {
            let next = step.step(traj.slab(step.t - 1), z)?;
            traj.slab_mut(step.t).copy_from_slice(&next);
        }
        Ok(traj)
    }

    /// Draws one member from its own counter-based streams.
    pub fn sample_member(&self, base_seed: u64, member: u64) -> Result<Trajectory> {
        let m = self.grid.state_dim();
        let mut rng = stream(base_seed, member, 0, Purpose::Initial);
        let x0 = match self.initial {
            InitialState::White { sigma0 } => standard_normals(&mut rng, m).into_iter().map(|z| sigma0 * z).collect(),
            InitialState::Stationary { burn_in, sigma0 } => {
                let step0 = self.init_step.as_ref().expect("stationary model keeps its slice-0 step");
                let mut x: Vec<f64> = standard_normals(&mut rng, m).into_iter().map(|z| sigma0 * z).collect();
                for b in 1..=burn_in {
                    let z = standard_normals(&mut stream(base_seed, member, b as u64, Purpose::Initial), m);
                    x = step0.step(&x, &z)?;
                }
                x
            }
        };
        let noise: Vec<Vec<f64>> = self
            .steps
            .iter()
            .map(|s| standard_normals(&mut stream(base_seed, member, s.t as u64, Purpose::Transition), m))
            .collect();
        self.propagate(&x0, &noise)
    }

    pub fn sample(&self, n_members: usize, base_seed: u64, exec: Execution) -> Result<Ensemble> {
        if n_members == 0 {
            return Err(Error::InvalidParams("ensemble needs at least one member".into()));
        }
        let members = try_map_indexed(exec, n_members, |i| {
            self.sample_member(base_seed, i as u64).map_err(|e| Error::Member { member: i, source: Box::new(e) })
        })?;
        Ok(Ensemble { grid: self.grid, base_seed, members })
    }
}

/// `P <- M (P + V) M^T`, `burn_in` times from `sigma0^2 I`.
fn burn_in_covariance(m_dense: &DMatrix<f64>, noise_std: &[f64], burn_in: usize, sigma0: f64) -> DMatrix<f64> {
    let m = m_dense.nrows();
    let mut p = DMatrix::identity(m, m) * (sigma0 * sigma0);
    for _ in 0..burn_in {
        for (i, s) in noise_std.iter().enumerate() {
            p[(i, i)] += s * s;
        }
        p = m_dense * &p * m_dense.transpose();
        p = (&p + p.transpose()) * 0.5;
    }
    p
}

/// Prior ensemble with the default parallel schedule.
pub fn sample_prior(theta: &ParamFields, n_members: usize, base_seed: u64, initial: InitialState) -> Result<Ensemble> {
    PriorModel::new(theta, initial)?.sample(n_members, base_seed, Execution::default())
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub grid: SpaceTimeGrid,
    pub base_seed: u64,
    pub members: Vec<Trajectory>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{ParamKind, StationaryParams};

    #[test]
    fn scalar_like_step() {
        // kappa^2 = 2, dt = 0.5, H = 0 would be invalid; use a uniform field
        // whose constant mode sees only kappa: A c = (1 + dt kappa^2) c.
        let g = SpaceTimeGrid::new(3, 3, 2, 1.0, 1.0, 0.5).unwrap();
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 2);
        let steps = build_transition(&theta).unwrap();
        assert_eq!(steps.len(), 1);
        let out = steps[0].apply_m(&vec![1.0; 9]).unwrap();
        for v in out {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn m_inverts_a_with_advection() {
        let g = SpaceTimeGrid::unit(4, 4, 3).unwrap();
        let mut theta = ParamFields::stationary(
            g,
            StationaryParams { kappa: 0.8, m_u: 0.7, m_v: -0.4, h11: 1.2, h12: 0.3, h22: 0.7, tau: 1.0 },
            4,
        );
        theta.get_mut(ParamKind::AdvectionU)[20] = -1.1;
        for step in build_transition(&theta).unwrap() {
            let prod = step.dense_m().unwrap() * step.a_solve().to_dense();
            assert!((prod - DMatrix::identity(16, 16)).abs().max() < 1e-10);
            let mt = step.dense_m().unwrap().transpose();
            let v: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
            let got = step.apply_m_transpose(&v).unwrap();
            let want = &mt * nalgebra::DVector::from_vec(v);
            for i in 0..16 {
                assert!((got[i] - want[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn no_noise_gives_zero_members() {
        let g = SpaceTimeGrid::unit(4, 4, 3).unwrap();
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 0.0), 2);
        let ens = sample_prior(&theta, 3, 7, InitialState::White { sigma0: 0.0 }).unwrap();
        assert!(ens.members.iter().all(|m| m.norm_inf() == 0.0));
    }

    #[test]
    fn schedule_independent() {
        let g = SpaceTimeGrid::unit(5, 4, 4).unwrap();
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(0.5, 1.0), 2);
        let model = PriorModel::new(&theta, InitialState::default()).unwrap();
        let a = model.sample(6, 99, Execution::Sequential).unwrap();
        let b = model.sample(6, 99, Execution::Parallel).unwrap();
        for (x, y) in a.members.iter().zip(&b.members) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
        assert_ne!(a.members[0].as_slice(), a.members[1].as_slice());
    }

    #[test]
    fn zero_members_rejected() {
        let g = SpaceTimeGrid::unit(3, 3, 2).unwrap();
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 2);
        assert!(sample_prior(&theta, 0, 1, InitialState::default()).is_err());
    }
}
