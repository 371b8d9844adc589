//! Unrolled first-order solver over the augmented state `(x, theta)`.
//!
//! Each iteration applies a deterministic step operator to the gradient of
//!
//! ```text
//! J(x, theta) = (y - H x)^T R^{-1} (y - H x) + lambda (x^T Q(theta) x - log|Q(theta)|)
//! ```
//!
//! With `theta` frozen the log-determinant is constant and `J` reduces to the
//! optimal-interpolation cost. `theta` moves only in joint or alternating
//! mode, and is projected back to valid parameters after every update.

use std::path::Path;

use crate::error::{Error, Result};
use crate::estimation::{smoothness_penalty, unflatten, Likelihood, ParamGradient};
use crate::grid::Trajectory;
use crate::oi::{variational_cost, variational_grad};
use crate::operator::{ParamFields, ParamKind, StationaryParams};
use crate::optim::{OptimizerState, StepOperator};
use crate::parallel::Execution;
use crate::precision::ObservationSet;
use crate::state_space::InitialState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    XOnly,
    Joint,
    /// Cycles of `x_steps` state updates followed by `theta_steps` parameter
    /// updates.
    Alternating {
        x_steps: usize,
        theta_steps: usize,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub n_iterations: usize,
    pub step: StepOperator,
    pub theta_step: StepOperator,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub update_mode: UpdateMode,
    pub initial: InitialState,
    /// Keep `theta` stationary: one value per parameter.
    pub stationary_theta: bool,
    /// Weight of the squared-difference roughness penalty on `theta`.
    pub smoothness: f64,
    pub floor: f64,
    /// Cap each state update at the minimizer of the (quadratic, for fixed
    /// `theta`) cost along its direction, so the cost never increases.
    pub monotone: bool,
    /// Parameters held at their initial value, indexed by [`ParamKind`].
    pub fixed: [bool; 7],
    pub exec: Execution,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_iterations: 100,
            step: StepOperator::adam(0.05),
            theta_step: StepOperator::adam(0.01),
            lambda: 1.0,
            lambda1: 1.0,
            lambda2: 1e-3,
            update_mode: UpdateMode::XOnly,
            initial: InitialState::default(),
            stationary_theta: false,
            smoothness: 0.0,
            floor: 1e-6,
            monotone: false,
            fixed: [false; 7],
            exec: Execution::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::InvalidParams("n_iterations must be at least 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParams(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let UpdateMode::Alternating { x_steps, theta_steps } = self.update_mode {
            if x_steps + theta_steps == 0 {
                return Err(Error::InvalidParams("alternating mode needs at least one step per cycle".into()));
            }
        }
        self.step.validate()?;
        self.theta_step.validate()
    }

    fn moves(&self, iteration: usize) -> (bool, bool) {
        match self.update_mode {
            UpdateMode::XOnly => (true, false),
            UpdateMode::Joint => (true, true),
            UpdateMode::Alternating { x_steps, theta_steps } => {
                let phase = iteration % (x_steps + theta_steps);
                (phase < x_steps, phase >= x_steps)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedState {
    pub x: Trajectory,
    pub theta: ParamFields,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub data_term: f64,
    /// `lambda x^T Q x`, minus `lambda log|Q|` when `theta` is free.
    pub prior_term: f64,
    /// Norm of the state gradient.
    pub grad_norm: f64,
    pub theta_change: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub records: Vec<IterationRecord>,
    /// Transition slabs rebuilt after parameter updates.
    pub rebuilt_slabs: usize,
}

impl Diagnostics {
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }

    /// CSV `iteration,cost,data_term,prior_term,grad_norm,theta_change`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "cost", "data_term", "prior_term", "grad_norm", "theta_change"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.cost),
                format!("{:e}", r.data_term),
                format!("{:e}", r.prior_term),
                format!("{:e}", r.grad_norm),
                format!("{:e}", r.theta_change),
            ])?;
        }
        w.flush().map_err(io)
    }
}

/// A run stopped early; carries what was recorded up to the failure.
#[derive(Debug)]
pub struct SolverAbort {
    pub error: Error,
    pub diagnostics: Diagnostics,
    pub state: AugmentedState,
}

impl std::fmt::Display for SolverAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} recorded iterations", self.error, self.diagnostics.records.len())
    }
}

impl std::error::Error for SolverAbort {}

impl From<SolverAbort> for Error {
    fn from(a: SolverAbort) -> Self {
        a.error
    }
}

/// Solver with its optimizer memory and the lazily refreshed prior.
pub struct VariationalSolver<'a> {
    obs: &'a ObservationSet,
    cfg: SolverConfig,
    prior: Likelihood,
    x_opt: OptimizerState,
    theta_opt: OptimizerState,
    iteration: usize,
    rebuilt: usize,
}

impl<'a> VariationalSolver<'a> {
    pub fn new(theta: &ParamFields, obs: &'a ObservationSet, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = theta.grid();
        if obs.grid() != grid {
            return Err(Error::InvalidGrid("observations are on a different grid".into()));
        }
        let n_theta = if cfg.stationary_theta { 7 } else { 7 * grid.trajectory_dim() };
        Ok(Self {
            obs,
            cfg,
            prior: Likelihood::new(theta, cfg.initial, cfg.exec)?,
            x_opt: OptimizerState::new(cfg.step, grid.trajectory_dim()),
            theta_opt: OptimizerState::new(cfg.theta_step, n_theta),
            iteration: 0,
            rebuilt: 0,
        })
    }

    fn theta_free(&self) -> bool {
        self.cfg.update_mode != UpdateMode::XOnly
    }

    /// Cost terms at `state` (with `state.theta` as the current prior).
    pub fn record(&mut self, state: &AugmentedState) -> Result<IterationRecord> {
        self.rebuilt += self.prior.refresh(&state.theta)?;
        let q = self.prior.precision();
        let terms = variational_cost(&state.x, self.obs, q, self.cfg.lambda)?;
        let prior_term =
            if self.theta_free() { terms.prior - self.cfg.lambda * self.prior.log_det() } else { terms.prior };
        let grad = variational_grad(&state.x, self.obs, q, self.cfg.lambda)?;
        let grad_norm = grad.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(IterationRecord {
            iteration: self.iteration,
            cost: terms.data + prior_term,
            data_term: terms.data,
            prior_term,
            grad_norm,
            theta_change: 0.0,
        })
    }

    /// One update of `x` and/or `theta`, both gradients taken at the input.
    pub fn step(&mut self, state: &AugmentedState) -> Result<(AugmentedState, f64)> {
        let k = self.iteration;
        let (move_x, move_theta) = self.cfg.moves(k);
        self.rebuilt += self.prior.refresh(&state.theta)?;
        let lambda = self.cfg.lambda;

        let mut x = state.x.clone();
        if move_x {
            let g = variational_grad(&state.x, self.obs, self.prior.precision(), lambda)?;
            if g.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::DivergedStep(k));
            }
            self.x_opt.step(x.as_mut_slice(), g.as_slice());
            if self.cfg.monotone {
                x = self.capped(&state.x, &x, &g)?;
            }
        }

        let mut theta = state.theta.clone();
        let mut change = 0.0;
        if move_theta {
            // d/dtheta of lambda (x^T Q x - log|Q|) = 2 lambda dNLL/dtheta
            let mut g: ParamGradient = self.prior.gradient(std::slice::from_ref(&state.x))?;
            g.scale(2.0 * lambda);
            if self.cfg.smoothness > 0.0 && !self.cfg.stationary_theta {
                smoothness_penalty(&state.theta, self.cfg.smoothness, Some(&mut g));
            }
            for kind in ParamKind::ALL.into_iter().filter(|k| self.cfg.fixed[*k as usize]) {
                g.get_mut(kind).fill(0.0);
            }
            let grid = *theta.grid();
            if self.cfg.stationary_theta {
                let sg = g.stationary();
                if sg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DivergedStep(k));
                }
                let mut v = theta.mean().to_array();
                self.theta_opt.step(&mut v, &sg);
                theta = ParamFields::stationary(grid, StationaryParams::from_array(v), theta.alpha);
            } else {
                let fg = g.flat();
                if fg.iter().any(|v| !v.is_finite()) {
                    return Err(Error::DivergedStep(k));
                }
                let mut flat: Vec<f64> = theta.flat().collect();
                self.theta_opt.step(&mut flat, &fg);
                theta = unflatten(grid, &flat, theta.alpha)?;
            }
            theta.project(self.cfg.floor);
            change = theta.flat().zip(state.theta.flat()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        }
        self.iteration += 1;
        Ok((AugmentedState { x, theta }, change))
    }

    /// Scales the move `x_new - x` by `min(1, s*)`, `s*` the exact line
    /// minimizer; falls back to an exact steepest-descent step when the move
    /// is not a descent direction.
    fn capped(&self, x: &Trajectory, x_new: &Trajectory, g: &Trajectory) -> Result<Trajectory> {
        let mut d: Vec<f64> = x_new.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a - b).collect();
        let mut slope: f64 = d.iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
        let mut cap = 1.0;
        if slope >= 0.0 {
            d = g.as_slice().iter().map(|v| -v).collect();
            slope = -d.iter().map(|v| v * v).sum::<f64>();
            cap = f64::INFINITY;
        }
        if slope == 0.0 {
            return Ok(x.clone());
        }
        let hd = self.obs.observe(&d);
        let data: f64 = hd.iter().zip(self.obs.noise_var()).map(|(h, r)| h * h / r).sum();
        let prior: f64 = d.iter().zip(self.prior.precision().mul_vec(&d)).map(|(a, b)| a * b).sum();
        let curvature = 2.0 * (data + self.cfg.lambda * prior);
        let s = (-slope / curvature).min(cap);
        let data = x.as_slice().iter().zip(&d).map(|(a, b)| a + s * b).collect();
        Trajectory::from_vec(*x.grid(), data)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn rebuilt_slabs(&self) -> usize {
        self.rebuilt
    }
}

/// One step from fresh optimizer memory.
pub fn solver_step(state: &AugmentedState, obs: &ObservationSet, cfg: &SolverConfig) -> Result<AugmentedState> {
    let mut solver = VariationalSolver::new(&state.theta, obs, *cfg)?;
    Ok(solver.step(state)?.0)
}

#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub x: Trajectory,
    pub theta: ParamFields,
    pub diagnostics: Diagnostics,
}

/// `n_iterations` solver steps. Diagnostics hold one record per iteration
/// (cost before the update) plus a final record after the last update.
pub fn run_solver(
    x0: &Trajectory,
    theta0: &ParamFields,
    obs: &ObservationSet,
    cfg: &SolverConfig,
) -> std::result::Result<SolverOutput, Box<SolverAbort>> {
    let mut state = AugmentedState { x: x0.clone(), theta: theta0.clone() };
    let mut diagnostics = Diagnostics::default();
    let abort = |error, diagnostics, state| Box::new(SolverAbort { error, diagnostics, state });
    let mut solver = match VariationalSolver::new(theta0, obs, *cfg) {
        Ok(s) => s,
        Err(e) => return Err(abort(e, diagnostics, state)),
    };
    for _ in 0..cfg.n_iterations {
        let mut rec = match solver.record(&state) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, diagnostics, state)),
        };
        match solver.step(&state) {
            Ok((next, change)) => {
                rec.theta_change = change;
                diagnostics.records.push(rec);
                state = next;
            }
            Err(e) => {
                diagnostics.records.push(rec);
                return Err(abort(e, diagnostics, state));
            }
        }
    }
    match solver.record(&state) {
        Ok(r) => diagnostics.records.push(r),
        Err(e) => return Err(abort(e, diagnostics, state)),
    }
    diagnostics.rebuilt_slabs = solver.rebuilt_slabs();
    Ok(SolverOutput { x: state.x, theta: state.theta, diagnostics })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingLoss {
    pub total: f64,
    /// Mean squared reconstruction error.
    pub l1: f64,
    /// NLL of the true trajectory under the estimated parameters.
    pub l2: f64,
}

pub fn training_loss(
    x_true: &Trajectory,
    x_star: &Trajectory,
    theta_star: &ParamFields,
    cfg: &SolverConfig,
) -> Result<TrainingLoss> {
    x_star.check_grid(x_true.grid())?;
    let n = x_true.as_slice().len() as f64;
    let l1 = x_true.as_slice().iter().zip(x_star.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let l2 = if cfg.lambda2 != 0.0 { crate::estimation::nll(x_true, theta_star, cfg.initial)? } else { 0.0 };
    Ok(TrainingLoss { total: cfg.lambda1 * l1 + cfg.lambda2 * l2, l1, l2 })
}
