//! Posterior ensembles by conditional simulation:
//!
//! ```text
//! x^i = x* + (x_s^i - x_s^{*,i})
//! ```
//!
//! where `x_s^i` is a prior draw and `x_s^{*,i}` its own interpolation from
//! pseudo-observations taken on the real observation mask.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Trajectory;
use crate::oi::{PosteriorSolver, SolveMethod};
use crate::operator::ParamFields;
use crate::parallel::{try_map_indexed, Execution};
use crate::precision::{block_precision_from_model, ObservationSet};
use crate::rng::{stream, Purpose};
use crate::state_space::{Ensemble, InitialState, PriorModel};

#[derive(Debug, Clone, Copy)]
pub struct ConditionalConfig {
    pub n_members: usize,
    pub base_seed: u64,
    pub method: SolveMethod,
    pub initial: InitialState,
    /// Perturb pseudo-observations with `N(0, R)` noise.
    pub observation_noise: bool,
    pub exec: Execution,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        Self {
            n_members: 100,
            base_seed: 0,
            method: SolveMethod::Direct,
            initial: InitialState::default(),
            observation_noise: true,
            exec: Execution::default(),
        }
    }
}

pub fn conditional_sample(
    x_star: &Trajectory,
    theta_star: &ParamFields,
    obs: &ObservationSet,
    cfg: &ConditionalConfig,
) -> Result<Ensemble> {
    x_star.check_grid(theta_star.grid())?;
    if cfg.n_members == 0 {
        return Err(Error::InvalidParams("ensemble needs at least one member".into()));
    }
    let model = PriorModel::with_execution(theta_star, cfg.initial, cfg.exec)?;
    let q = block_precision_from_model(&model, cfg.exec)?;
    let solver = PosteriorSolver::new(&q, obs, 1.0, cfg.method)?;
    let members = try_map_indexed(cfg.exec, cfg.n_members, |i| {
        member(&model, &solver, x_star, obs, cfg, i).map_err(|e| Error::Member { member: i, source: Box::new(e) })
    })?;
    Ok(Ensemble { grid: *x_star.grid(), base_seed: cfg.base_seed, members })
}

fn member(
    model: &PriorModel,
    solver: &PosteriorSolver,
    x_star: &Trajectory,
    obs: &ObservationSet,
    cfg: &ConditionalConfig,
    i: usize,
) -> Result<Trajectory> {
    let xs = model.sample_member(cfg.base_seed, i as u64)?;
    let mut pseudo = obs.observe(xs.as_slice());
    if cfg.observation_noise {
        let mut rng = stream(cfg.base_seed, i as u64, 0, Purpose::ObservationNoise);
        for (v, r) in pseudo.iter_mut().zip(obs.noise_var()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += r.sqrt() * z;
        }
    }
    let xs_star = solver.solve_values(&pseudo)?.x;
    let data =
        x_star.as_slice().iter().zip(xs.as_slice()).zip(xs_star.as_slice()).map(|((m, s), ss)| m + s - ss).collect();
    Trajectory::from_vec(*x_star.grid(), data)
}

/// Cellwise mean and standard deviation (divisor `n - 1`).
pub fn ensemble_stats(ens: &Ensemble) -> Result<(Trajectory, Trajectory)> {
    let n = ens.members.len();
    if n < 2 {
        return Err(Error::InvalidParams(format!("ensemble statistics need at least 2 members, got {n}")));
    }
    let dim = ens.grid.trajectory_dim();
    let mut mean = vec![0.0; dim];
    for m in &ens.members {
        for (a, v) in mean.iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0; dim];
    for m in &ens.members {
        for ((a, v), mu) in var.iter_mut().zip(m.as_slice()).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let std = var.into_iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
    Ok((Trajectory::from_vec(ens.grid, mean)?, Trajectory::from_vec(ens.grid, std)?))
}
