//! Timing and agreement of the interpolation paths across grid sizes.

use std::path::Path;
use std::time::Instant;

use crate::dense::{oi_solve_dense_oracle, DENSE_LIMIT};
use crate::error::{Error, Result};
use crate::experiment::masks::{generate_obs_mask, ObsPattern};
use crate::grid::{SpaceTimeGrid, Trajectory};
use crate::oi::{PosteriorSolver, SolveMethod};
use crate::operator::{ParamFields, StationaryParams};
use crate::parallel::Execution;
use crate::precision::{block_precision_from_model, ObservationSet};
use crate::state_space::{InitialState, PriorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Dense,
    DirectSparse,
    Pcg,
}

impl BenchMethod {
    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Dense => "dense",
            BenchMethod::DirectSparse => "direct_sparse",
            BenchMethod::Pcg => "pcg",
        }
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(BenchMethod::Dense),
            "direct_sparse" | "direct" => Ok(BenchMethod::DirectSparse),
            "pcg" => Ok(BenchMethod::Pcg),
            other => Err(Error::Config(format!("unknown benchmark method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Square grid sides.
    pub sizes: Vec<usize>,
    pub nt: usize,
    pub params: StationaryParams,
    pub alpha: u32,
    pub density: f64,
    pub noise_var: f64,
    pub methods: Vec<BenchMethod>,
    pub seed: u64,
    pub pcg_tol: f64,
    pub initial: InitialState,
    pub exec: Execution,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![8, 12, 16, 24],
            nt: 10,
            params: StationaryParams::isotropic(0.5, 1.0),
            alpha: 2,
            density: 0.2,
            noise_var: 0.01,
            methods: vec![BenchMethod::Dense, BenchMethod::DirectSparse, BenchMethod::Pcg],
            seed: 0,
            pcg_tol: 1e-10,
            initial: InitialState::default(),
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub side: usize,
    pub dim: usize,
    pub method: BenchMethod,
    pub skipped: bool,
    pub wall_seconds: f64,
    /// Stored nonzero blocks of the operator the method works with.
    pub blocks: usize,
    pub relative_residual: f64,
    pub iterations: Option<usize>,
    /// Max-norm distance to the direct sparse solution of the same case.
    pub max_diff: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "side",
            "dim",
            "method",
            "skipped",
            "wall_seconds",
            "blocks",
            "relative_residual",
            "iterations",
            "max_diff_vs_direct",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.side.to_string(),
                r.dim.to_string(),
                r.method.name().to_string(),
                r.skipped.to_string(),
                format!("{:.6}", r.wall_seconds),
                r.blocks.to_string(),
                format!("{:e}", r.relative_residual),
                r.iterations.map(|i| i.to_string()).unwrap_or_default(),
                r.max_diff.map(|d| format!("{d:e}")).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    /// Largest disagreement with the direct solution among methods that ran.
    pub fn max_disagreement(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.max_diff).fold(0.0, f64::max)
    }
}

/// Runs every case sequentially so wall times are not contended.
pub fn benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &side in &cfg.sizes {
        let grid = SpaceTimeGrid::unit(side, side, cfg.nt)?;
        let theta = ParamFields::stationary(grid, cfg.params, cfg.alpha);
        let model = PriorModel::with_execution(&theta, cfg.initial, cfg.exec)?;
        let q = block_precision_from_model(&model, cfg.exec)?;
        let truth = model.sample_member(cfg.seed, 0)?;
        let mask = generate_obs_mask(&grid, ObsPattern::Random { density: cfg.density }, cfg.seed)?;
        let obs = ObservationSet::from_truth(&truth, mask, cfg.noise_var)?;
        let dim = grid.trajectory_dim();

        let start = Instant::now();
        let direct = PosteriorSolver::new(&q, &obs, 1.0, SolveMethod::Direct)?.solve()?;
        let direct_time = start.elapsed().as_secs_f64();

        for &method in &cfg.methods {
            let row = match method {
                BenchMethod::DirectSparse => BenchRow {
                    side,
                    dim,
                    method,
                    skipped: false,
                    wall_seconds: direct_time,
                    blocks: 3 * grid.nt - 2,
                    relative_residual: direct.relative_residual,
                    iterations: None,
                    max_diff: Some(0.0),
                },
                BenchMethod::Pcg => {
                    let start = Instant::now();
                    let m = SolveMethod::Pcg {
                        preconditioner: crate::oi::PcgPreconditioner::BlockDiagonal,
                        tol: cfg.pcg_tol,
                        max_iter: 20 * dim,
                    };
                    let sol = PosteriorSolver::new(&q, &obs, 1.0, m)?.solve()?;
                    BenchRow {
                        side,
                        dim,
                        method,
                        skipped: false,
                        wall_seconds: start.elapsed().as_secs_f64(),
                        blocks: 3 * grid.nt - 2,
                        relative_residual: sol.relative_residual,
                        iterations: Some(sol.iterations),
                        max_diff: Some(sol.x.max_abs_diff(&direct.x)),
                    }
                }
                BenchMethod::Dense if dim > DENSE_LIMIT => BenchRow {
                    side,
                    dim,
                    method,
                    skipped: true,
                    wall_seconds: 0.0,
                    blocks: grid.nt * grid.nt,
                    relative_residual: f64::NAN,
                    iterations: None,
                    max_diff: None,
                },
                BenchMethod::Dense => {
                    let start = Instant::now();
                    let x: Trajectory = oi_solve_dense_oracle(&theta, cfg.initial, &obs)?;
                    let wall = start.elapsed().as_secs_f64();
                    let post = crate::precision::posterior_precision(&q, &obs)?;
                    let r = post.mul_vec(x.as_slice());
                    let rhs = obs.scatter_weighted(obs.values());
                    let rn = r.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    let bn = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    BenchRow {
                        side,
                        dim,
                        method,
                        skipped: false,
                        wall_seconds: wall,
                        blocks: grid.nt * grid.nt,
                        relative_residual: if bn > 0.0 { rn / bn } else { rn },
                        iterations: None,
                        max_diff: Some(x.max_abs_diff(&direct.x)),
                    }
                }
            };
            report.rows.push(row);
        }
    }
    Ok(report)
}
