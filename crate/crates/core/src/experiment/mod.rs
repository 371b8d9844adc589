//! Synthetic observing-system experiments: configuration, twin data,
//! metrics, benchmarks and run manifests.

pub mod benchmark;
pub mod config;
pub mod masks;
pub mod metrics;

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub use benchmark::{benchmark, BenchConfig, BenchMethod, BenchReport, BenchRow};
pub use config::ConfigFile;
pub use masks::{generate_obs_mask, observed_fraction, ObsPattern};
pub use metrics::{evaluate, Metrics};

use crate::error::{Error, Result};
use crate::estimation::{FitConfig, GradMode};
use crate::grid::{SpaceTimeGrid, Trajectory};
use crate::io::read_params;
use crate::oi::SolveMethod;
use crate::operator::{ParamFields, ParamKind, StationaryParams};
use crate::optim::StepOperator;
use crate::parallel::Execution;
use crate::precision::ObservationSet;
use crate::rng::{stream, Purpose};
use crate::solver::{SolverConfig, UpdateMode};
use crate::state_space::{InitialState, PriorModel};
use crate::uncertainty::ConditionalConfig;

/// Named stationary or analytic parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `kappa = 0.5`, `tau = 1`, unit isotropic diffusion, no advection.
    Isotropic,
    /// `kappa = 0.33`, `tau = 1`, `m = (0.2, 0)`, `H = diag(1, 0.5)`.
    Advected,
    /// `kappa = 0.15`, advection of speed 1 whose direction turns through a
    /// half circle from the left to the right edge of the domain.
    Rotating,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Isotropic => "isotropic",
            Preset::Advected => "advected",
            Preset::Rotating => "rotating",
        }
    }

    pub fn stationary(self) -> StationaryParams {
        match self {
            Preset::Isotropic => StationaryParams::isotropic(0.5, 1.0),
            Preset::Advected | Preset::Rotating => {
                StationaryParams { kappa: 0.33, m_u: 0.2, m_v: 0.0, h11: 1.0, h12: 0.0, h22: 0.5, tau: 1.0 }
            }
        }
    }

    pub fn build(self, grid: SpaceTimeGrid, alpha: u32) -> ParamFields {
        let mut theta = ParamFields::stationary(grid, self.stationary(), alpha);
        if self == Preset::Rotating {
            theta.get_mut(ParamKind::Kappa).fill(0.15);
            let m = grid.state_dim();
            for i in 0..grid.trajectory_dim() {
                let x = (i % m) % grid.nx;
                let phi = std::f64::consts::PI * x as f64 / (grid.nx.max(2) - 1) as f64;
                theta.get_mut(ParamKind::AdvectionU)[i] = phi.cos();
                theta.get_mut(ParamKind::AdvectionV)[i] = phi.sin();
            }
        }
        theta
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(Preset::Isotropic),
            "advected" => Ok(Preset::Advected),
            "rotating" => Ok(Preset::Rotating),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThetaSource {
    Preset(Preset),
    /// Directory of parameter STGF files.
    Files(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub grid: SpaceTimeGrid,
    pub alpha: u32,
    pub theta: ThetaSource,
    pub initial: InitialState,
    pub pattern: ObsPattern,
    pub noise_var: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub solver: SolverConfig,
    pub method: SolveMethod,
    pub n_members: usize,
    pub n_trajectories: usize,
    pub fit: FitConfig,
    /// Parameter preset used as the (possibly mis-specified) starting guess.
    pub first_guess: Option<Preset>,
    pub bench: BenchConfig,
    pub exec: Execution,
    /// The parsed file with the effective seed and output directory.
    pub resolved: ConfigFile,
}

fn step_operator(c: &ConfigFile, section: &str, default_lr: f64) -> Result<StepOperator> {
    let lr = c.value_or(section, "lr", default_lr)?;
    let op = match c.get(section, "optimizer").unwrap_or("adam") {
        "adam" => StepOperator::adam(lr),
        "plain" => StepOperator::Plain { lr },
        "momentum" => StepOperator::Momentum { lr, beta: c.value_or(section, "beta", 0.9)? },
        other => return Err(Error::Config(format!("[{section}] optimizer: unknown `{other}`"))),
    };
    op.validate()?;
    Ok(op)
}

fn pattern(c: &ConfigFile) -> Result<ObsPattern> {
    Ok(match c.get("obs", "pattern").unwrap_or("random") {
        "random" => ObsPattern::Random { density: c.value_or("obs", "density", 0.2)? },
        "tracks" => ObsPattern::Tracks {
            n_tracks: c.value_or("obs", "n_tracks", 2)?,
            width: c.value_or("obs", "width", 1.0)?,
            angle_min: c.value_or("obs", "angle_min", 30.0)?,
            angle_max: c.value_or("obs", "angle_max", 60.0)?,
        },
        "blocks" => {
            ObsPattern::Blocks { n_blocks: c.value_or("obs", "n_blocks", 2)?, size: c.value_or("obs", "size", 3)? }
        }
        other => return Err(Error::Config(format!("[obs] pattern: unknown `{other}`"))),
    })
}

fn fixed_params(c: &ConfigFile) -> Result<[bool; 7]> {
    let mut fixed = [false; 7];
    for name in c.list::<String>("solver", "fixed")?.unwrap_or_default() {
        let kind = ParamKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("[solver] fixed: unknown parameter `{name}`")))?;
        fixed[kind as usize] = true;
    }
    Ok(fixed)
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl ExperimentConfig {
    /// `seed` and `out_dir` override the file; the seed must come from one of
    /// the two.
    pub fn from_file(c: &ConfigFile, seed: Option<u64>, out_dir: Option<&Path>, exec: Execution) -> Result<Self> {
        Self::build(c, seed, out_dir, exec).map_err(config_err)
    }

    fn build(c: &ConfigFile, seed: Option<u64>, out_dir: Option<&Path>, exec: Execution) -> Result<Self> {
        let seed = match seed {
            Some(s) => s,
            None => c
                .parse_value("run", "seed")?
                .ok_or_else(|| Error::Config("no seed: set [run] seed or pass --seed".into()))?,
        };
        let out_dir = match out_dir {
            Some(p) => p.to_path_buf(),
            None => c.base_dir().join(c.get("run", "out_dir").unwrap_or("out")),
        };
        let grid = SpaceTimeGrid::new(
            c.value_or("grid", "nx", 16)?,
            c.value_or("grid", "ny", 16)?,
            c.value_or("grid", "nt", 10)?,
            c.value_or("grid", "dx", 1.0)?,
            c.value_or("grid", "dy", 1.0)?,
            c.value_or("grid", "dt", 1.0)?,
        )?;
        let alpha = c.value_or("theta", "alpha", 2u32)?;
        let theta = match (c.existing_path("theta", "dir")?, c.get("theta", "preset")) {
            (Some(_), Some(_)) => return Err(Error::Config("[theta] set either dir or preset, not both".into())),
            (Some(dir), None) => ThetaSource::Files(dir),
            (None, p) => ThetaSource::Preset(p.unwrap_or("advected").parse()?),
        };
        let initial = match c.get("theta", "initial").unwrap_or("stationary") {
            "stationary" => InitialState::Stationary {
                burn_in: c.value_or("theta", "burn_in", 20)?,
                sigma0: c.value_or("theta", "sigma0", 1.0)?,
            },
            "white" => InitialState::White { sigma0: c.value_or("theta", "sigma0", 1.0)? },
            other => return Err(Error::Config(format!("[theta] initial: unknown `{other}`"))),
        };
        let noise_var: f64 = c.value_or("obs", "noise_var", 0.01)?;
        if !(noise_var > 0.0) {
            return Err(Error::Config("[obs] noise_var must be positive".into()));
        }
        let method = match c.get("solver", "method").unwrap_or("direct") {
            "direct" => SolveMethod::Direct,
            "pcg" => SolveMethod::pcg(),
            other => return Err(Error::Config(format!("[solver] method: unknown `{other}`"))),
        };
        let update_mode = match c.get("solver", "mode").unwrap_or("joint") {
            "x" | "x_only" => UpdateMode::XOnly,
            "joint" => UpdateMode::Joint,
            "alternating" => UpdateMode::Alternating {
                x_steps: c.value_or("solver", "x_steps", 10)?,
                theta_steps: c.value_or("solver", "theta_steps", 1)?,
            },
            other => return Err(Error::Config(format!("[solver] mode: unknown `{other}`"))),
        };
        let base = SolverConfig::default();
        let solver = SolverConfig {
            n_iterations: c.value_or("solver", "iterations", base.n_iterations)?,
            step: step_operator(c, "solver", 0.05)?,
            theta_step: {
                let lr = c.value_or("solver", "theta_lr", 0.01)?;
                StepOperator::adam(lr)
            },
            lambda: c.value_or("solver", "lambda", base.lambda)?,
            lambda1: c.value_or("solver", "lambda1", base.lambda1)?,
            lambda2: c.value_or("solver", "lambda2", base.lambda2)?,
            update_mode,
            initial,
            stationary_theta: c.bool_or("solver", "stationary_theta", false)?,
            smoothness: c.value_or("solver", "smoothness", base.smoothness)?,
            floor: c.value_or("solver", "floor", base.floor)?,
            monotone: c.bool_or("solver", "monotone", true)?,
            fixed: fixed_params(c)?,
            exec,
        };
        solver.validate()?;
        let grad_mode = match c.get("fit", "grad").unwrap_or("trace") {
            "trace" => GradMode::Trace,
            "finite_diff" => GradMode::FiniteDiff,
            other => return Err(Error::Config(format!("[fit] grad: unknown `{other}`"))),
        };
        let fit = FitConfig {
            optimizer: step_operator(c, "fit", 0.05)?,
            max_steps: c.value_or("fit", "steps", 100)?,
            stationary: c.bool_or("fit", "stationary", true)?,
            grad_mode,
            initial,
            smoothness: c.value_or("fit", "smoothness", 0.0)?,
            floor: c.value_or("fit", "floor", 1e-6)?,
            exec,
        };
        let first_guess = c.get("solver", "first_guess").map(str::parse).transpose()?;
        let bench_base = BenchConfig::default();
        let bench = BenchConfig {
            sizes: c.list("bench", "sizes")?.unwrap_or(bench_base.sizes),
            nt: c.value_or("bench", "nt", bench_base.nt)?,
            params: match &theta {
                ThetaSource::Preset(p) => p.stationary(),
                ThetaSource::Files(_) => bench_base.params,
            },
            alpha,
            density: c.value_or("bench", "density", bench_base.density)?,
            noise_var,
            methods: c.list("bench", "methods")?.unwrap_or(bench_base.methods),
            seed,
            pcg_tol: c.value_or("bench", "pcg_tol", bench_base.pcg_tol)?,
            initial,
            exec,
        };
        let mut resolved = c.clone();
        resolved.set("run", "seed", seed.to_string());
        resolved.set("run", "out_dir", out_dir.display().to_string());
        Ok(Self {
            grid,
            alpha,
            theta,
            initial,
            pattern: pattern(c)?,
            noise_var,
            seed,
            out_dir,
            solver,
            method,
            n_members: c.value_or("sample", "members", 100)?,
            n_trajectories: c.value_or("fit", "trajectories", 20)?,
            fit,
            first_guess,
            bench,
            exec,
            resolved,
        })
    }

    pub fn theta(&self) -> Result<ParamFields> {
        match &self.theta {
            ThetaSource::Preset(p) => Ok(p.build(self.grid, self.alpha)),
            ThetaSource::Files(dir) => read_params(dir, self.grid, self.alpha),
        }
    }

    /// Starting parameters for solves: the first guess preset if set,
    /// otherwise the configured theta.
    pub fn theta_guess(&self) -> Result<ParamFields> {
        match self.first_guess {
            Some(p) => Ok(p.build(self.grid, self.alpha)),
            None => self.theta(),
        }
    }

    pub fn conditional(&self) -> ConditionalConfig {
        ConditionalConfig {
            n_members: self.n_members,
            base_seed: self.seed,
            method: self.method,
            initial: self.initial,
            observation_noise: true,
            exec: self.exec,
        }
    }
}

/// Truth drawn from the prior plus noisy observations on a synthetic mask.
#[derive(Debug, Clone)]
pub struct TwinData {
    pub theta: ParamFields,
    pub truth: Trajectory,
    pub obs: ObservationSet,
}

pub fn synthesize(
    theta: &ParamFields,
    initial: InitialState,
    pattern: ObsPattern,
    noise_var: f64,
    seed: u64,
) -> Result<TwinData> {
    let model = PriorModel::new(theta, initial)?;
    let truth = model.sample_member(seed, 0)?;
    let mask = generate_obs_mask(theta.grid(), pattern, seed)?;
    let clean = ObservationSet::from_truth(&truth, mask, noise_var)?;
    let mut rng = stream(seed, 0, 0, Purpose::Synthetic);
    let sd = noise_var.sqrt();
    let noisy = clean
        .values()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sd * z
        })
        .collect();
    let obs = clean.with_values(noisy)?;
    Ok(TwinData { theta: theta.clone(), truth, obs })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.txt` into `dir`: the resolved configuration plus a
/// `[manifest]` section with the command, config hash, seed and library
/// version.
pub fn write_manifest(dir: &Path, command: &str, resolved: &ConfigFile, extra: &[(&str, String)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let rendered = resolved.render();
    let mut manifest = resolved.clone();
    manifest.set("manifest", "command", command);
    manifest.set("manifest", "config_sha256", sha256_hex(rendered.as_bytes()));
    manifest.set("manifest", "library", concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")));
    manifest.set("manifest", "parallel_feature", cfg!(feature = "parallel").to_string());
    for (k, v) in extra {
        manifest.set("manifest", k, v.clone());
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest.render()).map_err(|source| Error::Io { path: path.clone(), source })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let c = ConfigFile::parse("[grid]\nnx = 4\nny = 4\nnt = 3\n", ".").unwrap();
        assert!(matches!(ExperimentConfig::from_file(&c, None, None, Execution::Sequential), Err(Error::Config(_))));
        let e = ExperimentConfig::from_file(&c, Some(7), None, Execution::Sequential).unwrap();
        assert_eq!(e.seed, 7);
        assert_eq!(e.resolved.get("run", "seed"), Some("7"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            "[run]\nseed = 1\n[grid]\nnx = 0\n",
            "[run]\nseed = 1\n[theta]\npreset = spiral\n",
            "[run]\nseed = 1\n[theta]\ndir = nowhere\n",
        ] {
            let c = ConfigFile::parse(text, ".").unwrap();
            assert!(
                matches!(ExperimentConfig::from_file(&c, None, None, Execution::Sequential), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn rotating_turns() {
        let g = SpaceTimeGrid::unit(5, 3, 2).unwrap();
        let th = Preset::Rotating.build(g, 2);
        let (u, v) = (th.get(ParamKind::AdvectionU), th.get(ParamKind::AdvectionV));
        assert!((u[0] - 1.0).abs() < 1e-12 && v[0].abs() < 1e-12);
        assert!(u[2].abs() < 1e-12 && (v[2] - 1.0).abs() < 1e-12);
        assert!((u[4] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let g = SpaceTimeGrid::unit(5, 5, 3).unwrap();
        let th = Preset::Isotropic.build(g, 2);
        let a = synthesize(&th, InitialState::default(), ObsPattern::Random { density: 0.3 }, 0.01, 4).unwrap();
        let b = synthesize(&th, InitialState::default(), ObsPattern::Random { density: 0.3 }, 0.01, 4).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.obs.values(), b.obs.values());
    }

    #[test]
    fn manifest_hash_tracks_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ConfigFile::parse("[run]\nseed = 3\n", ".").unwrap();
        write_manifest(dir.path(), "simulate", &c, &[]).unwrap();
        let m1 = ConfigFile::load(dir.path().join("manifest.txt")).unwrap();
        c.set("run", "seed", "4");
        write_manifest(dir.path(), "simulate", &c, &[]).unwrap();
        let m2 = ConfigFile::load(dir.path().join("manifest.txt")).unwrap();
        assert_ne!(m1.get("manifest", "config_sha256"), m2.get("manifest", "config_sha256"));
        assert_eq!(m1.get("run", "seed"), Some("3"));
    }
}
