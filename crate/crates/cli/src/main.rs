use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spde_gmrf::estimation::{fit_params, mean_nll};
use spde_gmrf::experiment::{
    benchmark, evaluate, observed_fraction, sha256_hex, synthesize, write_manifest, ConfigFile, ExperimentConfig,
    Metrics,
};
use spde_gmrf::io::{read_field, write_field, write_params};
use spde_gmrf::oi::oi_solve_detailed;
use spde_gmrf::parallel::Execution;
use spde_gmrf::precision::{assemble_block_precision, ObservationSet};
use spde_gmrf::solver::run_solver;
use spde_gmrf::state_space::PriorModel;
use spde_gmrf::uncertainty::{conditional_sample, ensemble_stats};
use spde_gmrf::{Error, Result, SpaceTimeGrid, Trajectory};

/// Space-time GMRF priors from advection-diffusion SPDEs: simulation,
/// interpolation, joint solves and posterior sampling.
#[derive(Parser)]
#[command(name = "spde-gmrf", version)]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `[run] out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct DataArgs {
    /// Observation CSV; synthesized from the configured truth when absent.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Truth trajectory (STGF) for scoring.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a truth trajectory and noisy observations.
    Simulate {
        /// Also write this many prior members; member 0 is the truth.
        #[arg(long)]
        members: Option<usize>,
    },
    /// Optimal interpolation with the first-guess parameters.
    Interpolate(DataArgs),
    /// Joint state and parameter solve.
    JointSolve(DataArgs),
    /// Conditional ensemble around the interpolated mean.
    SamplePosterior {
        #[command(flatten)]
        data: DataArgs,
        /// Also write every member.
        #[arg(long)]
        members: bool,
    },
    /// Fit parameters to trajectories by likelihood descent.
    Fit {
        /// Trajectory files (STGF); sampled from the configured truth when absent.
        #[arg(long, num_args = 1..)]
        trajectories: Vec<PathBuf>,
    },
    /// Score an estimate against a truth.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Dense vs sparse direct vs PCG timing report.
    Benchmark,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Interpolate(_) => "interpolate",
            Command::JointSolve(_) => "joint-solve",
            Command::SamplePosterior { .. } => "sample-posterior",
            Command::Fit { .. } => "fit",
            Command::Evaluate { .. } => "evaluate",
            Command::Benchmark => "benchmark",
        }
    }
}

type Extras = Vec<(&'static str, String)>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let exec = match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(1) => Execution::Sequential,
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Execution::Parallel
        }
        None => Execution::default(),
    };
    let threads = cli.threads.map_or_else(|| "default".to_string(), |n| n.to_string());
    let command = cli.command.name();

    if let Command::Evaluate { estimate, truth } = &cli.command {
        let resolved = match &cli.config {
            Some(p) => ConfigFile::load(p).map_err(as_config)?,
            None => ConfigFile::parse("", ".")?,
        };
        let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        let x = read_field(estimate).map_err(as_config)?;
        let t = read_field(truth).map_err(as_config)?;
        if x.dims() != t.dims() || x.dims().len() != 3 {
            return Err(Error::Config(format!("estimate dims {:?} vs truth dims {:?}", x.dims(), t.dims())));
        }
        let d = t.dims();
        let g = SpaceTimeGrid::unit(d[2], d[1], d[0]).map_err(as_config)?;
        let m = evaluate(&Trajectory::from_field(g, &x)?, &Trajectory::from_field(g, &t)?)?;
        write_metrics(&out, &m)?;
        let mut extra = vec![("threads", threads)];
        extra.extend(input_hash("estimate", estimate)?);
        extra.extend(input_hash("truth", truth)?);
        write_manifest(&out, command, &resolved, &extra)?;
        println!("mu = {:.4}, sigma = {:.4}, rmse = {:.4e}", m.mu, m.sigma, m.global_rmse);
        return Ok(());
    }

    let path = cli.config.as_ref().ok_or_else(|| Error::Config(format!("{command} needs --config")))?;
    let file = ConfigFile::load(path).map_err(as_config)?;
    let cfg = ExperimentConfig::from_file(&file, cli.seed, cli.out_dir.as_deref(), exec)?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|source| Error::Io { path: out.clone(), source })?;
    let mut extra: Extras = vec![("threads", threads)];

    match &cli.command {
        Command::Simulate { members } => {
            let theta = cfg.theta()?;
            let twin = synthesize(&theta, cfg.initial, cfg.pattern, cfg.noise_var, cfg.seed)?;
            write_field(&twin.truth.to_field(), out.join("truth.stgf"))?;
            twin.obs.write_csv(out.join("obs.csv"))?;
            write_params(&theta, out.join("theta"))?;
            let frac = observed_fraction(twin.obs.mask());
            extra.push(("observed_fraction", format!("{frac}")));
            if let Some(n) = *members {
                let ens = PriorModel::new(&theta, cfg.initial)?.sample(n, cfg.seed, cfg.exec)?;
                write_members(&out.join("members"), &ens.members)?;
                extra.push(("members", n.to_string()));
            }
            println!("{} observations ({:.1}% of cells)", twin.obs.len(), 100.0 * frac);
        }
        Command::Interpolate(data) => {
            let (obs, truth) = load_data(&cfg, data, &mut extra)?;
            let theta = cfg.theta_guess()?;
            let q = assemble_block_precision(&theta, cfg.initial)?;
            let sol = oi_solve_detailed(&q, &obs, 1.0, cfg.method)?;
            write_field(&sol.x.to_field(), out.join("x_star.stgf"))?;
            extra.push(("iterations", sol.iterations.to_string()));
            extra.push(("relative_residual", format!("{:e}", sol.relative_residual)));
            score(&out, &sol.x, truth.as_ref())?;
        }
        Command::JointSolve(data) => {
            let (obs, truth) = load_data(&cfg, data, &mut extra)?;
            let theta = cfg.theta_guess()?;
            let result = run_solver(&Trajectory::zeros(cfg.grid), &theta, &obs, &cfg.solver);
            let run = match result {
                Ok(r) => r,
                Err(abort) => {
                    abort.diagnostics.write_csv(out.join("diagnostics.csv"))?;
                    extra.push(("aborted", abort.to_string()));
                    write_manifest(&out, command, &cfg.resolved, &extra)?;
                    return Err(abort.error);
                }
            };
            write_field(&run.x.to_field(), out.join("x_star.stgf"))?;
            write_params(&run.theta, out.join("theta"))?;
            run.diagnostics.write_csv(out.join("diagnostics.csv"))?;
            if let Some(last) = run.diagnostics.costs().last() {
                extra.push(("final_cost", format!("{last:e}")));
            }
            score(&out, &run.x, truth.as_ref())?;
        }
        Command::SamplePosterior { data, members } => {
            let (obs, truth) = load_data(&cfg, data, &mut extra)?;
            let theta = cfg.theta_guess()?;
            let q = assemble_block_precision(&theta, cfg.initial)?;
            let x_star = oi_solve_detailed(&q, &obs, 1.0, cfg.method)?.x;
            let ens = conditional_sample(&x_star, &theta, &obs, &cfg.conditional())?;
            let (mean, std) = ensemble_stats(&ens)?;
            write_field(&x_star.to_field(), out.join("x_star.stgf"))?;
            write_field(&mean.to_field(), out.join("mean.stgf"))?;
            write_field(&std.to_field(), out.join("std.stgf"))?;
            if *members {
                write_members(&out.join("members"), &ens.members)?;
            }
            extra.push(("members", ens.members.len().to_string()));
            score(&out, &x_star, truth.as_ref())?;
        }
        Command::Fit { trajectories } => {
            let xs = if trajectories.is_empty() {
                let model = PriorModel::new(&cfg.theta()?, cfg.initial)?;
                model.sample(cfg.n_trajectories, cfg.seed, cfg.exec)?.members
            } else {
                let mut xs = Vec::with_capacity(trajectories.len());
                for p in trajectories {
                    let f = read_field(p).map_err(as_config)?;
                    xs.push(Trajectory::from_field(cfg.grid, &f).map_err(as_config)?);
                    extra.extend(input_hash("trajectory", p)?);
                }
                xs
            };
            let start = cfg.theta_guess()?;
            let fit = fit_params(&xs, &start, &cfg.fit)?;
            write_params(&fit.theta, out.join("theta"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in fit.loss_curve.iter().enumerate() {
                csv.push_str(&format!("{i},{l:e}\n"));
            }
            write_text(&out.join("loss.csv"), &csv)?;
            let p = fit.theta.mean();
            extra.push(("best_step", fit.best_step.to_string()));
            extra.push(("best_loss", format!("{:e}", fit.best_loss)));
            extra.push(("final_nll", format!("{:e}", mean_nll(&xs, &fit.theta, cfg.fit.initial, cfg.exec)?)));
            println!(
                "best loss {:.4} at step {}; kappa {:.4}, tau {:.4}, m = ({:.3}, {:.3})",
                fit.best_loss, fit.best_step, p.kappa, p.tau, p.m_u, p.m_v
            );
        }
        Command::Benchmark => {
            let report = benchmark(&cfg.bench)?;
            report.write_csv(out.join("benchmark.csv"))?;
            extra.push(("max_disagreement", format!("{:e}", report.max_disagreement())));
            for r in &report.rows {
                if r.skipped {
                    println!("{:>3} {:>7} {:<13} skipped", r.side, r.dim, r.method.name());
                } else {
                    println!("{:>3} {:>7} {:<13} {:>10.4}s", r.side, r.dim, r.method.name(), r.wall_seconds);
                }
            }
        }
        Command::Evaluate { .. } => unreachable!(),
    }
    write_manifest(&out, command, &cfg.resolved, &extra)?;
    Ok(())
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn input_hash(key: &'static str, path: &Path) -> Result<Extras> {
    let bytes = std::fs::read(path).map_err(|source| Error::Config(format!("{}: {source}", path.display())))?;
    Ok(vec![(key, format!("{} sha256={}", path.display(), sha256_hex(&bytes)))])
}

/// Observations and, when known, the truth they came from.
fn load_data(
    cfg: &ExperimentConfig,
    data: &DataArgs,
    extra: &mut Extras,
) -> Result<(ObservationSet, Option<Trajectory>)> {
    let truth = match &data.truth {
        Some(p) => {
            extra.extend(input_hash("truth", p)?);
            let f = read_field(p).map_err(as_config)?;
            Some(Trajectory::from_field(cfg.grid, &f).map_err(as_config)?)
        }
        None => None,
    };
    match &data.obs {
        Some(p) => {
            extra.extend(input_hash("obs", p)?);
            Ok((ObservationSet::read_csv(cfg.grid, p).map_err(as_config)?, truth))
        }
        None => {
            let twin = synthesize(&cfg.theta()?, cfg.initial, cfg.pattern, cfg.noise_var, cfg.seed)?;
            extra.push(("observed_fraction", format!("{}", observed_fraction(twin.obs.mask()))));
            Ok((twin.obs, truth.or(Some(twin.truth))))
        }
    }
}

fn score(out: &Path, x: &Trajectory, truth: Option<&Trajectory>) -> Result<()> {
    if let Some(t) = truth {
        let m = evaluate(x, t)?;
        write_metrics(out, &m)?;
        println!("mu = {:.4}, sigma = {:.4}, rmse = {:.4e}", m.mu, m.sigma, m.global_rmse);
    }
    Ok(())
}

fn write_metrics(out: &Path, m: &Metrics) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
    let text = format!(
        "mu,sigma,global_rmse,lambda_x_approx,lambda_t_approx\n{},{},{},{},{}\n",
        m.mu,
        m.sigma,
        m.global_rmse,
        opt(m.lambda_x),
        opt(m.lambda_t)
    );
    write_text(&out.join("metrics.csv"), &text)?;
    let mut slabs = String::from("t,score\n");
    for (t, s) in m.slab_scores.iter().enumerate() {
        slabs.push_str(&format!("{t},{}\n", opt(*s)));
    }
    write_text(&out.join("slab_scores.csv"), &slabs)?;
    let excluded = m.excluded_slabs();
    if !excluded.is_empty() {
        eprintln!("warning: slabs {excluded:?} have zero truth and are left out of the score");
    }
    Ok(())
}

fn write_members(dir: &Path, members: &[Trajectory]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    for (i, m) in members.iter().enumerate() {
        write_field(&m.to_field(), dir.join(format!("member_{i:04}.stgf")))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}
