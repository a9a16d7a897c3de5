use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fixdiff_cli::checks::{run_suite, Hooks, Suite};
use fixdiff_cli::config::{Config, ConfigError};
use fixdiff_cli::experiments::elastic::{run_elastic, ElasticConfig};
use fixdiff_cli::experiments::poisoning::{run_poisoning, PoisoningConfig};
use fixdiff_cli::experiments::ExpOutput;
use fixdiff_cli::pool::build_pool;
use fixdiff_cli::record::format_csv;
use fixdiff_core::linalg::vecops;
use fixdiff_core::problems::{build_elastic_net, gen_elastic_net};
use fixdiff_core::solver::{fixed_point_solve, support_identification, support_pattern, ZERO_THRESHOLD};

#[derive(Parser)]
#[command(name = "fixdiff", version, about = "Derivatives of nonsmooth and stochastic fixed points")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment and write runs.csv plus plots.
    Exp {
        #[command(subcommand)]
        which: Exp,
    },
    /// Run a property suite: oracle, excess, pwl-bound, adjoint or rates.
    Check {
        suite: String,
        /// Negate AID-FP inside the oracle suite (mutation test hook).
        #[arg(long, hide = true)]
        inject_aid_sign_flip: bool,
    },
    /// Solve one elastic-net fixed point and print solver statistics.
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct ExpArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides run.seeds.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Subcommand)]
enum Exp {
    Elastic(ExpArgs),
    Poisoning(ExpArgs),
}

enum Outcome {
    Ok,
    ChecksFailed,
}

fn load(path: &Path, seeds: Option<u64>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seeds {
        cfg.set("run.seeds", s);
    }
    Ok(cfg)
}

fn write_outputs(dir: &Path, out: &ExpOutput) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join("runs.csv");
    std::fs::write(&csv, format_csv(&out.records)).with_context(|| format!("writing {}", csv.display()))?;
    for (name, body) in &out.files {
        let p = dir.join(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("wrote {} rows to {}", out.records.len(), csv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.cmd {
        Cmd::Exp { which } => {
            let pool = build_pool()?;
            let (args, out) = match which {
                Exp::Elastic(a) => {
                    let cfg = load(&a.config, a.seeds)?;
                    let ec = ElasticConfig::from_config(&cfg)?;
                    cfg.finish()?;
                    let out = pool.install(|| run_elastic(&ec))?;
                    (a, out)
                }
                Exp::Poisoning(a) => {
                    let cfg = load(&a.config, a.seeds)?;
                    let pc = PoisoningConfig::from_config(&cfg)?;
                    cfg.finish()?;
                    let out = pool.install(|| run_poisoning(&pc))?;
                    (a, out)
                }
            };
            write_outputs(&args.out, &out)?;
            Ok(Outcome::Ok)
        }
        Cmd::Check { suite, inject_aid_sign_flip } => {
            let suite: Suite = suite.parse().map_err(|e: String| ConfigError::new("suite", e))?;
            let pool = build_pool()?;
            let lines = pool.install(|| run_suite(suite, Hooks { flip_aid_fp_sign: inject_aid_sign_flip }));
            for l in &lines {
                println!("{} {l}", suite.name());
            }
            Ok(if lines.iter().all(|l| l.pass) { Outcome::Ok } else { Outcome::ChecksFailed })
        }
        Cmd::Solve { config } => {
            let cfg = Config::load(&config)?;
            solve(&cfg)?;
            Ok(Outcome::Ok)
        }
    }
}

/// `solve` reads `problem.{n,d,informative,correlated,seed,c,l1,l2}` and
/// `solver.iterations`.
fn solve(cfg: &Config) -> Result<()> {
    let n = cfg.positive_usize_or("problem.n", 100)?;
    let d = cfg.positive_usize_or("problem.d", 100)?;
    let inf = cfg.usize_or("problem.informative", 30)?;
    if inf > d {
        return Err(ConfigError::new("problem.informative", format!("exceeds d = {d}")).into());
    }
    let correlated = cfg.bool_or("problem.correlated", false)?;
    let seed = cfg.u64_or("problem.seed", 0)?;
    let c = cfg.positive_f64_or("problem.c", 1.0)?;
    let l1 = cfg.f64_or("problem.l1", 0.01)?;
    let l2 = cfg.positive_f64_or("problem.l2", 1.0)?;
    if l1 < 0.0 {
        return Err(ConfigError::new("problem.l1", "must be nonnegative").into());
    }
    let iters = cfg.positive_usize_or("solver.iterations", 1000)?;
    cfg.finish()?;

    let (tr, va, _) = gen_elastic_net(seed, n, d, inf, correlated)?;
    let spec = build_elastic_net(&tr, &va, c)?;
    let lam = [l1, l2];
    let q = spec.contraction(&lam).q;
    let traj = fixed_point_solve(&*spec.phi, &lam, &vec![0.0; d], iters, true)?;
    let w = traj.last();
    let support = support_pattern(w, ZERO_THRESHOLD).iter().filter(|b| **b).count();
    println!("q = {q}");
    println!("iterations = {iters}");
    println!("final residual = {:e}", traj.residuals().last().copied().unwrap_or(0.0));
    println!("support size = {support} of {d}");
    match support_identification(&traj, w, ZERO_THRESHOLD) {
        Some(t) => println!("support fixed from iteration {t}"),
        None => println!("support not settled"),
    }
    println!("validation loss = {}", spec.upper.eval(w, &lam));
    println!("|w| = {}", vecops::norm(w));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
