use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fisher_market::experiments::{self, ExperimentConfig, FamilyMix};
use fisher_market::oracle::{self, EquilibriumResult};
use fisher_market::tatonnement::{self, fmt_f64, KernelSpec, RunOptions, StepPolicy};
use fisher_market::{Error, Family, Market, PriceVector};

mod suites;

#[derive(Parser)]
#[command(name = "fisher", version, about = "Fisher market equilibria and tatonnement dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute equilibrium prices for a market file.
    Solve {
        #[arg(long)]
        market: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Descent step budget.
        #[arg(long, default_value_t = oracle::DEFAULT_DESCENT_STEPS)]
        max_iters: usize,
    },
    /// Run one tatonnement trajectory.
    Simulate {
        #[arg(long)]
        market: PathBuf,
        #[arg(long, value_enum, default_value_t = KernelArg::Entropic)]
        kernel: KernelArg,
        /// Fixed step parameter.
        #[arg(long, conflicts_with = "policy")]
        gamma: Option<f64>,
        /// informed | five-times-max-demand | doubling | naive:<T>
        #[arg(long)]
        policy: Option<String>,
        /// Comma-separated initial prices (default: all ones).
        #[arg(long, value_delimiter = ',')]
        p0: Option<Vec<f64>>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = tatonnement::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = tatonnement::DEFAULT_MAX_ITERS)]
        max_iters: usize,
    },
    /// Run seeded replications and write summary.csv and trajectories.
    Batch {
        #[command(flatten)]
        common: ExperimentArgs,
        #[arg(long, value_enum, default_value_t = MixArg::Bounded)]
        mix: MixArg,
        #[arg(long, default_value_t = 2.0)]
        gamma: f64,
        #[arg(long, default_value_t = 100)]
        replications: usize,
    },
    /// Convergence fractions over elasticity E and step parameter gamma.
    Heatmap {
        #[command(flatten)]
        common: ExperimentArgs,
        #[arg(long, default_value_t = 20)]
        replications: usize,
        #[arg(long, value_delimiter = ',')]
        elasticities: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Check identities and bounds on seeded instances.
    Verify {
        #[arg(long, value_enum)]
        suite: suites::Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict the suite to this market's buyers.
        #[arg(long)]
        market: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    buyers: usize,
    #[arg(long, default_value_t = 5)]
    goods: usize,
    #[arg(long, default_value_t = tatonnement::DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = tatonnement::DEFAULT_MAX_ITERS)]
    max_iters: usize,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
}

impl ExperimentArgs {
    fn config(&self) -> ExperimentConfig {
        ExperimentConfig {
            buyers: self.buyers,
            goods: self.goods,
            tol: self.tol,
            max_iters: self.max_iters,
            seed: self.seed,
            ..ExperimentConfig::default()
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, String> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err("--jobs must be at least 1".into());
            }
            builder = builder.num_threads(j);
        }
        builder.build().map_err(|e| e.to_string())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Entropic,
    Euclidean,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixArg {
    /// CES, Cobb-Douglas and Leontief buyers.
    Bounded,
    /// As `bounded`, plus linear buyers.
    Linear,
}

enum Failure {
    Usage(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn load_market(path: &Path) -> Result<Market, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    Market::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn parse_policy(s: &str) -> Result<StepPolicy, Failure> {
    match s {
        "informed" | "informed-mixed" => Ok(StepPolicy::InformedMixed),
        "five-times-max-demand" => Ok(StepPolicy::FiveTimesMaxDemand),
        "doubling" => Ok(StepPolicy::DoublingNaive),
        _ => match s.strip_prefix("naive:").map(str::parse::<usize>) {
            Some(Ok(t)) => Ok(StepPolicy::NaiveHorizon(t)),
            _ => Err(Failure::Usage(format!(
                "unknown policy '{s}'; expected informed, five-times-max-demand, doubling or naive:<T>"
            ))),
        },
    }
}

fn fmt_residual(r: f64) -> String {
    if r == 0.0 {
        "0".to_string()
    } else {
        format!("{r:.3e}")
    }
}

fn solve_market(market: &Market, max_steps: usize) -> Result<EquilibriumResult, Failure> {
    if market.buyers().iter().all(|b| b.utility().family() == Family::CobbDouglas) {
        return Ok(oracle::cobb_douglas_equilibrium(market)?);
    }
    let level = market.total_budget() / market.supply().iter().sum::<f64>();
    let p0 = PriceVector::uniform(market.goods(), level)?;
    Ok(oracle::solve_by_descent(market, &p0, max_steps)?)
}

fn write_prices(path: &Path, prices: &[f64]) -> Result<(), Failure> {
    let mut text = String::from("good,price\n");
    for (j, p) in prices.iter().enumerate() {
        text.push_str(&format!("{},{}\n", j + 1, fmt_f64(*p)));
    }
    fs::write(path, text)?;
    Ok(())
}

fn solve(market: &Path, out: &Path, max_iters: usize) -> Result<(), Failure> {
    let market = load_market(market)?;
    let eq = solve_market(&market, max_iters)?;
    let shown: Vec<String> = eq.prices.iter().map(|p| format!("{p:.6}")).collect();
    println!("p* = [{}], residual {}", shown.join(", "), fmt_residual(eq.residual));
    println!("method: {}", eq.method.as_str());
    if !eq.boundary_goods.is_empty() {
        let goods: Vec<String> = eq.boundary_goods.iter().map(|j| (j + 1).to_string()).collect();
        println!("zero-price goods: {}", goods.join(", "));
    }
    if !eq.converged {
        println!("warning: residual target not met");
    }
    fs::create_dir_all(out)?;
    write_prices(&out.join("prices.csv"), &eq.prices)
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    market: &Path,
    kernel: KernelArg,
    gamma: Option<f64>,
    policy: Option<&str>,
    p0: Option<Vec<f64>>,
    out: &Path,
    tol: f64,
    max_iters: usize,
) -> Result<(), Failure> {
    let market = load_market(market)?;
    let policy = match (gamma, policy) {
        (Some(g), None) => StepPolicy::Fixed(g),
        (None, Some(p)) => parse_policy(p)?,
        (None, None) => return Err(Failure::Usage("one of --gamma or --policy is required".into())),
        (Some(_), Some(_)) => return Err(Failure::Usage("--gamma and --policy are exclusive".into())),
    };
    let p0 = match p0 {
        Some(p) => PriceVector::new(p)?,
        None => PriceVector::uniform(market.goods(), 1.0)?,
    };
    let kernel = match kernel {
        KernelArg::Entropic => KernelSpec::entropic(),
        KernelArg::Euclidean => KernelSpec::euclidean(),
    };
    let opts = RunOptions {
        max_iters,
        tol,
        ..RunOptions::default()
    };
    let traj = tatonnement::run(&market, &p0, kernel, policy, &opts)?;
    fs::create_dir_all(out)?;
    let file = fs::File::create(out.join("trajectory.csv"))?;
    traj.write_csv(std::io::BufWriter::new(file))?;
    println!(
        "status {} after {} iterations, residual {}",
        traj.status.as_str(),
        traj.iterations(),
        fmt_residual(traj.final_residual())
    );
    Ok(())
}

fn batch(common: &ExperimentArgs, mix: MixArg, gamma: f64, replications: usize) -> Result<(), Failure> {
    let config = ExperimentConfig {
        family_mix: match mix {
            MixArg::Bounded => FamilyMix::BoundedE,
            MixArg::Linear => FamilyMix::WithLinear,
        },
        gamma,
        replications,
        ..common.config()
    };
    let pool = common.pool().map_err(Failure::Usage)?;
    let summary = pool.install(|| experiments::run_batch(&config, Some(&common.out)))?;
    for (seed, err) in &summary.errors {
        eprintln!("replication seed {seed}: {err}");
    }
    println!(
        "{} replications, convergence fraction {:.4}, non-convergence fraction {:.4}",
        replications,
        summary.convergence_fraction(),
        summary.non_convergence_fraction()
    );
    Ok(())
}

fn heatmap(
    common: &ExperimentArgs,
    replications: usize,
    elasticities: Option<Vec<f64>>,
    gammas: Option<Vec<f64>>,
) -> Result<(), Failure> {
    let config = ExperimentConfig {
        replications,
        ..common.config()
    };
    let es = elasticities.unwrap_or_else(experiments::default_heatmap_elasticities);
    let gs = gammas.unwrap_or_else(experiments::default_heatmap_gammas);
    let pool = common.pool().map_err(Failure::Usage)?;
    let map = pool.install(|| experiments::heatmap(&config, &es, &gs))?;
    fs::create_dir_all(&common.out)?;
    map.write_csv(fs::File::create(common.out.join("heatmap.csv"))?)?;
    for (e, row) in map.elasticities.iter().zip(&map.fractions) {
        let cells: Vec<String> = row.iter().map(|f| format!("{f:.2}")).collect();
        println!("E={e}: {}", cells.join(" "));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve {
            market,
            out,
            max_iters,
        } => solve(&market, &out, max_iters),
        Command::Simulate {
            market,
            kernel,
            gamma,
            policy,
            p0,
            out,
            tol,
            max_iters,
        } => simulate(&market, kernel, gamma, policy.as_deref(), p0, &out, tol, max_iters),
        Command::Batch {
            common,
            mix,
            gamma,
            replications,
        } => batch(&common, mix, gamma, replications),
        Command::Heatmap {
            common,
            replications,
            elasticities,
            gammas,
        } => heatmap(&common, replications, elasticities, gammas),
        Command::Verify {
            suite,
            seed,
            market,
            instances,
        } => {
            let market = market.as_deref().map(load_market).transpose()?;
            let outcomes = suites::run(suite, seed, instances, market.as_ref())?;
            let mut ok = true;
            for o in &outcomes {
                println!("{}", o.describe());
                ok &= o.passed();
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Verification)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
