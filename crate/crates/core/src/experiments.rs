//! Seeded random markets, batch tatonnement runs, rate fitting and the
//! elasticity by step-size heatmap.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{Buyer, Market, PriceVector, UtilityFunction};
use crate::oracle;
use crate::tatonnement::{self, fmt_f64, KernelSpec, RunOptions, StepPolicy, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        rng.gen_range(self.lo..self.hi)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.hi > self.lo) {
            return Err(Error::invalid(format!(
                "{name} range [{}, {}] must have positive width",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

/// Two-branch law for CES rho: with probability `p_positive` uniform on
/// `positive`, otherwise uniform on `negative`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoLaw {
    pub p_positive: f64,
    pub positive: Range,
    pub negative: Range,
}

impl Default for RhoLaw {
    fn default() -> Self {
        RhoLaw {
            p_positive: 0.5,
            positive: Range::new(0.25, 0.75),
            negative: Range::new(-101.0, -1.0),
        }
    }
}

impl RhoLaw {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if rng.gen_bool(self.p_positive) {
            self.positive.sample(rng)
        } else {
            self.negative.sample(rng)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyMix {
    /// Uniform over CES, Cobb-Douglas and Leontief.
    BoundedE,
    /// Uniform over CES, Cobb-Douglas, Leontief and linear.
    WithLinear,
    /// Every buyer CES with the same rho.
    PureCes { rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub buyers: usize,
    pub goods: usize,
    pub valuations: Range,
    pub budgets: Range,
    pub initial_prices: Range,
    pub family_mix: FamilyMix,
    pub rho_law: RhoLaw,
    pub gamma: f64,
    pub kernel: KernelSpec,
    pub max_iters: usize,
    pub tol: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            buyers: 10,
            goods: 5,
            valuations: Range::new(2.0, 3.0),
            budgets: Range::new(2.0, 3.0),
            initial_prices: Range::new(2.0, 3.0),
            family_mix: FamilyMix::BoundedE,
            rho_law: RhoLaw::default(),
            gamma: 2.0,
            kernel: KernelSpec::entropic(),
            max_iters: tatonnement::DEFAULT_MAX_ITERS,
            tol: tatonnement::DEFAULT_TOL,
            replications: 100,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buyers == 0 || self.goods == 0 {
            return Err(Error::invalid("need at least one buyer and one good"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        self.valuations.validate("valuation")?;
        self.budgets.validate("budget")?;
        self.initial_prices.validate("initial price")?;
        if self.budgets.lo <= 0.0 || self.initial_prices.lo <= 0.0 || self.valuations.lo < 0.0 {
            return Err(Error::invalid("budgets and prices must be positive, valuations non-negative"));
        }
        if !(0.0..=1.0).contains(&self.rho_law.p_positive) {
            return Err(Error::invalid("rho branch probability must lie in [0, 1]"));
        }
        self.rho_law.positive.validate("positive rho")?;
        self.rho_law.negative.validate("negative rho")?;
        if !(self.gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        Ok(())
    }
}

/// Seed of replication `r` under a master seed. Counter-based, so it does
/// not depend on execution order.
pub fn replication_seed(master: u64, r: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(r);
    rng.next_u64()
}

fn sample_utility(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<UtilityFunction> {
    let v: Vec<f64> = (0..config.goods).map(|_| config.valuations.sample(rng)).collect();
    let families = match config.family_mix {
        FamilyMix::PureCes { rho } => return UtilityFunction::ces(v, rho),
        FamilyMix::BoundedE => 3,
        FamilyMix::WithLinear => 4,
    };
    match rng.gen_range(0..families) {
        0 => {
            let rho = config.rho_law.sample(rng);
            UtilityFunction::ces(v, rho)
        }
        1 => UtilityFunction::cobb_douglas(v),
        2 => UtilityFunction::leontief(v),
        _ => UtilityFunction::linear(v),
    }
}

fn generate_with(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Market> {
    let buyers = (0..config.buyers)
        .map(|_| {
            let u = sample_utility(config, rng)?;
            Buyer::new(u, config.budgets.sample(rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Market::new(buyers, None)
}

/// Random market for `seed`; identical seeds give identical markets.
pub fn generate_market(config: &ExperimentConfig, seed: u64) -> Result<Market> {
    config.validate()?;
    generate_with(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Market and initial prices for `seed`. The market part equals
/// `generate_market(config, seed)`.
pub fn generate_instance(config: &ExperimentConfig, seed: u64) -> Result<(Market, PriceVector)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let market = generate_with(config, &mut rng)?;
    let p0 = (0..config.goods)
        .map(|_| config.initial_prices.sample(&mut rng))
        .collect();
    Ok((market, PriceVector::new(p0)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub alpha: f64,
    pub c: f64,
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 10;

/// Least-squares fit of `ln gap = ln C - alpha ln t` over points with `t >= 1`
/// and positive gap.
pub fn fit_power_law(ts: &[f64], gaps: &[f64]) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(gaps)
        .filter(|(t, g)| **t >= 1.0 && **g > 0.0 && g.is_finite())
        .map(|(t, g)| (t.ln(), g.ln()))
        .collect();
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::FitUnavailable(format!(
            "{} usable points, need {MIN_FIT_POINTS}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::FitUnavailable("fit window spans a single t".into()));
    }
    let slope = sxy / sxx;
    Ok(RateFit {
        alpha: -slope,
        c: (my - slope * mx).exp(),
        points: pts.len(),
    })
}

/// Fits the decay of `phi(p^t) - phi*` over the tail half of the steps taken
/// before the residual first drops below `10 tol`.
pub fn fit_rate(traj: &Trajectory, phi_star: f64) -> Result<RateFit> {
    let cutoff = traj
        .records
        .iter()
        .position(|r| crate::numeric::max_abs(&r.excess) < 10.0 * traj.tol)
        .unwrap_or(traj.records.len());
    let window = &traj.records[..cutoff];
    let tail = &window[window.len() / 2..];
    let ts: Vec<f64> = tail.iter().map(|r| r.t as f64).collect();
    let gaps: Vec<f64> = tail.iter().map(|r| r.phi - phi_star).collect();
    fit_power_law(&ts, &gaps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub replication: usize,
    pub seed: u64,
    pub converged: bool,
    /// Cycle, or iteration cap with residual above `10 tol`.
    pub failed: bool,
    pub iters: usize,
    pub residual: f64,
    pub fit: Option<RateFit>,
    /// Largest substitution elasticity among the buyers.
    pub elasticity: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub runs: Vec<ReplicationSummary>,
    /// Replications that could not be run or written, with the reason.
    pub errors: Vec<(u64, String)>,
}

impl BatchSummary {
    pub fn convergence_fraction(&self) -> f64 {
        let total = self.runs.len() + self.errors.len();
        if total == 0 {
            return 0.0;
        }
        self.runs.iter().filter(|r| r.converged).count() as f64 / total as f64
    }

    pub fn non_convergence_fraction(&self) -> f64 {
        let total = self.runs.len() + self.errors.len();
        if total == 0 {
            return 0.0;
        }
        self.runs.iter().filter(|r| r.failed).count() as f64 / total as f64
    }

    /// `seed,converged,iters,residual,alpha,C,E,gamma`; fits that are
    /// unavailable leave `alpha` and `C` empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["seed", "converged", "iters", "residual", "alpha", "C", "E", "gamma"])?;
        for r in &self.runs {
            let (alpha, c) = match r.fit {
                Some(f) => (fmt_f64(f.alpha), fmt_f64(f.c)),
                None => (String::new(), String::new()),
            };
            w.write_record([
                r.seed.to_string(),
                r.converged.to_string(),
                r.iters.to_string(),
                fmt_f64(r.residual),
                alpha,
                c,
                fmt_f64(r.elasticity),
                fmt_f64(r.gamma),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One replication: generate, run, and fit the rate when the run converged.
pub fn run_replication(
    config: &ExperimentConfig,
    replication: usize,
) -> Result<(ReplicationSummary, Trajectory)> {
    let seed = replication_seed(config.seed, replication as u64);
    let (market, p0) = generate_instance(config, seed)?;
    let opts = RunOptions {
        max_iters: config.max_iters,
        tol: config.tol,
        ..RunOptions::default()
    };
    let traj = tatonnement::run(&market, &p0, config.kernel, StepPolicy::Fixed(config.gamma), &opts)?;
    let fit = if traj.converged() && market.has_smooth_demand() {
        let p_end = PriceVector::new(traj.final_prices().to_vec())?;
        oracle::solve_by_descent(&market, &p_end, oracle::DEFAULT_DESCENT_STEPS)
            .ok()
            .and_then(|eq| fit_rate(&traj, eq.potential).ok())
    } else {
        None
    };
    let summary = ReplicationSummary {
        replication,
        seed,
        converged: traj.converged(),
        failed: traj.failed_to_converge(),
        iters: traj.iterations(),
        residual: traj.final_residual(),
        fit,
        elasticity: market.max_substitution_elasticity(),
        gamma: config.gamma,
    };
    Ok((summary, traj))
}

/// Runs every replication on the current rayon pool. With `out_dir`, writes
/// `summary.csv` there and each trajectory to `out_dir/out/run_<seed>.csv`.
pub fn run_batch(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<BatchSummary> {
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("out"))?;
    }
    let outcomes: Vec<std::result::Result<ReplicationSummary, (u64, String)>> = (0..config
        .replications)
        .into_par_iter()
        .map(|r| {
            let seed = replication_seed(config.seed, r as u64);
            let (summary, traj) = run_replication(config, r).map_err(|e| (seed, e.to_string()))?;
            if let Some(dir) = out_dir {
                let path = dir.join("out").join(format!("run_{seed}.csv"));
                fs::File::create(&path)
                    .map_err(Error::from)
                    .and_then(|f| traj.write_csv(std::io::BufWriter::new(f)))
                    .map_err(|e| (seed, format!("{}: {e}", path.display())))?;
            }
            Ok(summary)
        })
        .collect();
    let mut summary = BatchSummary {
        runs: Vec::new(),
        errors: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok(r) => summary.runs.push(r),
            Err(e) => summary.errors.push(e),
        }
    }
    if let Some(dir) = out_dir {
        summary.write_csv(fs::File::create(dir.join("summary.csv"))?)?;
    }
    Ok(summary)
}

/// CES rho with substitution elasticity `e`: `rho = 1 - 1/e`.
pub fn rho_for_elasticity(e: f64) -> Result<f64> {
    if !(e > 0.0 && e < 1.0) {
        return Err(Error::invalid(format!(
            "heatmap elasticities must lie in (0, 1), got {e}"
        )));
    }
    Ok(1.0 - 1.0 / e)
}

pub fn default_heatmap_elasticities() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

pub fn default_heatmap_gammas() -> Vec<f64> {
    (1..=9).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub elasticities: Vec<f64>,
    pub gammas: Vec<f64>,
    /// `fractions[e][g]`: share of replications that converged.
    pub fractions: Vec<Vec<f64>>,
}

impl Heatmap {
    /// One `#` metadata line, then a header `E,1,2,...` and one row per E.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(
            writer,
            "# pure CES markets, every buyer rho = 1 - 1/E; cell = fraction of replications converged"
        )?;
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["E".to_string()];
        header.extend(self.gammas.iter().map(|g| g.to_string()));
        w.write_record(&header)?;
        for (e, row) in self.elasticities.iter().zip(&self.fractions) {
            let mut line = vec![e.to_string()];
            line.extend(row.iter().map(|f| fmt_f64(*f)));
            w.write_record(&line)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Convergence fraction for every `(E, gamma)` cell. Cell `(a, b)` uses
/// master seed `replication_seed(base.seed, a * |gammas| + b)`.
pub fn heatmap(base: &ExperimentConfig, elasticities: &[f64], gammas: &[f64]) -> Result<Heatmap> {
    let cells: Vec<(usize, usize)> = (0..elasticities.len())
        .flat_map(|a| (0..gammas.len()).map(move |b| (a, b)))
        .collect();
    let mut configs = Vec::with_capacity(cells.len());
    for &(a, b) in &cells {
        let config = ExperimentConfig {
            family_mix: FamilyMix::PureCes {
                rho: rho_for_elasticity(elasticities[a])?,
            },
            gamma: gammas[b],
            seed: replication_seed(base.seed, (a * gammas.len() + b) as u64),
            ..base.clone()
        };
        config.validate()?;
        configs.push(config);
    }
    let jobs: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..base.replications).map(move |r| (c, r)))
        .collect();
    let converged: Vec<Result<bool>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let config = &configs[c];
            let seed = replication_seed(config.seed, r as u64);
            let (market, p0) = generate_instance(config, seed)?;
            let opts = RunOptions {
                max_iters: config.max_iters,
                tol: config.tol,
                ..RunOptions::default()
            };
            let traj = tatonnement::run(&market, &p0, config.kernel, StepPolicy::Fixed(config.gamma), &opts)?;
            Ok(traj.converged())
        })
        .collect();
    let mut counts = vec![vec![0usize; gammas.len()]; elasticities.len()];
    for (&(c, _), ok) in jobs.iter().zip(converged) {
        if ok? {
            let (a, b) = cells[c];
            counts[a][b] += 1;
        }
    }
    let fractions = counts
        .iter()
        .map(|row| row.iter().map(|&k| k as f64 / base.replications as f64).collect())
        .collect();
    Ok(Heatmap {
        elasticities: elasticities.to_vec(),
        gammas: gammas.to_vec(),
        fractions,
    })
}
