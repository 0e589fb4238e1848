use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fisher_market::consumer::{self, DEFAULT_REL_STEP};
use fisher_market::experiments::{self, ExperimentConfig, FamilyMix};
use fisher_market::tatonnement::{self, KernelSpec, RunOptions, StepPolicy};
use fisher_market::{oracle, potentials, Market, PriceVector, Result};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Suite {
    Identities,
    Shephard,
    Subgradient,
    Bounds,
}

pub struct Outcome {
    pub name: &'static str,
    pub worst: f64,
    pub limit: f64,
    /// `worst` counts violations rather than measuring an error.
    pub tally: bool,
}

impl Outcome {
    fn new(name: &'static str, limit: f64) -> Self {
        Outcome {
            name,
            worst: 0.0,
            limit,
            tally: false,
        }
    }

    fn tally(name: &'static str) -> Self {
        Outcome {
            tally: true,
            ..Outcome::new(name, 0.5)
        }
    }

    pub fn describe(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        if self.tally {
            format!("{verdict} {}: {}", self.name, self.worst)
        } else {
            format!("{verdict} {}: worst {:.3e} (limit {:.0e})", self.name, self.worst, self.limit)
        }
    }

    fn observe(&mut self, value: f64) {
        if value.is_nan() {
            self.worst = f64::INFINITY;
        } else {
            self.worst = self.worst.max(value);
        }
    }

    pub fn passed(&self) -> bool {
        self.worst < self.limit
    }
}

fn markets(seed: u64, count: usize, mix: FamilyMix, goods: usize) -> Result<Vec<Market>> {
    let config = ExperimentConfig {
        buyers: 5,
        goods,
        family_mix: mix,
        ..ExperimentConfig::default()
    };
    (0..count)
        .map(|r| experiments::generate_market(&config, experiments::replication_seed(seed, r as u64)))
        .collect()
}

fn random_prices(rng: &mut ChaCha8Rng, m: usize) -> Result<PriceVector> {
    PriceVector::new((0..m).map(|_| rng.gen_range(0.2..5.0)).collect())
}

pub fn run(suite: Suite, seed: u64, instances: usize, market: Option<&Market>) -> Result<Vec<Outcome>> {
    let mix = match suite {
        Suite::Identities => FamilyMix::WithLinear,
        _ => FamilyMix::BoundedE,
    };
    let pool = match market {
        Some(m) => vec![m.clone(); instances.max(1)],
        None => markets(seed, instances, mix, 4)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match suite {
        Suite::Identities => {
            let mut out = Outcome::new("consumer identities", 1e-8);
            for m in &pool {
                let p = random_prices(&mut rng, m.goods())?;
                for b in m.buyers() {
                    let report = consumer::identity_suite(b.utility(), &p, b.budget(), out.limit)?;
                    out.observe(report.max_violation());
                }
            }
            Ok(vec![out])
        }
        Suite::Shephard => {
            let mut out = Outcome::new("shephard lemma", 1e-4);
            for m in &pool {
                let p = random_prices(&mut rng, m.goods())?;
                for b in m.buyers().iter().filter(|b| b.utility().has_smooth_demand()) {
                    out.observe(consumer::shephard_check(b.utility(), &p, b.budget(), DEFAULT_REL_STEP)?);
                }
            }
            Ok(vec![out])
        }
        Suite::Subgradient => {
            let mut out = Outcome::new("potential gradient = -excess demand", 1e-4);
            for m in pool.iter().filter(|m| m.has_smooth_demand()) {
                let p = random_prices(&mut rng, m.goods())?;
                out.observe(potentials::subgradient_check(m, &p, DEFAULT_REL_STEP)?);
            }
            Ok(vec![out])
        }
        Suite::Bounds => bounds(&pool, &mut rng),
    }
}

fn bounds(pool: &[Market], rng: &mut ChaCha8Rng) -> Result<Vec<Outcome>> {
    let mut envelope = Outcome::tally("descent envelope violations");
    let mut lemmas = Outcome::tally("step lemma violations");
    let mut demand = Outcome::tally("demand bound violations");
    let mut inapplicable = Outcome::tally("runs outside the bound hypotheses");
    let opts = RunOptions {
        max_iters: 1000,
        record_buyer_demands: true,
        ..RunOptions::default()
    };
    for m in pool.iter().filter(|m| m.has_smooth_demand()) {
        let p0 = PriceVector::new((0..m.goods()).map(|_| rng.gen_range(2.0..3.0)).collect())?;
        let traj = tatonnement::run(m, &p0, KernelSpec::entropic(), StepPolicy::InformedMixed, &opts)?;
        let eq = oracle::solve_by_descent(m, &p0, oracle::DEFAULT_DESCENT_STEPS)?;
        let report = tatonnement::verify_descent_bound(&traj, m, &eq.prices)?;
        if !report.applicable {
            inapplicable.worst += 1.0;
        }
        envelope.worst += report.envelope_violations as f64;
        let steps = tatonnement::verify_step_lemmas(&traj);
        let leontief = steps.leontief.map_or(0, |l| l.violations);
        lemmas.worst += (steps.price_ratio.violations
            + steps.relative_change.violations
            + steps.kl_quadratic.violations
            + leontief) as f64;
        demand.worst += tatonnement::verify_demand_bounds(&traj, m).violations as f64;
    }
    Ok(vec![envelope, lemmas, demand, inapplicable])
}
