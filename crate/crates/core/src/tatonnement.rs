//! Discrete tatonnement as mirror descent on the potential.
//!
//! The entropic update is `p_j <- p_j exp(z_j(p) / gamma)`; the Euclidean one
//! is `p_j <- max(p_j + z_j(p) / gamma, floor)`. `gamma` is the only step
//! parameter. The kernel scale (6 by default) enters only when checking the
//! `gamma * D_h(p* || p0) / t` bound, with `D_h = scale * KL`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::market::{Family, Market, PriceVector};
use crate::numeric::{generalized_kl, kl_term, max_abs};
use crate::potentials;

pub const DEFAULT_KL_SCALE: f64 = 6.0;
pub const DEFAULT_PRICE_FLOOR: f64 = 1e-12;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_CYCLE_WINDOW: usize = 64;
pub const CYCLE_REL_TOL: f64 = 1e-9;

/// Per-step price factor bound `e^{1/5}` under `gamma >= 5 max demand`.
const LOG_PRICE_FACTOR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    /// `D(x || y) = scale * sum x ln(x/y) - x + y`.
    EntropicKl { scale: f64 },
    /// `h = |x|^2 / 2`, with prices projected onto `p >= floor`.
    Euclidean { floor: f64 },
}

impl KernelSpec {
    pub fn entropic() -> Self {
        KernelSpec::EntropicKl {
            scale: DEFAULT_KL_SCALE,
        }
    }

    pub fn euclidean() -> Self {
        KernelSpec::Euclidean {
            floor: DEFAULT_PRICE_FLOOR,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::EntropicKl { scale } if !(scale > 0.0 && scale.is_finite()) => Err(
                Error::domain(format!("KL scale must be positive, got {scale}")),
            ),
            KernelSpec::Euclidean { floor } if !(floor > 0.0 && floor.is_finite()) => Err(
                Error::domain(format!("price floor must be positive, got {floor}")),
            ),
            _ => Ok(()),
        }
    }

    /// Bregman divergence `D(x || y)` of this kernel.
    pub fn divergence(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::EntropicKl { scale } => scale * generalized_kl(x, y),
            KernelSpec::Euclidean { .. } => {
                0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    Fixed(f64),
    /// Five times the maximum demand over the run. That maximum is unknown up
    /// front, so the informed mixed-market bound stands in for it and runs
    /// audit `5 * max recorded demand <= gamma` afterwards.
    FiveTimesMaxDemand,
    /// `e^{T/5} * sum(b) / min_j p0_j` for a known horizon `T`.
    NaiveHorizon(usize),
    /// `NaiveHorizon` restarted over epochs of length 1, 2, 4, ...
    DoublingNaive,
    /// Demand bound for mixed markets computed from initial demands.
    InformedMixed,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || gamma.is_nan() {
        return Err(Error::domain(format!("step parameter gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `p'_j = p_j exp(z_j(p) / gamma)`.
pub fn step_entropic(market: &Market, p: &PriceVector, gamma: f64) -> Result<PriceVector> {
    check_gamma(gamma)?;
    let z = potentials::excess_demand(market, p)?;
    entropic_update(p, &z, gamma)
}

fn entropic_update(p: &PriceVector, z: &[f64], gamma: f64) -> Result<PriceVector> {
    PriceVector::new(p.iter().zip(z).map(|(p, z)| p * (z / gamma).exp()).collect())
}

/// `p'_j = max(p_j + z_j(p) / gamma, floor)`.
pub fn step_euclidean(
    market: &Market,
    p: &PriceVector,
    gamma: f64,
    floor: f64,
) -> Result<PriceVector> {
    check_gamma(gamma)?;
    let z = potentials::excess_demand(market, p)?;
    euclidean_update(p, &z, gamma, floor)
}

fn euclidean_update(p: &PriceVector, z: &[f64], gamma: f64, floor: f64) -> Result<PriceVector> {
    PriceVector::new(
        p.iter()
            .zip(z)
            .map(|(p, z)| (p + z / gamma).max(floor))
            .collect(),
    )
}

/// `e^{T/5} * total_budget / min_price`, saturating at `f64::MAX`.
pub fn naive_horizon_gamma(total_budget: f64, min_price: f64, horizon: usize) -> f64 {
    let g = (horizon as f64 * LOG_PRICE_FACTOR).exp() * total_budget / min_price;
    if g.is_finite() {
        g
    } else {
        f64::MAX
    }
}

/// `10 max_j [ (B / p0_j) max(max_k d0_k, max_l d0_l / d0_j) + max_k d0_j / d0_k ]`.
pub fn informed_mixed_gamma(total_budget: f64, p0: &[f64], d0: &[f64]) -> Result<f64> {
    if let Some(j) = d0.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::domain(format!(
            "informed step size needs positive initial demand, good {j} has {}",
            d0[j]
        )));
    }
    let d_max = d0.iter().copied().fold(0.0, f64::max);
    let d_min = d0.iter().copied().fold(f64::INFINITY, f64::min);
    let worst = p0
        .iter()
        .zip(d0)
        .map(|(&p, &d)| (total_budget / p) * d_max.max(d_max / d) + d / d_min)
        .fold(0.0, f64::max);
    Ok(10.0 * worst)
}

/// The step parameter a policy prescribes from initial-state quantities.
/// For `DoublingNaive` this is the first epoch's value.
pub fn compute_gamma(market: &Market, p0: &PriceVector, policy: StepPolicy) -> Result<f64> {
    let min_price = p0.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma = match policy {
        StepPolicy::Fixed(g) => g,
        StepPolicy::NaiveHorizon(t) => naive_horizon_gamma(market.total_budget(), min_price, t),
        StepPolicy::DoublingNaive => naive_horizon_gamma(market.total_budget(), min_price, 1),
        StepPolicy::FiveTimesMaxDemand | StepPolicy::InformedMixed => {
            let d0 = potentials::aggregate_demand(market, p0)?;
            informed_mixed_gamma(market.total_budget(), p0, &d0)?
        }
    };
    check_gamma(gamma)?;
    Ok(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub max_iters: usize,
    /// Convergence threshold on `max_j |z_j|`.
    pub tol: f64,
    pub cycle_window: usize,
    /// Keep every buyer's demand vector in each record.
    pub record_buyer_demands: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            cycle_window: DEFAULT_CYCLE_WINDOW,
            record_buyer_demands: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    MaxIters,
    CycleDetected,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Converged => "Converged",
            RunStatus::MaxIters => "MaxIters",
            RunStatus::CycleDetected => "CycleDetected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub prices: Vec<f64>,
    pub excess: Vec<f64>,
    pub phi: f64,
    /// Step parameter used to move from this record to the next.
    pub gamma: f64,
    /// `max_j |p_j^{t+1} - p_j^t| / p_j^t`; zero on the terminal record.
    pub max_rel_dp: f64,
    pub buyer_demands: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub status: RunStatus,
    pub kernel: KernelSpec,
    pub tol: f64,
    pub supply: Vec<f64>,
    /// First step index of each doubling-trick epoch (just `[0]` otherwise).
    pub epoch_starts: Vec<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("trajectories are never empty")
    }

    pub fn final_prices(&self) -> &[f64] {
        &self.last().prices
    }

    pub fn final_residual(&self) -> f64 {
        max_abs(&self.last().excess)
    }

    /// Iterations taken (index of the terminal record).
    pub fn iterations(&self) -> usize {
        self.last().t
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    /// Cycle detected, or iteration cap hit while still far from clearing.
    pub fn failed_to_converge(&self) -> bool {
        match self.status {
            RunStatus::Converged => false,
            RunStatus::CycleDetected => true,
            RunStatus::MaxIters => self.final_residual() > 10.0 * self.tol,
        }
    }

    /// Aggregate demand at record `t`, `z + supply`.
    pub fn demand(&self, t: usize) -> Vec<f64> {
        self.records[t]
            .excess
            .iter()
            .zip(&self.supply)
            .map(|(z, s)| z + s)
            .collect()
    }

    pub fn max_recorded_demand(&self) -> f64 {
        (0..self.records.len())
            .flat_map(|t| self.demand(t))
            .fold(0.0, f64::max)
    }

    /// The step parameter when it never changed over the run.
    pub fn constant_gamma(&self) -> Option<f64> {
        let first = self.records.first()?.gamma;
        self.records.iter().all(|r| r.gamma == first).then_some(first)
    }

    /// Post-hoc audit of `gamma_t >= 5 * max_{s, j} d_j^s` at every step.
    pub fn gamma_qualifies(&self) -> bool {
        let bound = 5.0 * self.max_recorded_demand();
        self.records.iter().all(|r| r.gamma >= bound)
    }

    /// CSV with columns `t, p_1..p_m, z_1..z_m, phi, gamma_t, max_rel_dp, status`;
    /// the status is filled on the last row only.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let m = self.supply.len();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|j| format!("p_{j}")));
        header.extend((1..=m).map(|j| format!("z_{j}")));
        header.extend(["phi", "gamma_t", "max_rel_dp", "status"].map(String::from));
        w.write_record(&header)?;
        let last = self.records.len() - 1;
        for (i, r) in self.records.iter().enumerate() {
            let mut row = vec![r.t.to_string()];
            row.extend(r.prices.iter().map(|x| fmt_f64(*x)));
            row.extend(r.excess.iter().map(|x| fmt_f64(*x)));
            row.push(fmt_f64(r.phi));
            row.push(fmt_f64(r.gamma));
            row.push(fmt_f64(r.max_rel_dp));
            row.push(if i == last { self.status.as_str().to_string() } else { String::new() });
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 17 significant digits, round-trip safe.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn revisits(history: &[StepRecord], p: &[f64]) -> bool {
    history.iter().any(|r| {
        r.prices
            .iter()
            .zip(p)
            .all(|(q, x)| (x - q).abs() <= CYCLE_REL_TOL * q.abs())
    })
}

/// Runs tatonnement from `p0` until `max |z| < tol`, a price revisit within
/// the cycle window, or the iteration cap.
pub fn run(
    market: &Market,
    p0: &PriceVector,
    kernel: KernelSpec,
    policy: StepPolicy,
    opts: &RunOptions,
) -> Result<Trajectory> {
    kernel.validate()?;
    if p0.len() != market.goods() {
        return Err(Error::DimensionMismatch {
            expected: market.goods(),
            found: p0.len(),
        });
    }
    let mut gamma = compute_gamma(market, p0, policy)?;
    let mut epoch_starts = vec![0];
    let mut epoch_len = 1usize;

    let mut records: Vec<StepRecord> = Vec::new();
    let mut p = p0.clone();
    let status = loop {
        let t = records.len();
        let demands = potentials::buyer_demands(market, &p)?;
        let mut excess: Vec<f64> = market.supply().iter().map(|s| -s).collect();
        for row in &demands {
            for (z, x) in excess.iter_mut().zip(row) {
                *z += x;
            }
        }
        if excess.iter().any(|z| !z.is_finite()) {
            return Err(Error::domain(format!("excess demand not finite at step {t}")));
        }
        let phi = potentials::potential_value(market, &p)?;

        if policy == StepPolicy::DoublingNaive && t == epoch_starts.last().unwrap() + epoch_len {
            epoch_len *= 2;
            epoch_starts.push(t);
            let min_price = p.iter().copied().fold(f64::INFINITY, f64::min);
            gamma = naive_horizon_gamma(market.total_budget(), min_price, epoch_len);
        }

        let mut record = StepRecord {
            t,
            prices: p.to_vec(),
            excess,
            phi,
            gamma,
            max_rel_dp: 0.0,
            buyer_demands: opts.record_buyer_demands.then_some(demands),
        };

        let terminal = if max_abs(&record.excess) < opts.tol {
            Some(RunStatus::Converged)
        } else if t >= opts.max_iters {
            Some(RunStatus::MaxIters)
        } else if revisits(&records[t.saturating_sub(opts.cycle_window)..], &p) {
            Some(RunStatus::CycleDetected)
        } else {
            None
        };
        if let Some(status) = terminal {
            records.push(record);
            break status;
        }

        let next = match kernel {
            KernelSpec::EntropicKl { .. } => entropic_update(&p, &record.excess, gamma)?,
            KernelSpec::Euclidean { floor } => euclidean_update(&p, &record.excess, gamma, floor)?,
        };
        record.max_rel_dp = next
            .iter()
            .zip(p.iter())
            .map(|(a, b)| (a - b).abs() / b)
            .fold(0.0, f64::max);
        records.push(record);
        p = next;
    };

    Ok(Trajectory {
        records,
        status,
        kernel,
        tol: opts.tol,
        supply: market.supply().to_vec(),
        epoch_starts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub t: usize,
    /// `phi(p^t) - phi(p*)`.
    pub gap: f64,
    /// `min_{s <= t} phi(p^s) - phi(p*)`.
    pub envelope_gap: f64,
    /// `gamma * D_h(p* || p0) / t`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentBoundReport {
    /// False when the run falls outside the bound's hypotheses; the rows
    /// are still filled in but the bound is not claimed.
    pub applicable: bool,
    pub reason: Option<String>,
    pub gamma: f64,
    pub divergence: f64,
    pub rows: Vec<BoundRow>,
    pub last_iterate_violations: usize,
    pub envelope_violations: usize,
}

/// Relative slack allowed before a bound counts as violated.
pub const BOUND_REL_TOL: f64 = 1e-6;

/// Compares `phi(p^t) - phi(p*)` against `gamma D_h(p* || p0) / t` for `t >= 1`.
pub fn verify_descent_bound(
    traj: &Trajectory,
    market: &Market,
    p_star: &PriceVector,
) -> Result<DescentBoundReport> {
    let phi_star = potentials::potential_value(market, p_star)?;
    let p0 = &traj.records[0].prices;
    let divergence = match traj.kernel {
        KernelSpec::EntropicKl { scale } => scale * generalized_kl(p_star, p0),
        k @ KernelSpec::Euclidean { .. } => k.divergence(p_star, p0),
    };

    let mut reason = None;
    if !matches!(traj.kernel, KernelSpec::EntropicKl { .. }) {
        reason = Some("bound is stated for the entropic kernel".to_string());
    } else if !market.has_smooth_demand() {
        reason = Some("market has linear buyers".to_string());
    }
    let gamma = match traj.constant_gamma() {
        Some(g) => g,
        None => {
            reason.get_or_insert_with(|| "step parameter varies over the run".to_string());
            traj.records.iter().map(|r| r.gamma).fold(0.0, f64::max)
        }
    };
    if reason.is_none() && !traj.gamma_qualifies() {
        reason = Some(format!(
            "gamma {gamma} is below 5 x max recorded demand {}",
            5.0 * traj.max_recorded_demand()
        ));
    }

    let slack = 1e-12 * (1.0 + phi_star.abs());
    let mut rows = Vec::new();
    let mut best = traj.records[0].phi - phi_star;
    let (mut last_iterate_violations, mut envelope_violations) = (0, 0);
    for r in traj.records.iter().skip(1) {
        let gap = r.phi - phi_star;
        best = best.min(gap);
        let bound = gamma * divergence / r.t as f64;
        let limit = bound * (1.0 + BOUND_REL_TOL) + slack;
        if gap > limit {
            last_iterate_violations += 1;
        }
        if best > limit {
            envelope_violations += 1;
        }
        rows.push(BoundRow {
            t: r.t,
            gap,
            envelope_gap: best,
            bound,
        });
    }
    Ok(DescentBoundReport {
        applicable: reason.is_none(),
        reason,
        gamma,
        divergence,
        rows,
        last_iterate_violations,
        envelope_violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaTally {
    pub checked: usize,
    pub violations: usize,
    /// Smallest slack seen (negative means violated).
    pub worst_slack: f64,
}

impl LemmaTally {
    fn new() -> Self {
        LemmaTally {
            checked: 0,
            violations: 0,
            worst_slack: f64::INFINITY,
        }
    }

    fn record(&mut self, slack: f64, tol: f64) {
        self.checked += 1;
        self.worst_slack = self.worst_slack.min(slack);
        if slack < -tol {
            self.violations += 1;
        }
    }

    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLemmaReport {
    pub gamma_qualifies: bool,
    /// `e^{-1/5} p^t <= p^{t+1} <= e^{1/5} p^t`, slack in log-price units.
    pub price_ratio: LemmaTally,
    /// `|dp_j| / p_j <= 1/4`.
    pub relative_change: LemmaTally,
    /// `dp_j^2 / p_j <= (9/2) KL(p_j + dp_j || p_j)`, on steps with `|dp|/p <= 1/4`.
    pub kl_quadratic: LemmaTally,
    /// Per buyer: `(sum_j d_ij |dp_j|)^2 / b_i <= sum_l d_il dp_l^2 / p_l`.
    /// `None` when buyer demands were not recorded.
    pub leontief: Option<LemmaTally>,
}

impl StepLemmaReport {
    pub fn all_hold(&self) -> bool {
        self.price_ratio.holds()
            && self.relative_change.holds()
            && self.kl_quadratic.holds()
            && self.leontief.as_ref().is_none_or(LemmaTally::holds)
    }
}

/// Per-step checks of the price-change, KL-quadratic and Cauchy-Schwarz
/// inequalities along an entropic trajectory.
pub fn verify_step_lemmas(traj: &Trajectory) -> StepLemmaReport {
    let mut price_ratio = LemmaTally::new();
    let mut relative_change = LemmaTally::new();
    let mut kl_quadratic = LemmaTally::new();
    let has_buyers = traj.records.iter().all(|r| r.buyer_demands.is_some());
    let mut leontief = LemmaTally::new();

    for pair in traj.records.windows(2) {
        let (cur, next) = (&pair[0], &pair[1]);
        for (&p, &q) in cur.prices.iter().zip(&next.prices) {
            let dp = q - p;
            price_ratio.record(LOG_PRICE_FACTOR - (q / p).ln().abs(), 1e-12);
            let rel = dp.abs() / p;
            relative_change.record(0.25 - rel, 1e-12);
            if rel <= 0.25 {
                let quad = dp * dp / p;
                kl_quadratic.record(4.5 * kl_term(q, p) - quad, 1e-12 * quad);
            }
        }
        if let Some(demands) = cur.buyer_demands.as_ref().filter(|_| has_buyers) {
            for d in demands {
                let budget: f64 = d.iter().zip(&cur.prices).map(|(x, p)| x * p).sum();
                if budget <= 0.0 {
                    continue;
                }
                let mut weighted = 0.0;
                let mut rhs = 0.0;
                for ((x, p), q) in d.iter().zip(&cur.prices).zip(&next.prices) {
                    let dp = q - p;
                    weighted += x * dp.abs();
                    rhs += x * dp * dp / p;
                }
                let lhs = weighted * weighted / budget;
                leontief.record(rhs - lhs, 1e-10 * rhs.abs().max(lhs.abs()));
            }
        }
    }

    StepLemmaReport {
        gamma_qualifies: traj.gamma_qualifies(),
        price_ratio,
        relative_change,
        kl_quadratic,
        leontief: has_buyers.then_some(leontief),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandBoundReport {
    /// Every step kept `|dp_j| / p_j <= 1/4`.
    pub applicable: bool,
    /// Mixed-market bound per good:
    /// `2 (B / p0_j) max(max_k d0_k, max_l d0_l / d0_j) + 2 max_k d0_j / d0_k`.
    pub bounds: Vec<f64>,
    /// Gross-complement bound per good, `2 max_k d0_j / d0_k`.
    pub complement_bounds: Vec<f64>,
    pub max_demand: Vec<f64>,
    pub violations: usize,
    /// Every buyer is Leontief, Cobb-Douglas, or CES with rho < 0.
    pub gross_complements: bool,
    /// Steps whose per-good demand ratio was checked against `[e^{-1/5}, e^{1/5}]`.
    pub ratio_checked: usize,
    pub ratio_violations: usize,
}

impl DemandBoundReport {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.ratio_violations == 0
    }
}

pub fn is_gross_complements(market: &Market) -> bool {
    market.buyers().iter().all(|b| match b.utility().family() {
        Family::Leontief | Family::CobbDouglas => true,
        Family::Ces { rho } => rho < 0.0,
        Family::Linear => false,
    })
}

/// `2 max_k min_i v_ij / v_ik` for an all-Leontief market with positive
/// valuations; `None` otherwise.
pub fn leontief_valuation_bound(market: &Market, good: usize) -> Option<f64> {
    let all_leontief = market
        .buyers()
        .iter()
        .all(|b| b.utility().family() == Family::Leontief && b.utility().valuations().iter().all(|v| *v > 0.0));
    if !all_leontief {
        return None;
    }
    let best = (0..market.goods())
        .map(|k| {
            market
                .buyers()
                .iter()
                .map(|b| b.utility().valuations()[good] / b.utility().valuations()[k])
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    Some(2.0 * best)
}

/// Checks the demand upper bound for mixed markets at every recorded step and,
/// for gross-complement markets, the one-step demand ratio bound.
pub fn verify_demand_bounds(traj: &Trajectory, market: &Market) -> DemandBoundReport {
    let applicable = traj.records.iter().all(|r| r.max_rel_dp <= 0.25);
    let d0 = traj.demand(0);
    let p0 = &traj.records[0].prices;
    let total_budget = market.total_budget();
    let d_max = d0.iter().copied().fold(0.0, f64::max);
    let d_min = d0.iter().copied().fold(f64::INFINITY, f64::min);
    let complement_bounds: Vec<f64> = d0.iter().map(|d| 2.0 * d / d_min).collect();
    let bounds: Vec<f64> = p0
        .iter()
        .zip(&d0)
        .zip(&complement_bounds)
        .map(|((&p, &d), &gc)| 2.0 * (total_budget / p) * d_max.max(d_max / d) + gc)
        .collect();

    let m = d0.len();
    let mut max_demand = vec![0.0f64; m];
    for t in 0..traj.records.len() {
        for (mx, d) in max_demand.iter_mut().zip(traj.demand(t)) {
            *mx = mx.max(d);
        }
    }
    let violations = max_demand
        .iter()
        .zip(&bounds)
        .filter(|(d, b)| **d > **b * (1.0 + 1e-12))
        .count();

    let gross_complements = is_gross_complements(market);
    let (mut ratio_checked, mut ratio_violations) = (0, 0);
    if gross_complements {
        for t in 0..traj.records.len().saturating_sub(1) {
            let (cur, next) = (&traj.records[t], &traj.records[t + 1]);
            let bounded_step = cur
                .prices
                .iter()
                .zip(&next.prices)
                .all(|(p, q)| (q / p).ln().abs() <= LOG_PRICE_FACTOR);
            if !bounded_step {
                continue;
            }
            ratio_checked += 1;
            let (a, b) = (traj.demand(t), traj.demand(t + 1));
            if a.iter().zip(&b).any(|(x, y)| (y / x).ln().abs() > LOG_PRICE_FACTOR + 1e-12) {
                ratio_violations += 1;
            }
        }
    }

    DemandBoundReport {
        applicable,
        bounds,
        complement_bounds,
        max_demand,
        violations,
        gross_complements,
        ratio_checked,
        ratio_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Buyer, UtilityFunction};

    fn market(buyers: Vec<(UtilityFunction, f64)>) -> Market {
        Market::new(
            buyers
                .into_iter()
                .map(|(u, b)| Buyer::new(u, b).unwrap())
                .collect(),
            None,
        )
        .unwrap()
    }

    fn one_linear() -> Market {
        market(vec![(UtilityFunction::linear(vec![1.0]).unwrap(), 1.0)])
    }

    fn p(v: &[f64]) -> PriceVector {
        PriceVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropic_step_examples() {
        let m = one_linear();
        assert_eq!(step_entropic(&m, &p(&[1.0]), 3.0).unwrap(), p(&[1.0]));
        let next = step_entropic(&m, &p(&[2.0]), 1.0).unwrap();
        assert!((next[0] - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((next[0] - 1.21306).abs() < 1e-5);
        assert!(step_entropic(&m, &p(&[2.0]), 0.0).is_err());
    }

    #[test]
    fn euclidean_step_examples() {
        let m = one_linear();
        assert_eq!(step_euclidean(&m, &p(&[1.0]), 1.0, 1e-12).unwrap(), p(&[1.0]));
        assert_eq!(step_euclidean(&m, &p(&[2.0]), 1.0, 1e-12).unwrap(), p(&[1.5]));
        // supply 101 makes z = 1/0.1 - 101 = -91 at p = 0.1
        let heavy = Market::new(
            vec![Buyer::new(UtilityFunction::linear(vec![1.0]).unwrap(), 1.0).unwrap()],
            Some(vec![101.0]),
        )
        .unwrap();
        assert_eq!(step_euclidean(&heavy, &p(&[0.1]), 1.0, 1e-12).unwrap(), p(&[1e-12]));
    }

    #[test]
    fn gamma_policies() {
        let m = one_linear();
        assert_eq!(compute_gamma(&m, &p(&[1.0]), StepPolicy::Fixed(2.0)).unwrap(), 2.0);
        assert!((naive_horizon_gamma(2.0, 1.0, 5) - 2.0 * std::f64::consts::E).abs() < 1e-12);
        assert_eq!(informed_mixed_gamma(2.0, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 30.0);
        assert!(informed_mixed_gamma(2.0, &[1.0, 1.0], &[1.0, 0.0]).is_err());
        assert!(compute_gamma(&m, &p(&[1.0]), StepPolicy::Fixed(-1.0)).is_err());
        assert_eq!(naive_horizon_gamma(1.0, 1.0, 1_000_000), f64::MAX);
    }

    #[test]
    fn one_good_run_converges_to_unit_price() {
        let traj = run(
            &one_linear(),
            &p(&[2.0]),
            KernelSpec::entropic(),
            StepPolicy::Fixed(5.0),
            &RunOptions { max_iters: 500, ..RunOptions::default() },
        )
        .unwrap();
        assert_eq!(traj.status, RunStatus::Converged);
        assert!((traj.final_prices()[0] - 1.0).abs() < 1e-6);
        assert!(traj.records.iter().all(|r| r.prices[0] > 0.0));
    }

    #[test]
    fn two_good_linear_market_does_not_converge() {
        let m = market(vec![(UtilityFunction::linear(vec![1.0, 1.0]).unwrap(), 1.0)]);
        for gamma in [1.0, 2.0, 5.0] {
            let traj = run(
                &m,
                &p(&[1.0, 1.0]),
                KernelSpec::entropic(),
                StepPolicy::Fixed(gamma),
                &RunOptions { max_iters: 1000, ..RunOptions::default() },
            )
            .unwrap();
            assert_ne!(traj.status, RunStatus::Converged, "gamma {gamma}");
            assert!(traj.failed_to_converge());
        }
    }

    #[test]
    fn equilibrium_start_converges_immediately() {
        let u = UtilityFunction::cobb_douglas(vec![0.5, 0.5]).unwrap();
        let m = market(vec![(u.clone(), 1.0), (u, 1.0)]);
        let traj = run(
            &m,
            &p(&[1.0, 1.0]),
            KernelSpec::entropic(),
            StepPolicy::Fixed(2.0),
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(traj.status, RunStatus::Converged);
        assert_eq!(traj.iterations(), 0);
    }

    #[test]
    fn doubling_epochs_are_recorded() {
        let m = one_linear();
        let traj = run(
            &m,
            &p(&[3.0]),
            KernelSpec::entropic(),
            StepPolicy::DoublingNaive,
            &RunOptions { max_iters: 20, ..RunOptions::default() },
        )
        .unwrap();
        assert_eq!(&traj.epoch_starts[..4], &[0, 1, 3, 7]);
        assert!(traj.records[1].gamma > traj.records[0].gamma);
    }

    #[test]
    fn trajectory_csv_layout() {
        let traj = run(
            &one_linear(),
            &p(&[2.0]),
            KernelSpec::entropic(),
            StepPolicy::Fixed(5.0),
            &RunOptions { max_iters: 3, ..RunOptions::default() },
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,p_1,z_1,phi,gamma_t,max_rel_dp,status");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].ends_with(','));
        assert!(lines[4].ends_with(",MaxIters"));
        assert!(lines[1].starts_with("0,2.0000000000000000e0,"));
    }

    #[test]
    fn descent_bound_t1_equals_gamma_times_divergence() {
        let m = market(vec![(UtilityFunction::leontief(vec![1.0]).unwrap(), 1.0)]);
        let traj = run(
            &m,
            &p(&[2.0]),
            KernelSpec::entropic(),
            StepPolicy::InformedMixed,
            &RunOptions { max_iters: 50, ..RunOptions::default() },
        )
        .unwrap();
        let report = verify_descent_bound(&traj, &m, &p(&[1.0])).unwrap();
        assert!(report.applicable, "{:?}", report.reason);
        let expected = report.gamma * 6.0 * (1.0 * (0.5f64).ln() - 1.0 + 2.0);
        assert!((report.rows[0].bound - expected).abs() < 1e-12 * expected);
        assert_eq!(report.last_iterate_violations, 0);
        assert_eq!(report.envelope_violations, 0);
    }

    #[test]
    fn step_lemmas_flag_small_gamma() {
        let m = market(vec![
            (UtilityFunction::leontief(vec![1.0, 2.0]).unwrap(), 2.0),
            (UtilityFunction::ces(vec![1.0, 1.0], -2.0).unwrap(), 1.0),
        ]);
        let p0 = p(&[0.5, 3.0]);
        let opts = RunOptions { max_iters: 200, record_buyer_demands: true, ..RunOptions::default() };
        let good = run(&m, &p0, KernelSpec::entropic(), StepPolicy::InformedMixed, &opts).unwrap();
        let report = verify_step_lemmas(&good);
        assert!(report.gamma_qualifies);
        assert!(report.all_hold(), "{report:?}");

        let max_demand = good.max_recorded_demand();
        let short = RunOptions { max_iters: 1, ..opts };
        let bad = run(&m, &p0, KernelSpec::entropic(), StepPolicy::Fixed(0.01 * max_demand), &short).unwrap();
        let report = verify_step_lemmas(&bad);
        assert!(!report.gamma_qualifies);
        assert!(report.price_ratio.violations > 0);
    }

    #[test]
    fn zero_step_satisfies_lemmas_trivially() {
        let u = UtilityFunction::cobb_douglas(vec![0.5, 0.5]).unwrap();
        let m = market(vec![(u, 2.0)]);
        let rec = StepRecord {
            t: 0,
            prices: vec![1.0, 1.0],
            excess: vec![0.0, 0.0],
            phi: 0.0,
            gamma: 10.0,
            max_rel_dp: 0.0,
            buyer_demands: Some(vec![vec![1.0, 1.0]]),
        };
        let traj = Trajectory {
            records: vec![rec.clone(), StepRecord { t: 1, ..rec }],
            status: RunStatus::Converged,
            kernel: KernelSpec::entropic(),
            tol: 1e-6,
            supply: m.supply().to_vec(),
            epoch_starts: vec![0],
        };
        let report = verify_step_lemmas(&traj);
        assert!(report.all_hold());
        assert_eq!(report.kl_quadratic.worst_slack, 0.0);
        assert_eq!(report.leontief.unwrap().worst_slack, 0.0);
    }

    #[test]
    fn single_good_demand_bound() {
        let m = market(vec![(UtilityFunction::leontief(vec![1.0]).unwrap(), 1.5)]);
        let traj = run(
            &m,
            &p(&[0.5]),
            KernelSpec::entropic(),
            StepPolicy::InformedMixed,
            &RunOptions { max_iters: 300, ..RunOptions::default() },
        )
        .unwrap();
        let report = verify_demand_bounds(&traj, &m);
        let d0 = 1.5 / 0.5;
        assert!((report.bounds[0] - (2.0 * 1.5 / 0.5 * d0 + 2.0)).abs() < 1e-12);
        assert!(report.applicable && report.holds(), "{report:?}");
    }

    #[test]
    fn leontief_bound_dominates_valuation_ratio_bound() {
        let m = market(vec![
            (UtilityFunction::leontief(vec![1.0, 2.0, 3.0]).unwrap(), 1.0),
            (UtilityFunction::leontief(vec![2.0, 1.0, 1.0]).unwrap(), 2.0),
            (UtilityFunction::leontief(vec![1.0, 1.0, 4.0]).unwrap(), 1.5),
        ]);
        let traj = run(
            &m,
            &p(&[1.0, 2.0, 0.5]),
            KernelSpec::entropic(),
            StepPolicy::InformedMixed,
            &RunOptions { max_iters: 100, ..RunOptions::default() },
        )
        .unwrap();
        let report = verify_demand_bounds(&traj, &m);
        assert!(report.gross_complements);
        assert!(report.holds(), "{report:?}");
        for j in 0..3 {
            let v_bound = leontief_valuation_bound(&m, j).unwrap();
            assert!(report.complement_bounds[j] >= v_bound - 1e-12);
        }
    }
}
