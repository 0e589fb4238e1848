//! Reference equilibrium prices.
//!
//! Closed forms where they exist, long-run mirror descent on the potential
//! followed by a damped Newton polish otherwise, and a grid search for markets
//! with at most three goods.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::market::{Allocation, Family, Market, PriceVector};
use crate::numeric::{generalized_kl, max_abs};
use crate::potentials;
use crate::tatonnement::{informed_mixed_gamma, DEFAULT_PRICE_FLOOR};

pub const DESCENT_TOL: f64 = 1e-8;
pub const BRUTE_FORCE_TOL: f64 = 1e-6;
pub const DEFAULT_DESCENT_STEPS: usize = 20_000;
pub const MAX_BRUTE_FORCE_GOODS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    ClosedForm,
    LongRunDescent,
    BruteForce,
}

impl SolveMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveMethod::ClosedForm => "closed-form",
            SolveMethod::LongRunDescent => "long-run descent",
            SolveMethod::BruteForce => "brute force",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub prices: PriceVector,
    pub allocation: Allocation,
    /// `max_j |z_j|` over interior goods, `max(z_j, 0)` over boundary goods.
    pub residual: f64,
    pub method: SolveMethod,
    /// Residual met the method's tolerance.
    pub converged: bool,
    /// Goods whose equilibrium price is zero; reported at the price floor.
    pub boundary_goods: Vec<usize>,
    /// Potential at `prices`.
    pub potential: f64,
}

fn residual(z: &[f64], boundary: &[bool]) -> f64 {
    z.iter()
        .zip(boundary)
        .map(|(z, &b)| if b { z.max(0.0) } else { z.abs() })
        .fold(0.0, f64::max)
}

fn finish(
    market: &Market,
    prices: PriceVector,
    boundary: &[bool],
    method: SolveMethod,
    tol: f64,
) -> Result<EquilibriumResult> {
    let z = potentials::excess_demand(market, &prices)?;
    let residual = residual(&z, boundary);
    Ok(EquilibriumResult {
        allocation: potentials::allocation_from_prices(market, &prices)?,
        potential: potentials::potential_value(market, &prices)?,
        prices,
        residual,
        method,
        converged: residual < tol,
        boundary_goods: (0..boundary.len()).filter(|&j| boundary[j]).collect(),
    })
}

/// `p_j = sum_i b_i a_ij / s_j` for an all-Cobb-Douglas market.
pub fn cobb_douglas_equilibrium(market: &Market) -> Result<EquilibriumResult> {
    if let Some(i) = market
        .buyers()
        .iter()
        .position(|b| b.utility().family() != Family::CobbDouglas)
    {
        return Err(Error::UnsupportedFamily(format!(
            "closed-form equilibrium needs Cobb-Douglas buyers; buyer {i} is {}",
            market.buyers()[i].utility().family().name()
        )));
    }
    let m = market.goods();
    let mut spend = vec![0.0; m];
    for b in market.buyers() {
        for (s, a) in spend.iter_mut().zip(b.utility().valuations()) {
            *s += b.budget() * a;
        }
    }
    let boundary: Vec<bool> = spend.iter().map(|s| *s == 0.0).collect();
    let prices = spend
        .iter()
        .zip(market.supply())
        .map(|(e, s)| if *e == 0.0 { DEFAULT_PRICE_FLOOR } else { e / s })
        .collect();
    finish(market, PriceVector::new(prices)?, &boundary, SolveMethod::ClosedForm, 1e-12)
}

struct Polisher<'a> {
    market: &'a Market,
    boundary: Vec<bool>,
    evals: usize,
}

impl<'a> Polisher<'a> {
    fn new(market: &'a Market) -> Self {
        Polisher {
            market,
            boundary: vec![false; market.goods()],
            evals: 0,
        }
    }

    fn excess(&mut self, p: &[f64]) -> Result<Vec<f64>> {
        self.evals += 1;
        potentials::excess_demand(self.market, &PriceVector::new(p.to_vec())?)
    }

    fn phi(&self, p: &[f64]) -> Result<f64> {
        potentials::potential_value(self.market, &PriceVector::new(p.to_vec())?)
    }

    fn residual(&self, z: &[f64]) -> f64 {
        residual(z, &self.boundary)
    }

    /// Adaptive-step entropic mirror descent on the potential, accepting a step
    /// when `phi(p') <= phi(p) - z.(p' - p) + gamma KL(p' || p)`.
    fn descend(&mut self, p: &mut Vec<f64>, gamma: &mut f64, steps: usize, target: f64) -> Result<f64> {
        let mut z = self.excess(p)?;
        let mut phi = self.phi(p)?;
        for _ in 0..steps {
            if self.residual(&z) < target {
                break;
            }
            let mut accepted = false;
            for _ in 0..60 {
                let next: Vec<f64> = p
                    .iter()
                    .zip(&z)
                    .enumerate()
                    .map(|(j, (p, z))| {
                        if self.boundary[j] {
                            *p
                        } else {
                            (p * (z / *gamma).exp()).max(f64::MIN_POSITIVE)
                        }
                    })
                    .collect();
                let next_phi = self.phi(&next)?;
                let linear: f64 = z.iter().zip(&next).zip(p.iter()).map(|((z, a), b)| z * (a - b)).sum();
                let model = phi - linear + *gamma * generalized_kl(&next, p);
                if next_phi <= model + 1e-13 * (1.0 + phi.abs()) {
                    *p = next;
                    phi = next_phi;
                    z = self.excess(p)?;
                    *gamma *= 0.9;
                    accepted = true;
                    break;
                }
                *gamma *= 2.0;
            }
            if !accepted {
                break;
            }
            self.mark_boundary(p, &z);
        }
        Ok(self.residual(&z))
    }

    /// Goods with vanishing price and negative excess demand sit at the
    /// boundary of the price simplex; pin them to the floor.
    fn mark_boundary(&mut self, p: &mut [f64], z: &[f64]) {
        let scale = self.market.total_budget() / self.market.supply().iter().sum::<f64>();
        for j in 0..p.len() {
            if !self.boundary[j] && p[j] < 1e-9 * scale && z[j] < 0.0 {
                self.boundary[j] = true;
                p[j] = DEFAULT_PRICE_FLOOR;
            }
        }
    }

    /// Levenberg-Marquardt on `z(e^y) = 0` over the interior goods, with a
    /// central-difference Jacobian.
    fn newton(&mut self, p: &mut Vec<f64>, iters: usize, target: f64) -> Result<f64> {
        let free: Vec<usize> = (0..p.len()).filter(|&j| !self.boundary[j]).collect();
        let mut z = self.excess(p)?;
        let mut res = self.residual(&z);
        if free.is_empty() {
            return Ok(res);
        }
        let mut lambda = 1e-6;
        let h: f64 = 1e-6;
        for _ in 0..iters {
            if res < target {
                break;
            }
            let k = free.len();
            let mut jac = DMatrix::<f64>::zeros(k, k);
            for (c, &j) in free.iter().enumerate() {
                let mut up = p.clone();
                let mut down = p.clone();
                up[j] *= h.exp();
                down[j] *= (-h).exp();
                let zu = self.excess(&up)?;
                let zd = self.excess(&down)?;
                for (r, &i) in free.iter().enumerate() {
                    jac[(r, c)] = (zu[i] - zd[i]) / (2.0 * h);
                }
            }
            let f = DVector::from_iterator(k, free.iter().map(|&i| z[i]));
            let jtj = jac.transpose() * &jac;
            let jtf = jac.transpose() * &f;
            let diag_scale = jtj.diagonal().max().max(1e-300);
            let mut improved = false;
            for _ in 0..30 {
                let mut a = jtj.clone();
                for d in 0..k {
                    a[(d, d)] += lambda * diag_scale;
                }
                let Some(step) = a.lu().solve(&(-&jtf)) else {
                    lambda *= 10.0;
                    continue;
                };
                let longest = step.amax();
                let shrink = if longest > 1.0 { 1.0 / longest } else { 1.0 };
                let mut trial = p.clone();
                for (c, &j) in free.iter().enumerate() {
                    trial[j] = p[j] * (shrink * step[c]).exp();
                }
                let Ok(tz) = self.excess(&trial) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial_res = self.residual(&tz);
                let norm = |v: &[f64]| free.iter().map(|&i| v[i] * v[i]).sum::<f64>();
                if norm(&tz) < norm(&z) {
                    *p = trial;
                    z = tz;
                    res = trial_res;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    break;
                }
                lambda *= 4.0;
            }
            if !improved {
                break;
            }
        }
        Ok(res)
    }

    fn solve(&mut self, p0: &[f64], max_steps: usize, target: f64) -> Result<Vec<f64>> {
        let mut p = p0.to_vec();
        let d0 = potentials::aggregate_demand(self.market, &PriceVector::new(p.clone())?)?;
        let mut gamma = informed_mixed_gamma(self.market.total_budget(), &p, &d0)
            .unwrap_or_else(|_| self.market.total_budget() / p.iter().copied().fold(f64::INFINITY, f64::min));
        let mut best = p.clone();
        let z0 = self.excess(&p)?;
        let mut best_res = self.residual(&z0);
        let mut used = 0;
        while used < max_steps && best_res >= target {
            let chunk = 500.min(max_steps - used);
            used += chunk;
            let mut res = self.descend(&mut p, &mut gamma, chunk, target.max(1e-4))?;
            if res < best_res {
                best_res = res;
                best = p.clone();
            }
            if res < 1e-2 || used >= max_steps {
                let mut q = p.clone();
                res = self.newton(&mut q, 50, target * 0.1)?;
                if res < best_res {
                    best_res = res;
                    best = q.clone();
                    if res < target {
                        break;
                    }
                    p = q;
                }
            }
        }
        Ok(best)
    }
}

/// Long-run minimization of the potential from `p0`. The result is flagged
/// unconverged when the residual stays above `1e-8` after `max_steps` steps.
pub fn solve_by_descent(
    market: &Market,
    p0: &PriceVector,
    max_steps: usize,
) -> Result<EquilibriumResult> {
    if p0.len() != market.goods() {
        return Err(Error::DimensionMismatch {
            expected: market.goods(),
            found: p0.len(),
        });
    }
    let mut polisher = Polisher::new(market);
    let prices = polisher.solve(p0, max_steps, DESCENT_TOL)?;
    let boundary = polisher.boundary.clone();
    finish(
        market,
        PriceVector::new(prices)?,
        &boundary,
        SolveMethod::LongRunDescent,
        DESCENT_TOL,
    )
}

/// Interior grid points `k / n` of the probability simplex in `dim` coordinates.
fn simplex_grid(dim: usize, n: usize) -> Vec<Vec<f64>> {
    fn fill(prefix: &mut Vec<usize>, left: usize, dim: usize, n: usize, out: &mut Vec<Vec<f64>>) {
        if prefix.len() + 1 == dim {
            if left >= 1 {
                let mut point: Vec<f64> = prefix.iter().map(|k| *k as f64 / n as f64).collect();
                point.push(left as f64 / n as f64);
                out.push(point);
            }
            return;
        }
        for k in 1..left {
            prefix.push(k);
            fill(prefix, left - k, dim, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    fill(&mut Vec::new(), n, dim, n, &mut out);
    out
}

/// Grid minimization of the potential over `{p : s.p = sum b}`, refined
/// locally. Markets with more than three goods are rejected.
pub fn brute_force_tiny(market: &Market, grid_resolution: usize) -> Result<EquilibriumResult> {
    let m = market.goods();
    if m > MAX_BRUTE_FORCE_GOODS {
        return Err(Error::domain(format!(
            "brute force supports at most {MAX_BRUTE_FORCE_GOODS} goods, market has {m}"
        )));
    }
    let n = grid_resolution.max(m);
    let budget = market.total_budget();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for w in simplex_grid(m, n) {
        let p: Vec<f64> = w
            .iter()
            .zip(market.supply())
            .map(|(w, s)| w * budget / s)
            .collect();
        let phi = potentials::potential_value(market, &PriceVector::new(p.clone())?)?;
        if best.as_ref().is_none_or(|(b, _)| phi < *b) {
            best = Some((phi, p));
        }
    }
    let (_, start) = best.expect("grid is never empty");
    let mut polisher = Polisher::new(market);
    let prices = polisher.solve(&start, DEFAULT_DESCENT_STEPS, BRUTE_FORCE_TOL * 1e-2)?;
    let boundary = polisher.boundary.clone();
    finish(
        market,
        PriceVector::new(prices)?,
        &boundary,
        SolveMethod::BruteForce,
        BRUTE_FORCE_TOL,
    )
}

/// Largest relative price gap between two results over goods that are
/// interior in both.
pub fn price_disagreement(a: &EquilibriumResult, b: &EquilibriumResult) -> f64 {
    (0..a.prices.len())
        .filter(|j| !a.boundary_goods.contains(j) && !b.boundary_goods.contains(j))
        .map(|j| (a.prices[j] - b.prices[j]).abs() / a.prices[j].abs().max(b.prices[j].abs()))
        .fold(0.0, f64::max)
}

/// `max_j |z_j|` at `p`, for callers holding only prices.
pub fn excess_residual(market: &Market, p: &PriceVector) -> Result<f64> {
    Ok(max_abs(&potentials::excess_demand(market, p)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{Buyer, UtilityFunction};

    fn market(buyers: Vec<(UtilityFunction, f64)>, supply: Option<Vec<f64>>) -> Market {
        Market::new(
            buyers
                .into_iter()
                .map(|(u, b)| Buyer::new(u, b).unwrap())
                .collect(),
            supply,
        )
        .unwrap()
    }

    fn cd(a: &[f64]) -> UtilityFunction {
        UtilityFunction::cobb_douglas(a.to_vec()).unwrap()
    }

    #[test]
    fn cobb_douglas_closed_forms() {
        let disjoint = market(vec![(cd(&[1.0, 0.0]), 1.0), (cd(&[0.0, 1.0]), 1.0)], None);
        let r = cobb_douglas_equilibrium(&disjoint).unwrap();
        assert_eq!(r.prices.as_slice(), &[1.0, 1.0]);
        assert_eq!(r.allocation.rows(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(r.converged && r.residual < 1e-12);

        let single = market(vec![(cd(&[0.25, 0.75]), 2.0)], None);
        let r = cobb_douglas_equilibrium(&single).unwrap();
        assert_eq!(r.prices.as_slice(), &[0.5, 1.5]);

        for n in [1usize, 3, 7] {
            let sym = market(vec![(cd(&[0.5, 0.5]), 1.0); n], None);
            let r = cobb_douglas_equilibrium(&sym).unwrap();
            let half = n as f64 / 2.0;
            assert!(r.prices.iter().all(|p| (p - half).abs() < 1e-12));
        }

        let mixed = market(
            vec![(cd(&[0.5, 0.5]), 1.0), (UtilityFunction::leontief(vec![1.0, 1.0]).unwrap(), 1.0)],
            None,
        );
        assert!(matches!(cobb_douglas_equilibrium(&mixed), Err(Error::UnsupportedFamily(_))));
    }

    #[test]
    fn descent_solves_single_leontief_buyer() {
        let m = market(vec![(UtilityFunction::leontief(vec![1.0, 1.0]).unwrap(), 2.0)], None);
        let r = solve_by_descent(&m, &PriceVector::new(vec![1.0, 1.0]).unwrap(), 1000).unwrap();
        assert_eq!(r.prices.as_slice(), &[1.0, 1.0]);
        assert!(r.converged);

        let r = solve_by_descent(&m, &PriceVector::new(vec![0.3, 4.0]).unwrap(), 5000).unwrap();
        assert!(r.converged, "residual {}", r.residual);
        assert!((r.prices[0] + r.prices[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn descent_matches_cobb_douglas_closed_form() {
        let m = market(
            vec![(cd(&[0.2, 0.3, 0.5]), 2.5), (cd(&[0.6, 0.1, 0.3]), 2.0), (cd(&[0.1, 0.1, 0.8]), 3.0)],
            Some(vec![1.0, 2.0, 0.5]),
        );
        let exact = cobb_douglas_equilibrium(&m).unwrap();
        let r = solve_by_descent(&m, &PriceVector::uniform(3, 2.5).unwrap(), DEFAULT_DESCENT_STEPS).unwrap();
        assert!(r.converged);
        assert!(price_disagreement(&exact, &r) < 1e-7);
    }

    #[test]
    fn descent_returns_equilibrium_start() {
        let m = market(vec![(cd(&[0.5, 0.5]), 1.0), (cd(&[0.5, 0.5]), 1.0)], None);
        let p0 = PriceVector::new(vec![1.0, 1.0]).unwrap();
        let r = solve_by_descent(&m, &p0, 10).unwrap();
        assert_eq!(r.prices, p0);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn brute_force_one_linear_buyer() {
        let m = market(vec![(UtilityFunction::linear(vec![1.0]).unwrap(), 1.0)], None);
        let r = brute_force_tiny(&m, 50).unwrap();
        assert!((r.prices[0] - 1.0).abs() < 1e-8);
        assert!((r.allocation.row(0)[0] - 1.0).abs() < 1e-8);
        assert_eq!(r.method, SolveMethod::BruteForce);
    }

    #[test]
    fn brute_force_flags_unwanted_good() {
        let m = market(vec![(UtilityFunction::leontief(vec![1.0, 0.0]).unwrap(), 1.0)], None);
        let r = brute_force_tiny(&m, 40).unwrap();
        assert_eq!(r.boundary_goods, vec![1]);
        assert!(r.converged);
        assert!((r.prices[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn brute_force_rejects_large_markets() {
        let m = market(vec![(cd(&[0.25; 4]), 1.0)], None);
        assert!(brute_force_tiny(&m, 10).is_err());
    }

    #[test]
    fn simplex_grid_counts() {
        assert_eq!(simplex_grid(1, 5), vec![vec![1.0]]);
        assert_eq!(simplex_grid(2, 4).len(), 3);
        // compositions of 6 into 3 positive parts: C(5, 2)
        assert_eq!(simplex_grid(3, 6).len(), 10);
    }
}
