//! Consumer theory for CCH utilities: Marshallian and Hicksian demand, the
//! expenditure function, indirect utility, price elasticities, and numeric
//! checks of the UMP/EMP duality identities and Shephard's lemma.
//!
//! Every family is homogeneous of degree one, so `e(p, u) = u * e(p, 1)` and
//! `v(p, b) = b / e(p, 1)`. CES quantities are evaluated through log-sum-exp
//! so that rho far below zero (down to about -100) neither overflows nor
//! underflows.

use crate::error::{Error, Result};
use crate::market::{Family, PriceVector, TieBreak, UtilityFunction};
use crate::numeric::{dot, log_sum_exp, max_abs, rel_diff};

/// Default relative finite-difference step (`h = 1e-5 * p_j`).
pub const DEFAULT_REL_STEP: f64 = 1e-5;

/// Relative tie tolerance for linear bang-per-buck under `TieBreak::EqualSplit`.
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemandKind {
    Marshallian,
    Hicksian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemandBundle {
    pub quantities: Vec<f64>,
    pub kind: DemandKind,
}

impl DemandBundle {
    pub fn cost(&self, p: &[f64]) -> f64 {
        dot(&self.quantities, p)
    }
}

fn check_dims(u: &UtilityFunction, p: &PriceVector) -> Result<()> {
    if u.goods() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: u.goods(),
            found: p.len(),
        });
    }
    Ok(())
}

fn check_level(what: &str, x: f64) -> Result<()> {
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::domain(format!(
            "{what} must be finite and non-negative, got {x}"
        )));
    }
    Ok(())
}

/// Indices of the goods a linear buyer buys, i.e. the bang-per-buck maximizers
/// selected by `tie`.
fn linear_choice(v: &[f64], p: &[f64], tie: TieBreak) -> Vec<usize> {
    let ratios: Vec<f64> = v.iter().zip(p).map(|(v, p)| v / p).collect();
    let best = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match tie {
        TieBreak::LowestIndex => vec![ratios.iter().position(|&r| r == best).unwrap()],
        TieBreak::EqualSplit => ratios
            .iter()
            .enumerate()
            .filter(|(_, &r)| r >= best * (1.0 - TIE_TOL))
            .map(|(j, _)| j)
            .collect(),
    }
}

/// CES log-space pieces: `sigma` and `L = ln sum_k v_k^sigma p_k^(1 - sigma)`.
fn ces_log_terms(v: &[f64], p: &[f64], rho: f64) -> (f64, f64) {
    let sigma = 1.0 / (1.0 - rho);
    let lse = log_sum_exp(v.iter().zip(p).map(|(&v, &p)| {
        if v > 0.0 {
            sigma * v.ln() + (1.0 - sigma) * p.ln()
        } else {
            f64::NEG_INFINITY
        }
    }));
    (sigma, lse)
}

/// `ln e(p, 1)`: log of the buck-per-bang.
pub fn log_unit_expenditure(u: &UtilityFunction, p: &PriceVector) -> Result<f64> {
    check_dims(u, p)?;
    let v = u.valuations();
    let value = match u.family() {
        Family::Linear => v
            .iter()
            .zip(p.iter())
            .filter(|(v, _)| **v > 0.0)
            .map(|(v, p)| p.ln() - v.ln())
            .fold(f64::INFINITY, f64::min),
        Family::CobbDouglas => v
            .iter()
            .zip(p.iter())
            .filter(|(a, _)| **a > 0.0)
            .map(|(a, p)| a * (p.ln() - a.ln()))
            .sum(),
        Family::Leontief => dot(v, p).ln(),
        Family::Ces { rho } => {
            let (sigma, lse) = ces_log_terms(v, p, rho);
            lse / (1.0 - sigma)
        }
    };
    if !value.is_finite() {
        return Err(Error::domain("unit expenditure is degenerate"));
    }
    Ok(value)
}

/// `e(p, 1)`, the minimum cost of one unit of utility.
pub fn unit_expenditure(u: &UtilityFunction, p: &PriceVector) -> Result<f64> {
    match u.family() {
        Family::Leontief | Family::Linear => {
            check_dims(u, p)?;
            let v = u.valuations();
            let value = if u.family() == Family::Leontief {
                dot(v, p)
            } else {
                v.iter()
                    .zip(p.iter())
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, p)| p / v)
                    .fold(f64::INFINITY, f64::min)
            };
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::domain("unit expenditure is degenerate"));
            }
            Ok(value)
        }
        _ => log_unit_expenditure(u, p).map(f64::exp),
    }
}

/// Expenditure function `e(p, target) = target * e(p, 1)`.
pub fn expenditure(u: &UtilityFunction, p: &PriceVector, target: f64) -> Result<f64> {
    check_level("target utility", target)?;
    if target == 0.0 {
        check_dims(u, p)?;
        return Ok(0.0);
    }
    Ok(target * unit_expenditure(u, p)?)
}

/// Indirect utility `v(p, b) = b / e(p, 1)`.
pub fn indirect_utility(u: &UtilityFunction, p: &PriceVector, budget: f64) -> Result<f64> {
    check_level("budget", budget)?;
    if budget == 0.0 {
        check_dims(u, p)?;
        return Ok(0.0);
    }
    match u.family() {
        Family::Leontief | Family::Linear => Ok(budget / unit_expenditure(u, p)?),
        _ => Ok(budget * (-log_unit_expenditure(u, p)?).exp()),
    }
}

pub fn marshallian_demand(
    u: &UtilityFunction,
    p: &PriceVector,
    budget: f64,
) -> Result<DemandBundle> {
    marshallian_demand_with(u, p, budget, TieBreak::default())
}

/// Utility-maximizing bundle at `budget`; the budget is spent exactly.
pub fn marshallian_demand_with(
    u: &UtilityFunction,
    p: &PriceVector,
    budget: f64,
    tie: TieBreak,
) -> Result<DemandBundle> {
    check_dims(u, p)?;
    check_level("budget", budget)?;
    let v = u.valuations();
    let quantities = match u.family() {
        Family::Linear => {
            let chosen = linear_choice(v, p, tie);
            let share = budget / chosen.len() as f64;
            let mut x = vec![0.0; v.len()];
            for j in chosen {
                x[j] = share / p[j];
            }
            x
        }
        Family::CobbDouglas => v.iter().zip(p.iter()).map(|(a, p)| a * budget / p).collect(),
        Family::Leontief => {
            let cost = dot(v, p);
            v.iter().map(|vj| budget * vj / cost).collect()
        }
        Family::Ces { rho } => {
            let (sigma, lse) = ces_log_terms(v, p, rho);
            v.iter()
                .zip(p.iter())
                .map(|(&vj, &pj)| {
                    if vj > 0.0 {
                        budget * (sigma * (vj.ln() - pj.ln()) - lse).exp()
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    };
    Ok(DemandBundle {
        quantities,
        kind: DemandKind::Marshallian,
    })
}

pub fn hicksian_demand(u: &UtilityFunction, p: &PriceVector, target: f64) -> Result<DemandBundle> {
    hicksian_demand_with(u, p, target, TieBreak::default())
}

/// Cost-minimizing bundle reaching utility `target`.
pub fn hicksian_demand_with(
    u: &UtilityFunction,
    p: &PriceVector,
    target: f64,
    tie: TieBreak,
) -> Result<DemandBundle> {
    check_dims(u, p)?;
    check_level("target utility", target)?;
    let v = u.valuations();
    let quantities = if target == 0.0 {
        vec![0.0; v.len()]
    } else {
        match u.family() {
            Family::Linear => {
                let chosen = linear_choice(v, p, tie);
                let k = chosen.len() as f64;
                let mut x = vec![0.0; v.len()];
                for j in chosen {
                    x[j] = target / (k * v[j]);
                }
                x
            }
            Family::CobbDouglas => {
                let e1 = unit_expenditure(u, p)?;
                v.iter().zip(p.iter()).map(|(a, p)| target * e1 * a / p).collect()
            }
            Family::Leontief => v.iter().map(|vj| target * vj).collect(),
            Family::Ces { rho } => {
                let (sigma, lse) = ces_log_terms(v, p, rho);
                v.iter()
                    .zip(p.iter())
                    .map(|(&vj, &pj)| {
                        if vj > 0.0 {
                            target * (sigma * (vj.ln() - pj.ln()) - lse / rho).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    };
    Ok(DemandBundle {
        quantities,
        kind: DemandKind::Hicksian,
    })
}

fn require_smooth(u: &UtilityFunction, what: &str) -> Result<()> {
    if u.has_smooth_demand() {
        Ok(())
    } else {
        Err(Error::UnsupportedFamily(format!(
            "{what} needs differentiable demand; linear demand is set-valued"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticityReport {
    /// `matrix[j][k]` = `(d x_j / d p_k) * p_k / x_j`; zero when `x_j = 0`.
    pub matrix: Vec<Vec<f64>>,
    /// Largest negated elasticity over all entries.
    pub max_negated: f64,
    /// Elasticity of substitution of the family (`1 / (1 - rho)` for CES).
    pub substitution: f64,
}

/// Price elasticities of Marshallian demand by central finite differences
/// with step `rel_step * p_k`.
pub fn elasticity_of_demand(
    u: &UtilityFunction,
    p: &PriceVector,
    budget: f64,
    rel_step: f64,
) -> Result<ElasticityReport> {
    require_smooth(u, "elasticity of demand")?;
    let base = marshallian_demand(u, p, budget)?.quantities;
    let m = p.len();
    let mut matrix = vec![vec![0.0; m]; m];
    for k in 0..m {
        let h = rel_step * p[k];
        let up = marshallian_demand(u, &p.with_entry(k, p[k] + h)?, budget)?.quantities;
        let down = marshallian_demand(u, &p.with_entry(k, p[k] - h)?, budget)?.quantities;
        for j in 0..m {
            if base[j] > 0.0 {
                matrix[j][k] = (up[j] - down[j]) / (2.0 * h) * p[k] / base[j];
            }
        }
    }
    let max_negated = matrix
        .iter()
        .flatten()
        .map(|e| -e)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ElasticityReport {
        matrix,
        max_negated,
        substitution: u.substitution_elasticity(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub tol: f64,
}

impl IdentityReport {
    pub fn max_violation(&self) -> f64 {
        self.checks.iter().map(|c| c.max_violation).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_violation <= self.tol)
    }
}

/// Scaling factors used by the homogeneity identities.
pub const HOMOGENEITY_FACTORS: [f64; 4] = [1.0, 0.5, 2.0, 10.0];

fn vec_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_diff(*x, *y)).fold(0.0, f64::max)
}

/// Relative violation of `v(p, lambda b) = lambda v(p, b)` and
/// `e(p, lambda u) = lambda e(p, u)` for one factor.
pub fn homogeneity_violation(
    u: &UtilityFunction,
    p: &PriceVector,
    budget: f64,
    lambda: f64,
) -> Result<f64> {
    let v_scaled = indirect_utility(u, p, lambda * budget)?;
    let v = indirect_utility(u, p, budget)?;
    let e_scaled = expenditure(u, p, lambda * budget)?;
    let e = expenditure(u, p, budget)?;
    Ok(rel_diff(v_scaled, lambda * v).max(rel_diff(e_scaled, lambda * e)))
}

/// Checks the UMP/EMP duality identities at `(p, b)`, using `b` also as the
/// target utility level for the EMP side.
pub fn identity_suite(
    u: &UtilityFunction,
    p: &PriceVector,
    budget: f64,
    tol: f64,
) -> Result<IdentityReport> {
    let target = budget;
    let v = indirect_utility(u, p, budget)?;
    let e = expenditure(u, p, target)?;
    let d = marshallian_demand_with(u, p, budget, TieBreak::LowestIndex)?.quantities;
    let h = hicksian_demand_with(u, p, target, TieBreak::LowestIndex)?.quantities;

    let mut checks = Vec::new();
    let mut push = |name, max_violation| checks.push(IdentityCheck { name, max_violation });

    push("walras p.d(p,b) = b", rel_diff(dot(p, &d), budget));
    push("v(p,b) = u(d(p,b))", rel_diff(u.value(&d), v));
    push("e(p,u) = p.h(p,u)", rel_diff(dot(p, &h), e));
    push("e(p, v(p,b)) = b", rel_diff(expenditure(u, p, v)?, budget));
    push("v(p, e(p,u)) = u", rel_diff(indirect_utility(u, p, e)?, target));
    push(
        "h(p, v(p,b)) = d(p,b)",
        vec_rel_diff(&hicksian_demand_with(u, p, v, TieBreak::LowestIndex)?.quantities, &d),
    );
    push(
        "d(p, e(p,u)) = h(p,u)",
        vec_rel_diff(&marshallian_demand_with(u, p, e, TieBreak::LowestIndex)?.quantities, &h),
    );
    let mut homogeneity: f64 = 0.0;
    for lambda in HOMOGENEITY_FACTORS {
        homogeneity = homogeneity.max(homogeneity_violation(u, p, budget, lambda)?);
    }
    push("degree-1 homogeneity of v and e", homogeneity);
    push(
        "e(p,1) v(p,1) = 1",
        rel_diff(unit_expenditure(u, p)? * indirect_utility(u, p, 1.0)?, 1.0),
    );

    Ok(IdentityReport { checks, tol })
}

/// Error of a finite-difference derivative against the analytic one, relative
/// to `max(|analytic_j|, floor)`.
pub(crate) fn fd_rel_error(fd: f64, analytic: f64, floor: f64) -> f64 {
    (fd - analytic).abs() / analytic.abs().max(floor)
}

/// Shephard's lemma: central differences of `e(p, target)` against the
/// Hicksian demand, returning the worst relative error. Components are
/// compared relative to `max(|h_j|, 1e-6 * max_k |h_k|)`.
pub fn shephard_check(
    u: &UtilityFunction,
    p: &PriceVector,
    target: f64,
    rel_step: f64,
) -> Result<f64> {
    require_smooth(u, "Shephard's lemma check")?;
    let h = hicksian_demand(u, p, target)?.quantities;
    let floor = 1e-6 * max_abs(&h);
    let mut worst: f64 = 0.0;
    for j in 0..p.len() {
        let step = rel_step * p[j];
        let up = expenditure(u, &p.with_entry(j, p[j] + step)?, target)?;
        let down = expenditure(u, &p.with_entry(j, p[j] - step)?, target)?;
        let fd = (up - down) / (2.0 * step);
        if floor > 0.0 {
            worst = worst.max(fd_rel_error(fd, h[j], floor));
        }
    }
    Ok(worst)
}
