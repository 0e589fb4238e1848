//! Excess demand and the convex objectives over prices.
//!
//! The potential `phi(p) = sum_j s_j p_j - sum_i b_i ln e_i(p, 1)` has gradient
//! equal to the negative excess demand, so descending it is tatonnement. The
//! Eisenberg-Gale dual differs from it by the constant `sum_i (b_i ln b_i - b_i)`.

use crate::consumer::{self, fd_rel_error};
use crate::error::{Error, Result};
use crate::market::{Allocation, Market, PriceVector};
use crate::numeric::dot;

fn check_prices(market: &Market, p: &PriceVector) -> Result<()> {
    if p.len() != market.goods() {
        return Err(Error::DimensionMismatch {
            expected: market.goods(),
            found: p.len(),
        });
    }
    Ok(())
}

/// Each buyer's Marshallian demand at `p`, using the market's tie-break rule.
pub fn buyer_demands(market: &Market, p: &PriceVector) -> Result<Vec<Vec<f64>>> {
    check_prices(market, p)?;
    market
        .buyers()
        .iter()
        .map(|b| {
            consumer::marshallian_demand_with(b.utility(), p, b.budget(), market.tie_break())
                .map(|d| d.quantities)
        })
        .collect()
}

pub fn aggregate_demand(market: &Market, p: &PriceVector) -> Result<Vec<f64>> {
    let mut total = vec![0.0; market.goods()];
    for row in buyer_demands(market, p)? {
        for (t, x) in total.iter_mut().zip(row) {
            *t += x;
        }
    }
    Ok(total)
}

/// `z_j = sum_i d_ij(p, b_i) - supply_j`.
pub fn excess_demand(market: &Market, p: &PriceVector) -> Result<Vec<f64>> {
    let mut z = aggregate_demand(market, p)?;
    for (zj, s) in z.iter_mut().zip(market.supply()) {
        *zj -= s;
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("excess demand is not finite"));
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialEval {
    pub value: f64,
    /// Always equal to `-excess`.
    pub subgradient: Vec<f64>,
    pub excess: Vec<f64>,
}

/// Value of the potential alone, without computing demand.
pub fn potential_value(market: &Market, p: &PriceVector) -> Result<f64> {
    check_prices(market, p)?;
    let mut value = dot(market.supply(), p);
    for b in market.buyers() {
        value -= b.budget() * consumer::log_unit_expenditure(b.utility(), p)?;
    }
    Ok(value)
}

pub fn potential(market: &Market, p: &PriceVector) -> Result<PotentialEval> {
    let value = potential_value(market, p)?;
    let excess = excess_demand(market, p)?;
    let subgradient = excess.iter().map(|z| -z).collect();
    Ok(PotentialEval {
        value,
        subgradient,
        excess,
    })
}

/// Dual of the Eisenberg-Gale program:
/// `sum_j s_j p_j + sum_i (b_i ln v_i(p, b_i) - b_i)`.
pub fn eg_dual(market: &Market, p: &PriceVector) -> Result<f64> {
    check_prices(market, p)?;
    let mut value = dot(market.supply(), p);
    for b in market.buyers() {
        let v = consumer::indirect_utility(b.utility(), p, b.budget())?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::domain("indirect utility must be positive"));
        }
        value += b.budget() * v.ln() - b.budget();
    }
    Ok(value)
}

/// The constant `sum_i (b_i ln b_i - b_i)` separating `eg_dual` and the potential.
pub fn dual_offset(market: &Market) -> f64 {
    market
        .buyers()
        .iter()
        .map(|b| b.budget() * b.budget().ln() - b.budget())
        .sum()
}

/// Eisenberg-Gale primal objective `sum_i b_i ln u_i(x_i)`.
pub fn eg_primal_objective(market: &Market, alloc: &Allocation) -> Result<f64> {
    if alloc.num_buyers() != market.num_buyers() {
        return Err(Error::DimensionMismatch {
            expected: market.num_buyers(),
            found: alloc.num_buyers(),
        });
    }
    if alloc.goods() != market.goods() {
        return Err(Error::DimensionMismatch {
            expected: market.goods(),
            found: alloc.goods(),
        });
    }
    let mut total = 0.0;
    for (i, b) in market.buyers().iter().enumerate() {
        let u = b.utility().value(alloc.row(i));
        if !(u > 0.0) {
            return Err(Error::domain(format!("buyer {i} receives zero utility")));
        }
        total += b.budget() * u.ln();
    }
    Ok(total)
}

/// Allocation in which every buyer takes its Marshallian demand at `p`.
pub fn allocation_from_prices(market: &Market, p: &PriceVector) -> Result<Allocation> {
    Allocation::new(buyer_demands(market, p)?)
}

/// Central-difference check of `grad phi = -z`. Component `j` is compared
/// relative to `max(|z_j|, supply_j)`; returns the worst error.
pub fn subgradient_check(market: &Market, p: &PriceVector, rel_step: f64) -> Result<f64> {
    if !market.has_smooth_demand() {
        return Err(Error::UnsupportedFamily(
            "subgradient check needs differentiable demand; linear buyers make it set-valued"
                .into(),
        ));
    }
    let eval = potential(market, p)?;
    let mut worst: f64 = 0.0;
    for j in 0..p.len() {
        let h = rel_step * p[j];
        let up = potential_value(market, &p.with_entry(j, p[j] + h)?)?;
        let down = potential_value(market, &p.with_entry(j, p[j] - h)?)?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max(fd_rel_error(fd, eval.subgradient[j], market.supply()[j]));
    }
    Ok(worst)
}
