//! Market data types: utility functions, buyers, prices, allocations, and the
//! JSON market-spec document format.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Utility family of a buyer. The CES limits (rho = 1, rho -> 0, rho -> -inf)
/// are separate variants with their own closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Linear,
    CobbDouglas,
    Leontief,
    Ces { rho: f64 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::CobbDouglas => "cobb_douglas",
            Family::Leontief => "leontief",
            Family::Ces { .. } => "ces",
        }
    }
}

/// How a linear buyer splits its budget between goods tied for the best
/// bang-per-buck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Whole budget on the lowest-index maximizer.
    #[default]
    LowestIndex,
    /// Budget split evenly across all maximizers.
    EqualSplit,
}

/// A homogeneous-of-degree-one utility function.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityFunction {
    family: Family,
    valuations: Vec<f64>,
}

impl UtilityFunction {
    pub fn new(family: Family, valuations: Vec<f64>) -> Result<Self> {
        if valuations.is_empty() {
            return Err(Error::invalid("valuations must cover at least one good"));
        }
        if let Some((j, v)) = valuations
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::invalid(format!(
                "valuation {j} must be a finite non-negative number, got {v}"
            )));
        }
        if !valuations.iter().any(|&v| v > 0.0) {
            return Err(Error::invalid(
                "valuations must contain at least one strictly positive entry",
            ));
        }
        let (family, valuations) = match family {
            Family::Ces { rho } => {
                if !rho.is_finite() {
                    return Err(Error::invalid(
                        "CES rho must be finite; use the leontief family for rho -> -inf",
                    ));
                }
                if rho == 0.0 {
                    return Err(Error::invalid(
                        "CES rho must be non-zero; use the cobb_douglas family for rho -> 0",
                    ));
                }
                if rho > 1.0 {
                    return Err(Error::invalid(format!(
                        "CES rho must be at most 1, got {rho}; use the linear family for rho = 1"
                    )));
                }
                if rho == 1.0 {
                    (Family::Linear, valuations)
                } else {
                    (family, valuations)
                }
            }
            Family::CobbDouglas => (family, normalize_exponents(valuations)),
            _ => (family, valuations),
        };
        Ok(UtilityFunction { family, valuations })
    }

    pub fn linear(valuations: Vec<f64>) -> Result<Self> {
        Self::new(Family::Linear, valuations)
    }

    /// Exponents are normalized to sum to one.
    pub fn cobb_douglas(exponents: Vec<f64>) -> Result<Self> {
        Self::new(Family::CobbDouglas, exponents)
    }

    pub fn leontief(valuations: Vec<f64>) -> Result<Self> {
        Self::new(Family::Leontief, valuations)
    }

    pub fn ces(valuations: Vec<f64>, rho: f64) -> Result<Self> {
        Self::new(Family::Ces { rho }, valuations)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn valuations(&self) -> &[f64] {
        &self.valuations
    }

    pub fn goods(&self) -> usize {
        self.valuations.len()
    }

    /// Elasticity of substitution: infinite for linear, 1 for Cobb-Douglas,
    /// 0 for Leontief and `1 / (1 - rho)` for CES.
    pub fn substitution_elasticity(&self) -> f64 {
        match self.family {
            Family::Linear => f64::INFINITY,
            Family::CobbDouglas => 1.0,
            Family::Leontief => 0.0,
            Family::Ces { rho } => 1.0 / (1.0 - rho),
        }
    }

    /// True for every family whose Marshallian demand is single-valued and
    /// differentiable at strictly positive prices (everything but linear).
    pub fn has_smooth_demand(&self) -> bool {
        !matches!(self.family, Family::Linear)
    }

    /// Evaluates the utility of a non-negative bundle.
    pub fn value(&self, bundle: &[f64]) -> f64 {
        debug_assert_eq!(bundle.len(), self.valuations.len());
        let pairs = || {
            self.valuations
                .iter()
                .zip(bundle)
                .filter(|(v, _)| **v > 0.0)
                .map(|(&v, &x)| (v, x))
        };
        match self.family {
            Family::Linear => pairs().map(|(v, x)| v * x).sum(),
            Family::CobbDouglas => {
                if pairs().any(|(_, x)| x <= 0.0) {
                    return 0.0;
                }
                pairs().map(|(a, x)| a * x.ln()).sum::<f64>().exp()
            }
            Family::Leontief => pairs().map(|(v, x)| x / v).fold(f64::INFINITY, f64::min),
            Family::Ces { rho } => {
                if rho < 0.0 && pairs().any(|(_, x)| x <= 0.0) {
                    return 0.0;
                }
                let lse = log_sum_exp(pairs().map(|(v, x)| {
                    if x > 0.0 {
                        v.ln() + rho * x.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                }));
                if lse == f64::NEG_INFINITY {
                    0.0
                } else {
                    (lse / rho).exp()
                }
            }
        }
    }
}

/// Scales exponents to sum to one, iterating to a fixed point of the map so
/// that normalizing twice is the identity.
fn normalize_exponents(mut v: Vec<f64>) -> Vec<f64> {
    for _ in 0..8 {
        let sum: f64 = v.iter().sum();
        let next: Vec<f64> = v.iter().map(|x| x / sum).collect();
        if next == v {
            break;
        }
        v = next;
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buyer {
    utility: UtilityFunction,
    budget: f64,
}

impl Buyer {
    pub fn new(utility: UtilityFunction, budget: f64) -> Result<Self> {
        if !(budget.is_finite() && budget > 0.0) {
            return Err(Error::invalid(format!(
                "budget must be positive, got {budget}"
            )));
        }
        Ok(Buyer { utility, budget })
    }

    pub fn utility(&self) -> &UtilityFunction {
        &self.utility
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }
}

/// A Fisher market: buyers with budgets, and a supply of each divisible good.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    buyers: Vec<Buyer>,
    supply: Vec<f64>,
    tie_break: TieBreak,
}

impl Market {
    /// Builds a market; `supply` defaults to one unit of every good.
    pub fn new(buyers: Vec<Buyer>, supply: Option<Vec<f64>>) -> Result<Self> {
        let first = buyers
            .first()
            .ok_or_else(|| Error::invalid("a market needs at least one buyer"))?;
        let goods = first.utility.goods();
        if let Some((i, b)) = buyers
            .iter()
            .enumerate()
            .find(|(_, b)| b.utility.goods() != goods)
        {
            return Err(Error::invalid(format!(
                "buyer {i} values {} goods but buyer 0 values {goods}",
                b.utility.goods()
            )));
        }
        let supply = supply.unwrap_or_else(|| vec![1.0; goods]);
        if supply.len() != goods {
            return Err(Error::invalid(format!(
                "supply has {} entries for {goods} goods",
                supply.len()
            )));
        }
        if let Some((j, s)) = supply
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::invalid(format!(
                "supply of good {j} must be positive, got {s}"
            )));
        }
        Ok(Market {
            buyers,
            supply,
            tie_break: TieBreak::default(),
        })
    }

    pub fn with_tie_break(mut self, tie_break: TieBreak) -> Self {
        self.tie_break = tie_break;
        self
    }

    pub fn buyers(&self) -> &[Buyer] {
        &self.buyers
    }

    pub fn supply(&self) -> &[f64] {
        &self.supply
    }

    pub fn tie_break(&self) -> TieBreak {
        self.tie_break
    }

    pub fn goods(&self) -> usize {
        self.supply.len()
    }

    pub fn num_buyers(&self) -> usize {
        self.buyers.len()
    }

    pub fn total_budget(&self) -> f64 {
        self.buyers.iter().map(|b| b.budget).sum()
    }

    /// True when every buyer has single-valued, differentiable demand.
    pub fn has_smooth_demand(&self) -> bool {
        self.buyers.iter().all(|b| b.utility.has_smooth_demand())
    }

    /// Largest substitution elasticity among the buyers.
    pub fn max_substitution_elasticity(&self) -> f64 {
        self.buyers
            .iter()
            .map(|b| b.utility.substitution_elasticity())
            .fold(0.0, f64::max)
    }

    pub fn from_json(document: &str) -> Result<Self> {
        parse_market(document)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MarketDoc::from(self)).expect("market documents serialize")
    }
}

/// Strictly positive prices, one per good.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceVector(Vec<f64>);

impl PriceVector {
    pub fn new(prices: Vec<f64>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::domain("price vector must be non-empty"));
        }
        if let Some((index, &value)) = prices
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::NonPositivePrice { index, value });
        }
        Ok(PriceVector(prices))
    }

    pub fn uniform(goods: usize, price: f64) -> Result<Self> {
        Self::new(vec![price; goods])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Returns a copy with entry `j` replaced.
    pub fn with_entry(&self, j: usize, value: f64) -> Result<Self> {
        let mut p = self.0.clone();
        p[j] = value;
        Self::new(p)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|p| p * factor).collect())
    }
}

impl Deref for PriceVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Non-negative `n x m` allocation matrix, row `i` is buyer `i`'s bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    rows: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        for row in &rows {
            if row.len() != width {
                return Err(Error::DimensionMismatch {
                    expected: width,
                    found: row.len(),
                });
            }
            if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::domain("allocation entries must be finite and non-negative"));
            }
        }
        Ok(Allocation { rows })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn num_buyers(&self) -> usize {
        self.rows.len()
    }

    pub fn goods(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Column sums: total quantity of each good allocated.
    pub fn totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.goods()];
        for row in &self.rows {
            for (t, x) in totals.iter_mut().zip(row) {
                *t += x;
            }
        }
        totals
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.rows
                .iter()
                .map(|r| r.iter().map(|x| x * factor).collect())
                .collect(),
        )
    }
}

/// Default absolute feasibility tolerance.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    /// `supply_j - sum_i x_ij` per good.
    pub slack: Vec<f64>,
    pub feasible: bool,
}

pub fn validate_allocation(
    market: &Market,
    alloc: &Allocation,
    tol: f64,
) -> Result<FeasibilityReport> {
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
    let slack: Vec<f64> = market
        .supply()
        .iter()
        .zip(alloc.totals())
        .map(|(s, t)| s - t)
        .collect();
    let feasible = slack.iter().all(|&s| s >= -tol);
    Ok(FeasibilityReport { slack, feasible })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum FamilyTag {
    Linear,
    CobbDouglas,
    Leontief,
    Ces,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuyerDoc {
    family: FamilyTag,
    valuations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    budget: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketDoc {
    goods: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supply: Option<Vec<f64>>,
    buyers: Vec<BuyerDoc>,
}

impl From<&Market> for MarketDoc {
    fn from(market: &Market) -> Self {
        let buyers = market
            .buyers
            .iter()
            .map(|b| {
                let (family, rho) = match b.utility.family {
                    Family::Linear => (FamilyTag::Linear, None),
                    Family::CobbDouglas => (FamilyTag::CobbDouglas, None),
                    Family::Leontief => (FamilyTag::Leontief, None),
                    Family::Ces { rho } => (FamilyTag::Ces, Some(rho)),
                };
                BuyerDoc {
                    family,
                    valuations: b.utility.valuations.clone(),
                    rho,
                    budget: b.budget,
                }
            })
            .collect();
        MarketDoc {
            goods: market.goods(),
            supply: Some(market.supply.clone()),
            buyers,
        }
    }
}

/// Parses and validates a JSON market-spec document.
pub fn parse_market(document: &str) -> Result<Market> {
    let doc: MarketDoc = serde_json::from_str(document)?;
    if doc.goods == 0 {
        return Err(Error::invalid("a market needs at least one good"));
    }
    let mut buyers = Vec::with_capacity(doc.buyers.len());
    for (i, b) in doc.buyers.into_iter().enumerate() {
        if b.valuations.len() != doc.goods {
            return Err(Error::invalid(format!(
                "buyer {i} has {} valuations but the market has {} goods",
                b.valuations.len(),
                doc.goods
            )));
        }
        let family = match (b.family, b.rho) {
            (FamilyTag::Ces, Some(rho)) => Family::Ces { rho },
            (FamilyTag::Ces, None) => {
                return Err(Error::invalid(format!("buyer {i}: ces family requires rho")))
            }
            (_, Some(_)) => {
                return Err(Error::invalid(format!(
                    "buyer {i}: rho is only valid for the ces family"
                )))
            }
            (FamilyTag::Linear, None) => Family::Linear,
            (FamilyTag::CobbDouglas, None) => Family::CobbDouglas,
            (FamilyTag::Leontief, None) => Family::Leontief,
        };
        let utility = UtilityFunction::new(family, b.valuations)
            .map_err(|e| Error::invalid(format!("buyer {i}: {}", strip_prefix(e))))?;
        let buyer = Buyer::new(utility, b.budget)
            .map_err(|e| Error::invalid(format!("buyer {i}: {}", strip_prefix(e))))?;
        buyers.push(buyer);
    }
    Market::new(buyers, doc.supply)
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::InvalidMarket(msg) => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_buyer_one_good_defaults_supply() {
        let m = parse_market(
            r#"{"goods": 1, "buyers": [{"family": "linear", "valuations": [1], "budget": 1}]}"#,
        )
        .unwrap();
        assert_eq!(m.num_buyers(), 1);
        assert_eq!(m.goods(), 1);
        assert_eq!(m.supply(), &[1.0]);
    }

    #[test]
    fn cobb_douglas_exponents_are_normalized() {
        let m = parse_market(
            r#"{"goods": 2, "buyers": [
                {"family": "cobb_douglas", "valuations": [2, 2], "budget": 1},
                {"family": "cobb_douglas", "valuations": [2, 2], "budget": 1}]}"#,
        )
        .unwrap();
        for b in m.buyers() {
            assert_eq!(b.utility().valuations(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn negative_budget_is_rejected() {
        let err = parse_market(
            r#"{"goods": 1, "buyers": [{"family": "linear", "valuations": [1], "budget": -1}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("budget must be positive"), "{err}");
    }

    #[test]
    fn bad_documents_are_rejected() {
        let cases = [
            r#"{"goods": 2, "buyers": [{"family": "linear", "valuations": [1], "budget": 1}]}"#,
            r#"{"goods": 1, "buyers": [{"family": "linear", "valuations": [-1], "budget": 1}]}"#,
            r#"{"goods": 1, "buyers": [{"family": "linear", "valuations": [0], "budget": 1}]}"#,
            r#"{"goods": 1, "buyers": [{"family": "ces", "valuations": [1], "budget": 1}]}"#,
            r#"{"goods": 1, "buyers": [{"family": "leontief", "valuations": [1], "rho": 0.5, "budget": 1}]}"#,
            r#"{"goods": 1, "buyers": []}"#,
            r#"{"goods": 1, "supply": [0], "buyers": [{"family": "linear", "valuations": [1], "budget": 1}]}"#,
            r#"{"goods": 1, "buyers": [{"family": "quadratic", "valuations": [1], "budget": 1}]}"#,
            r#"{"goods": 1, "extra": 3, "buyers": [{"family": "linear", "valuations": [1], "budget": 1}]}"#,
        ];
        for doc in cases {
            assert!(parse_market(doc).is_err(), "accepted {doc}");
        }
    }

    #[test]
    fn ces_rho_limits_direct_to_dedicated_families() {
        let zero = UtilityFunction::ces(vec![1.0], 0.0).unwrap_err();
        assert!(zero.to_string().contains("cobb_douglas"));
        let big = UtilityFunction::ces(vec![1.0], 1.5).unwrap_err();
        assert!(big.to_string().contains("linear"));
        let one = UtilityFunction::ces(vec![1.0, 2.0], 1.0).unwrap();
        assert_eq!(one.family(), Family::Linear);
    }

    #[test]
    fn allocation_feasibility() {
        let two = Market::new(
            vec![
                Buyer::new(UtilityFunction::linear(vec![1.0, 1.0]).unwrap(), 1.0).unwrap(),
                Buyer::new(UtilityFunction::linear(vec![1.0, 1.0]).unwrap(), 1.0).unwrap(),
            ],
            None,
        )
        .unwrap();
        let r = validate_allocation(
            &two,
            &Allocation::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
            FEASIBILITY_TOL,
        )
        .unwrap();
        assert!(r.feasible);
        assert_eq!(r.slack, vec![0.0, 0.0]);

        let one = Market::new(
            vec![Buyer::new(UtilityFunction::linear(vec![1.0]).unwrap(), 1.0).unwrap()],
            None,
        )
        .unwrap();
        let r = validate_allocation(&one, &Allocation::new(vec![vec![1.1]]).unwrap(), 1e-9).unwrap();
        assert!(!r.feasible);
        assert!((r.slack[0] + 0.1).abs() < 1e-12);

        let r = validate_allocation(&one, &Allocation::new(vec![vec![0.0]]).unwrap(), 1e-9).unwrap();
        assert!(r.feasible);
        assert_eq!(r.slack, vec![1.0]);

        let wrong = Allocation::new(vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            validate_allocation(&one, &wrong, 1e-9),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ces_value_is_homogeneous_and_log_stable() {
        let u = UtilityFunction::ces(vec![1.0, 1.0], 0.5).unwrap();
        assert!((u.value(&[0.8, 0.05]) - 1.25).abs() < 1e-12);
        let steep = UtilityFunction::ces(vec![2.0, 3.0], -101.0).unwrap();
        let x = [1e-4, 2e-4];
        let v1 = steep.value(&x);
        assert!(v1 > 0.0 && v1.is_finite());
        let v2 = steep.value(&[2e-4, 4e-4]);
        assert!((v2 / v1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_prices_rejected() {
        assert!(matches!(
            PriceVector::new(vec![1.0, 0.0]),
            Err(Error::NonPositivePrice { index: 1, .. })
        ));
        assert!(PriceVector::new(vec![1.0, f64::NAN]).is_err());
    }
}
