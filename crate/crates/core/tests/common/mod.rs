//! Numeric utility and expenditure maximization used as a reference for the
//! closed-form demand systems. Smooth families go through exponentiated gradient
//! ascent over budget shares; Leontief and linear buyers are linear programs.

#![allow(dead_code)]

use fisher_market::{Family, UtilityFunction};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::Rng;

pub const MAX_ITERS: usize = 10_000;

/// Utility straight from the family definitions.
pub fn utility(u: &UtilityFunction, x: &[f64]) -> f64 {
    let v = u.valuations();
    match u.family() {
        Family::Linear => v.iter().zip(x).map(|(v, x)| v * x).sum(),
        Family::CobbDouglas => {
            let total: f64 = v.iter().sum();
            v.iter().zip(x).map(|(a, x)| x.powf(a / total)).product()
        }
        Family::Leontief => v
            .iter()
            .zip(x)
            .filter(|(v, _)| **v > 0.0)
            .map(|(v, x)| x / v)
            .fold(f64::INFINITY, f64::min),
        Family::Ces { rho } => {
            let s: f64 = v.iter().zip(x).filter(|(v, _)| **v > 0.0).map(|(v, x)| v * x.powf(rho)).sum();
            s.powf(1.0 / rho)
        }
    }
}

/// Gradient of `ln u` with respect to the bundle.
fn log_utility_gradient(u: &UtilityFunction, x: &[f64]) -> Vec<f64> {
    let v = u.valuations();
    match u.family() {
        Family::CobbDouglas => {
            let total: f64 = v.iter().sum();
            v.iter().zip(x).map(|(a, x)| a / total / x).collect()
        }
        Family::Ces { rho } => {
            let s: f64 = v.iter().zip(x).map(|(v, x)| v * x.powf(rho)).sum();
            v.iter().zip(x).map(|(v, x)| v * x.powf(rho - 1.0) / s).collect()
        }
        _ => unreachable!("non-smooth families go through the LP route"),
    }
}

/// Maximizes `ln u(b y / p)` over spending shares `y` in the simplex by
/// exponentiated gradient ascent, which keeps every share strictly positive.
fn ascend_shares(u: &UtilityFunction, p: &[f64], b: f64) -> Vec<f64> {
    let m = p.len();
    let bundle = |y: &[f64]| -> Vec<f64> { y.iter().zip(p).map(|(y, p)| b * y / p).collect() };
    let objective = |y: &[f64]| utility(u, &bundle(y)).ln();
    let mut y = vec![1.0 / m as f64; m];
    let mut f = objective(&y);
    let mut eta = 1.0;
    for _ in 0..MAX_ITERS {
        // Euler's identity gives sum_j y_j g_j = 1, so the optimum has g_j = 1 on the support
        let g: Vec<f64> = log_utility_gradient(u, &bundle(&y))
            .iter()
            .zip(p)
            .map(|(g, p)| g * b / p)
            .collect();
        let gap = g.iter().zip(&y).map(|(g, y)| y * (g - 1.0).abs()).sum::<f64>();
        if gap < 1e-15 {
            break;
        }
        let mut moved = false;
        for _ in 0..80 {
            let shift = g.iter().fold(f64::NEG_INFINITY, |a, g| a.max(eta * g));
            let mut trial: Vec<f64> = y.iter().zip(&g).map(|(y, g)| y * (eta * g - shift).exp()).collect();
            let total: f64 = trial.iter().sum();
            trial.iter_mut().for_each(|t| *t /= total);
            let ft = objective(&trial);
            if trial.iter().all(|t| *t > 0.0) && ft.is_finite() && ft >= f {
                moved = ft > f;
                y = trial;
                f = ft;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            break;
        }
    }
    y
}

fn leontief_lp(v: &[f64], p: &[f64], b: f64) -> Vec<f64> {
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let t = problem.add_var(1.0, (0.0, f64::INFINITY));
    let x: Vec<_> = p.iter().map(|_| problem.add_var(0.0, (0.0, f64::INFINITY))).collect();
    for (xj, vj) in x.iter().zip(v) {
        problem.add_constraint(&[(t, *vj), (*xj, -1.0)], ComparisonOp::Le, 0.0);
    }
    let budget: Vec<_> = x.iter().zip(p).map(|(xj, pj)| (*xj, *pj)).collect();
    problem.add_constraint(&budget, ComparisonOp::Le, b);
    let sol = problem.solve().expect("leontief LP solves");
    x.iter().map(|xj| *sol.var_value(*xj)).collect()
}

fn linear_lp(v: &[f64], p: &[f64], b: f64) -> Vec<f64> {
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let x: Vec<_> = v.iter().map(|vj| problem.add_var(*vj, (0.0, f64::INFINITY))).collect();
    let budget: Vec<_> = x.iter().zip(p).map(|(xj, pj)| (*xj, *pj)).collect();
    problem.add_constraint(&budget, ComparisonOp::Le, b);
    let sol = problem.solve().expect("linear LP solves");
    x.iter().map(|xj| *sol.var_value(*xj)).collect()
}

/// Numeric Marshallian demand.
pub fn ump(u: &UtilityFunction, p: &[f64], b: f64) -> Vec<f64> {
    match u.family() {
        Family::Leontief => leontief_lp(u.valuations(), p, b),
        Family::Linear => linear_lp(u.valuations(), p, b),
        _ => ascend_shares(u, p, b)
            .iter()
            .zip(p)
            .map(|(y, p)| b * y / p)
            .collect(),
    }
}

/// Numeric Hicksian demand and expenditure. By degree-1 homogeneity the
/// cheapest bundle reaching `target` is the unit-budget maximizer scaled up
/// to `target`.
pub fn emp(u: &UtilityFunction, p: &[f64], target: f64) -> (Vec<f64>, f64) {
    match u.family() {
        Family::Leontief => {
            let mut problem = Problem::new(OptimizationDirection::Minimize);
            let x: Vec<_> = p.iter().map(|pj| problem.add_var(*pj, (0.0, f64::INFINITY))).collect();
            for (xj, vj) in x.iter().zip(u.valuations()) {
                problem.add_constraint(&[(*xj, 1.0)], ComparisonOp::Ge, target * vj);
            }
            let sol = problem.solve().expect("leontief EMP solves");
            (x.iter().map(|xj| *sol.var_value(*xj)).collect(), sol.objective())
        }
        Family::Linear => {
            let mut problem = Problem::new(OptimizationDirection::Minimize);
            let x: Vec<_> = p.iter().map(|pj| problem.add_var(*pj, (0.0, f64::INFINITY))).collect();
            let level: Vec<_> = x.iter().zip(u.valuations()).map(|(xj, vj)| (*xj, *vj)).collect();
            problem.add_constraint(&level, ComparisonOp::Ge, target);
            let sol = problem.solve().expect("linear EMP solves");
            (x.iter().map(|xj| *sol.var_value(*xj)).collect(), sol.objective())
        }
        _ => {
            let unit = ump(u, p, 1.0);
            let scale = target / utility(u, &unit);
            let x: Vec<f64> = unit.iter().map(|x| x * scale).collect();
            let cost = x.iter().zip(p).map(|(x, p)| x * p).sum();
            (x, cost)
        }
    }
}

/// `max_j |a_j - b_j| / max_k |b_k|`.
pub fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Random utility with moderate CES curvature, for oracle comparisons.
pub fn random_utility(rng: &mut impl Rng, m: usize) -> UtilityFunction {
    let v: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..3.0)).collect();
    match rng.gen_range(0..4) {
        0 => UtilityFunction::linear(v).unwrap(),
        1 => UtilityFunction::cobb_douglas(v).unwrap(),
        2 => UtilityFunction::leontief(v).unwrap(),
        _ => {
            let rho = if rng.gen_bool(0.5) {
                rng.gen_range(0.1..0.9)
            } else {
                rng.gen_range(-10.0..-0.1)
            };
            UtilityFunction::ces(v, rho).unwrap()
        }
    }
}

pub fn random_prices(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.gen_range(0.5..4.0)).collect()
}
