//! Residual check of a clearing against the optimality conditions of the
//! welfare problem. It uses only the problem data and the reported
//! dispatch and multipliers, never the solver's internals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{nodal_prices, ClearingProblem, ClearingResult};
use crate::agents::BidCurve;

pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Largest absolute violation of each condition.
    pub residuals: BTreeMap<String, f64>,
    /// `|primal - dual| / max(1, |primal|)` per hour.
    pub duality_gap: f64,
    pub degenerate: bool,
    pub tolerance: f64,
}

impl KktReport {
    pub fn passed(&self) -> bool {
        self.residuals.values().all(|r| *r <= self.tolerance) && self.duality_gap <= self.tolerance
    }

    /// Name and size of the largest residual.
    pub fn worst(&self) -> (String, f64) {
        let mut worst = ("duality_gap".to_string(), self.duality_gap);
        for (k, v) in &self.residuals {
            if *v > worst.1 || v.is_nan() {
                worst = (k.clone(), *v);
            }
        }
        worst
    }
}

fn interval_distance(x: f64, lo: f64, hi: f64) -> f64 {
    if x.is_nan() {
        f64::INFINITY
    } else if x < lo {
        lo - x
    } else if x > hi {
        x - hi
    } else {
        0.0
    }
}

/// Superdifferential of the utility at `load`, with the curve's bounds
/// folded in.
fn utility_interval(curve: &BidCurve, load: f64, tol: f64) -> (f64, f64) {
    if curve.is_empty() {
        return (0.0, f64::INFINITY);
    }
    let (left, right) = curve.slopes_at(load, 1e-9);
    let lo = if load >= curve.max_quantity() - tol { f64::NEG_INFINITY } else { right };
    let hi = if load <= tol { f64::INFINITY } else { left };
    (lo, hi)
}

pub fn verify_kkt(problem: &ClearingProblem, result: &ClearingResult) -> KktReport {
    verify_kkt_with_tolerance(problem, result, KKT_TOL)
}

pub fn verify_kkt_with_tolerance(problem: &ClearingProblem, result: &ClearingResult, tolerance: f64) -> KktReport {
    let mut res: BTreeMap<String, f64> = BTreeMap::new();
    let mut put = |name: &str, v: f64| {
        let v = if v.is_nan() { f64::INFINITY } else { v.abs() };
        let e = res.entry(name.to_string()).or_insert(0.0);
        *e = e.max(v);
    };

    let d = &result.dispatch;
    let u = &result.duals;
    let n_lines = problem.ptdf.n_lines();
    let n_gen = problem.supply.len();
    let n_load = problem.demand.len();
    let shape_ok = d.gen.len() == n_gen
        && d.load.len() == n_load
        && d.flows.len() == n_lines
        && u.mu.len() == n_lines
        && u.nu.len() == n_lines
        && u.zeta.len() == n_lines
        && u.rho.len() == n_gen
        && u.alpha.len() == n_gen
        && u.beta.len() == n_gen
        && result.nodal_prices.len() == problem.ptdf.n_buses();
    if !shape_ok {
        put("shape", f64::INFINITY);
        return KktReport { residuals: res, duality_gap: f64::INFINITY, degenerate: result.degenerate, tolerance };
    }
    let expansion = |l: usize| d.expansion.get(l).copied().unwrap_or(0.0);

    put("balance", d.gen.iter().sum::<f64>() - d.load.iter().sum::<f64>());
    let implied = problem.ptdf.apply(&problem.injections(d));
    for (f, g) in d.flows.iter().zip(&implied) {
        put("flow_consistency", f - g);
    }

    // Primal feasibility.
    put("primal_feasibility", 0.0);
    for (s, &p) in problem.supply.iter().zip(&d.gen) {
        put("primal_feasibility", (s.p_min - p).max(0.0));
        put("primal_feasibility", (p - s.curve.max_quantity()).max(0.0));
    }
    for (z, &l) in problem.demand.iter().zip(&d.load) {
        put("primal_feasibility", (-l).max(0.0));
        put("primal_feasibility", (l - z.curve.max_quantity()).max(0.0));
    }
    for l in 0..n_lines {
        let cap = problem.line_caps[l] + expansion(l);
        put("primal_feasibility", (d.flows[l].abs() - cap).max(0.0));
        put("primal_feasibility", (-expansion(l)).max(0.0));
        if problem.expansion(l).is_none() {
            put("primal_feasibility", expansion(l));
        }
    }

    // Dual feasibility.
    put("dual_feasibility", 0.0);
    for v in u.mu.iter().chain(&u.nu).chain(&u.alpha).chain(&u.beta).chain(&u.zeta) {
        put("dual_feasibility", (-v).max(0.0));
    }

    // Line complementarity; an unlimited line carries no multiplier.
    put("line_complementarity", 0.0);
    for l in 0..n_lines {
        let cap = problem.line_caps[l] + expansion(l);
        if cap.is_finite() {
            put("line_complementarity", u.mu[l] * (cap - d.flows[l]));
            put("line_complementarity", u.nu[l] * (cap + d.flows[l]));
        } else {
            put("line_complementarity", u.mu[l] + u.nu[l]);
        }
    }

    // Prices follow from the multipliers.
    let prices = nodal_prices(u, &problem.ptdf);
    for (a, b) in prices.iter().zip(&result.nodal_prices) {
        put("nodal_price", a - b);
    }

    put("stationarity", 0.0);
    put("cost_subgradient", 0.0);
    put("generator_complementarity", 0.0);
    for (g, s) in problem.supply.iter().enumerate() {
        let p = d.gen[g];
        let pi = prices[s.bus];
        put("stationarity", u.rho[g] - (pi + u.alpha[g] - u.beta[g]));
        if !s.curve.is_empty() {
            let (lo, hi) = s.curve.slopes_at(p, 1e-9);
            put("cost_subgradient", interval_distance(u.rho[g], lo, hi));
        }
        put("generator_complementarity", u.alpha[g] * (p - s.p_min));
        put("generator_complementarity", u.beta[g] * (s.curve.max_quantity() - p));
    }
    put("utility_supergradient", 0.0);
    for (z, &l) in problem.demand.iter().zip(&d.load) {
        let (lo, hi) = utility_interval(&z.curve, l, 1e-9);
        put("utility_supergradient", interval_distance(prices[z.bus], lo, hi));
    }

    put("expansion", 0.0);
    for l in 0..n_lines {
        match problem.expansion(l) {
            Some(kappa) => {
                put("expansion", u.zeta[l] - (kappa - u.mu[l] - u.nu[l]));
                put("expansion", u.zeta[l] * expansion(l));
            }
            None => put("expansion", u.zeta[l]),
        }
    }

    // Strong duality, per hour.
    let utility: f64 = problem.demand.iter().zip(&d.load).map(|(z, &l)| z.curve.integral(l)).sum();
    let cost: f64 = problem.supply.iter().zip(&d.gen).map(|(s, &p)| s.curve.integral(p)).sum();
    let exp_cost: f64 = (0..n_lines).filter_map(|l| problem.expansion(l).map(|k| k * expansion(l))).sum();
    let primal = utility - cost - exp_cost;
    let mut dual = 0.0;
    for l in 0..n_lines {
        let w = u.mu[l] + u.nu[l];
        if w != 0.0 {
            dual += problem.line_caps[l] * w;
        }
    }
    for (g, s) in problem.supply.iter().enumerate() {
        dual -= u.alpha[g] * s.p_min;
        let r = prices[s.bus] + u.alpha[g];
        dual += s.curve.segments().map(|(w, c)| w * (r - c).max(0.0)).sum::<f64>();
    }
    for z in &problem.demand {
        let pi = prices[z.bus];
        dual += z.curve.segments().map(|(w, v)| w * (v - pi).max(0.0)).sum::<f64>();
    }
    let gap = (primal - dual).abs() / primal.abs().max(1.0);
    let duality_gap = if gap.is_nan() { f64::INFINITY } else { gap };

    KktReport { residuals: res, duality_gap, degenerate: result.degenerate, tolerance }
}
