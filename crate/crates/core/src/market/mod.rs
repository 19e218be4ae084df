//! Welfare-maximizing clearing of one time step over the DC network, with
//! the full multiplier vector and an independent KKT check.
//!
//! Sign conventions: `lambda` is the balance price at the slack bus; `mu`
//! and `nu` price the upper (`flow <= cap`) and lower (`-flow <= cap`)
//! limits of each line, flows being positive from `from` to `to`. The price
//! at bus `b` is `lambda - Σ_l H[l,b]·(mu_l - nu_l)`, which puts the higher
//! price on the importing side of a congested line.

pub mod kkt;
pub mod lp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::BidCurve;
use crate::netmodel::PtdfMatrix;
use lp::{LinearProgram, LpError, Sense};

pub use kkt::{verify_kkt, KktReport, KKT_TOL};

/// Feasibility tolerance on balance and line limits.
pub const DISPATCH_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("clearing is infeasible: {0}")]
    Infeasible(String),
    #[error("clearing is unbounded")]
    Unbounded,
    #[error("infeasible dispatch: {0}")]
    InfeasibleDispatch(String),
    #[error("malformed clearing problem: {0}")]
    Malformed(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplyOffer {
    pub bus: usize,
    /// Offer curve; its last quantity is the step's upper limit.
    pub curve: BidCurve,
    /// Lower limit for the step (MW).
    #[serde(default)]
    pub p_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandBid {
    pub bus: usize,
    /// Marginal-utility curve; its last quantity is `l_max`.
    pub curve: BidCurve,
}

mod caps_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(caps: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<Option<f64>> = caps.iter().map(|&c| (c != f64::INFINITY).then_some(c)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let v = Vec::<Option<f64>>::deserialize(d)?;
        Ok(v.into_iter().map(|c| c.unwrap_or(f64::INFINITY)).collect())
    }
}

/// Everything the operator needs to clear one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingProblem {
    pub ptdf: PtdfMatrix,
    /// MW per line; `f64::INFINITY` leaves a line unconstrained. Stored as
    /// `null` in JSON.
    #[serde(with = "caps_serde")]
    pub line_caps: Vec<f64>,
    /// Optional per-line capacity expansion cost ($/MW per hour of the step).
    /// Lines with a cost get an expansion variable `K_l >= 0`.
    #[serde(default)]
    pub expansion_cost: Vec<Option<f64>>,
    pub supply: Vec<SupplyOffer>,
    pub demand: Vec<DemandBid>,
    pub hours: f64,
}

impl ClearingProblem {
    pub fn validate(&self) -> Result<(), MarketError> {
        let (n_lines, n_buses) = (self.ptdf.n_lines(), self.ptdf.n_buses());
        if self.line_caps.len() != n_lines {
            return Err(MarketError::Malformed(format!("{} line caps for {n_lines} lines", self.line_caps.len())));
        }
        if !self.expansion_cost.is_empty() && self.expansion_cost.len() != n_lines {
            return Err(MarketError::Malformed("expansion_cost length must match lines".into()));
        }
        if self.line_caps.iter().any(|c| !(*c >= 0.0)) {
            return Err(MarketError::Malformed("line caps must be >= 0".into()));
        }
        if !(self.hours > 0.0) {
            return Err(MarketError::Malformed("step length must be > 0".into()));
        }
        for s in &self.supply {
            if s.bus >= n_buses || s.curve.side() != crate::agents::Side::Supply {
                return Err(MarketError::Malformed("supply offer bus or side".into()));
            }
            if !(s.p_min >= 0.0) || s.p_min > s.curve.max_quantity() + DISPATCH_TOL {
                return Err(MarketError::Infeasible(format!("p_min {} exceeds offered quantity", s.p_min)));
            }
        }
        for d in &self.demand {
            if d.bus >= n_buses || d.curve.side() != crate::agents::Side::Demand {
                return Err(MarketError::Malformed("demand bid bus or side".into()));
            }
        }
        Ok(())
    }

    pub fn expansion(&self, line: usize) -> Option<f64> {
        self.expansion_cost.get(line).copied().flatten()
    }

    /// Copy with every line limit removed.
    pub fn unconstrained(&self) -> ClearingProblem {
        ClearingProblem {
            line_caps: vec![f64::INFINITY; self.line_caps.len()],
            expansion_cost: Vec::new(),
            ..self.clone()
        }
    }

    /// Lines that carry a limit row: nonzero sensitivity and a finite or
    /// expandable limit.
    fn limited_lines(&self) -> Vec<usize> {
        (0..self.ptdf.n_lines())
            .filter(|&l| self.ptdf.row(l).iter().any(|h| *h != 0.0))
            .filter(|&l| self.line_caps[l].is_finite())
            .collect()
    }

    pub fn injections(&self, dispatch: &Dispatch) -> Vec<f64> {
        let mut inj = vec![0.0; self.ptdf.n_buses()];
        for (s, p) in self.supply.iter().zip(&dispatch.gen) {
            inj[s.bus] += p;
        }
        for (d, l) in self.demand.iter().zip(&dispatch.load) {
            inj[d.bus] -= l;
        }
        inj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub gen: Vec<f64>,
    pub load: Vec<f64>,
    pub flows: Vec<f64>,
    /// Capacity added on expandable lines (zero elsewhere).
    #[serde(default)]
    pub expansion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub lambda: f64,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    /// Marginal cost at which each generator is dispatched.
    pub rho: Vec<f64>,
    /// Lower-limit multipliers.
    pub alpha: Vec<f64>,
    /// Upper-limit multipliers.
    pub beta: Vec<f64>,
    /// Reduced cost of each line's expansion variable; zero on lines
    /// without one.
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingResult {
    pub dispatch: Dispatch,
    pub duals: Duals,
    pub nodal_prices: Vec<f64>,
    /// $ over the step.
    pub welfare: f64,
    /// A basic variable sits at a bound, so the multipliers may not be
    /// unique.
    pub degenerate: bool,
}

/// Clears one step exactly with the simplex solver.
pub fn clear_step(problem: &ClearingProblem) -> Result<ClearingResult, MarketError> {
    problem.validate()?;
    let ptdf = &problem.ptdf;
    let n_lines = ptdf.n_lines();
    let mut lp = LinearProgram::new();

    // Segment variables.
    let mut demand_vars: Vec<Vec<usize>> = Vec::with_capacity(problem.demand.len());
    for d in &problem.demand {
        demand_vars.push(d.curve.segments().map(|(w, p)| lp.add_var(p, w.max(0.0))).collect());
    }
    let mut supply_vars: Vec<Vec<usize>> = Vec::with_capacity(problem.supply.len());
    for s in &problem.supply {
        supply_vars.push(s.curve.segments().map(|(w, c)| lp.add_var(-c, w.max(0.0))).collect());
    }
    let mut expansion_vars = vec![None; n_lines];
    for (l, slot) in expansion_vars.iter_mut().enumerate() {
        if let Some(k) = problem.expansion(l) {
            *slot = Some(lp.add_var(-k, f64::INFINITY));
        }
    }

    // Withdrawal minus injection, so the dual is the slack-bus price.
    let mut balance = Vec::new();
    for vars in &demand_vars {
        balance.extend(vars.iter().map(|&v| (v, 1.0)));
    }
    for vars in &supply_vars {
        balance.extend(vars.iter().map(|&v| (v, -1.0)));
    }
    let balance_row = lp.add_row(balance, Sense::Eq, 0.0);

    let limited = problem.limited_lines();
    let mut limit_rows = Vec::with_capacity(limited.len());
    for &l in &limited {
        let row = ptdf.row(l);
        let mut expr = Vec::new();
        for (s, vars) in problem.supply.iter().zip(&supply_vars) {
            let h = row[s.bus];
            if h != 0.0 {
                expr.extend(vars.iter().map(|&v| (v, h)));
            }
        }
        for (d, vars) in problem.demand.iter().zip(&demand_vars) {
            let h = row[d.bus];
            if h != 0.0 {
                expr.extend(vars.iter().map(|&v| (v, -h)));
            }
        }
        let cap = problem.line_caps[l];
        let mut upper = expr.clone();
        let mut lower: Vec<(usize, f64)> = expr.iter().map(|&(v, c)| (v, -c)).collect();
        if let Some(k) = expansion_vars[l] {
            upper.push((k, -1.0));
            lower.push((k, -1.0));
        }
        let up = lp.add_row(upper, Sense::Le, cap);
        let lo = lp.add_row(lower, Sense::Le, cap);
        limit_rows.push((l, up, lo));
    }

    let mut floor_rows = vec![None; problem.supply.len()];
    for (g, s) in problem.supply.iter().enumerate() {
        if s.p_min > 0.0 {
            let expr = supply_vars[g].iter().map(|&v| (v, 1.0)).collect();
            floor_rows[g] = Some(lp.add_row(expr, Sense::Ge, s.p_min));
        }
    }

    let sol = lp.solve().map_err(|e| match e {
        LpError::Infeasible => MarketError::Infeasible("supply floors cannot be absorbed within limits".into()),
        LpError::Unbounded => MarketError::Unbounded,
        other => MarketError::Solver(other.to_string()),
    })?;

    let gen: Vec<f64> = supply_vars.iter().map(|vs| vs.iter().map(|&v| sol.x[v]).sum()).collect();
    let load: Vec<f64> = demand_vars.iter().map(|vs| vs.iter().map(|&v| sol.x[v]).sum()).collect();
    let expansion: Vec<f64> = expansion_vars.iter().map(|v| v.map_or(0.0, |k| sol.x[k])).collect();
    let mut dispatch = Dispatch { gen, load, flows: Vec::new(), expansion };
    dispatch.flows = ptdf.apply(&problem.injections(&dispatch));

    let lambda = sol.row_duals[balance_row];
    let mut mu = vec![0.0; n_lines];
    let mut nu = vec![0.0; n_lines];
    for &(l, up, lo) in &limit_rows {
        mu[l] = sol.row_duals[up].max(0.0);
        nu[l] = sol.row_duals[lo].max(0.0);
    }
    let nodal = nodal_prices_from(lambda, &mu, &nu, ptdf);

    let mut alpha = vec![0.0; problem.supply.len()];
    let mut beta = vec![0.0; problem.supply.len()];
    let mut rho = vec![0.0; problem.supply.len()];
    for (g, s) in problem.supply.iter().enumerate() {
        if let Some(r) = floor_rows[g] {
            alpha[g] = (-sol.row_duals[r]).max(0.0);
        }
        let p = dispatch.gen[g];
        let r = nodal[s.bus] + alpha[g];
        let (lo, hi) = s.curve.slopes_at(p, 1e-9);
        if s.curve.is_empty() {
            rho[g] = r;
        } else if r > hi {
            beta[g] = r - hi;
            rho[g] = hi;
        } else if r < lo {
            alpha[g] += lo - r;
            rho[g] = lo;
        } else {
            rho[g] = r;
        }
    }
    let zeta = (0..n_lines)
        .map(|l| problem.expansion(l).map_or(0.0, |k| (k - mu[l] - nu[l]).max(0.0)))
        .collect();

    let duals = Duals { lambda, mu, nu, rho, alpha, beta, zeta };
    let welfare = welfare_of(&dispatch, problem)?;
    Ok(ClearingResult { dispatch, duals, nodal_prices: nodal, welfare, degenerate: sol.degenerate })
}

fn nodal_prices_from(lambda: f64, mu: &[f64], nu: &[f64], ptdf: &PtdfMatrix) -> Vec<f64> {
    let mut prices = vec![lambda; ptdf.n_buses()];
    for l in 0..ptdf.n_lines() {
        let w = mu[l] - nu[l];
        if w != 0.0 {
            for (p, h) in prices.iter_mut().zip(ptdf.row(l)) {
                *p -= h * w;
            }
        }
    }
    prices
}

/// Locational prices implied by a set of multipliers.
pub fn nodal_prices(duals: &Duals, ptdf: &PtdfMatrix) -> Vec<f64> {
    nodal_prices_from(duals.lambda, &duals.mu, &duals.nu, ptdf)
}

/// Gross utility minus production cost (and expansion cost) over the step.
pub fn welfare_of(dispatch: &Dispatch, problem: &ClearingProblem) -> Result<f64, MarketError> {
    if dispatch.gen.len() != problem.supply.len() || dispatch.load.len() != problem.demand.len() {
        return Err(MarketError::InfeasibleDispatch("dispatch shape does not match problem".into()));
    }
    for (d, &l) in problem.demand.iter().zip(&dispatch.load) {
        if l < -DISPATCH_TOL || l > d.curve.max_quantity() + DISPATCH_TOL {
            return Err(MarketError::InfeasibleDispatch(format!("load {l} outside [0, {}]", d.curve.max_quantity())));
        }
    }
    for (s, &p) in problem.supply.iter().zip(&dispatch.gen) {
        if p < s.p_min - DISPATCH_TOL || p > s.curve.max_quantity() + DISPATCH_TOL {
            return Err(MarketError::InfeasibleDispatch(format!("generation {p} outside its envelope")));
        }
    }
    let net: f64 = dispatch.gen.iter().sum::<f64>() - dispatch.load.iter().sum::<f64>();
    if net.abs() > DISPATCH_TOL {
        return Err(MarketError::InfeasibleDispatch(format!("imbalance {net:e} MW")));
    }
    let utility: f64 = problem.demand.iter().zip(&dispatch.load).map(|(d, &l)| d.curve.integral(l)).sum();
    let cost: f64 = problem.supply.iter().zip(&dispatch.gen).map(|(s, &p)| s.curve.integral(p)).sum();
    let expansion: f64 = (0..problem.ptdf.n_lines())
        .filter_map(|l| problem.expansion(l).map(|k| k * dispatch.expansion.get(l).copied().unwrap_or(0.0)))
        .sum();
    Ok((utility - cost - expansion) * problem.hours)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::agents::{BidCurve, Side};
    use crate::netmodel::{build_ptdf, Bus, Line, LineState, Topology};

    /// Load bus 1 fed from the slack at bus 2 over one line; supply at bus 1
    /// costs 10, demand at the slack values energy at 50.
    pub fn two_bus(cap: f64) -> ClearingProblem {
        let topo = Topology::new(
            vec![
                Bus { id: "1".into(), customers: 0, is_slack: false },
                Bus { id: "2".into(), customers: 0, is_slack: true },
            ],
            vec![Line {
                id: "l".into(),
                from: "1".into(),
                to: "2".into(),
                reactance: 0.1,
                base_capacity: cap,
                state: LineState::FixedClosed,
            }],
            vec![],
        )
        .unwrap();
        let ptdf = build_ptdf(&topo, &topo.base_closed_set(), 1).unwrap();
        ClearingProblem {
            ptdf,
            line_caps: vec![cap],
            expansion_cost: Vec::new(),
            supply: vec![SupplyOffer { bus: 0, curve: BidCurve::single(Side::Supply, 5.0, 10.0).unwrap(), p_min: 0.0 }],
            demand: vec![DemandBid { bus: 1, curve: BidCurve::single(Side::Demand, 3.0, 50.0).unwrap() }],
            hours: 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::tests_support::two_bus;
    use crate::agents::{BidCurve, Side};

    #[test]
    fn uncongested_two_bus() {
        let r = clear_step(&two_bus(10.0)).unwrap();
        assert!((r.dispatch.gen[0] - 3.0).abs() < 1e-9);
        assert!((r.dispatch.load[0] - 3.0).abs() < 1e-9);
        assert!((r.duals.lambda - 10.0).abs() < 1e-9);
        assert_eq!(r.duals.mu, vec![0.0]);
        assert_eq!(r.duals.nu, vec![0.0]);
        assert!((r.welfare - 120.0).abs() < 1e-9);
        assert!(r.nodal_prices.iter().all(|p| (p - 10.0).abs() < 1e-9));
    }

    #[test]
    fn congested_two_bus() {
        let r = clear_step(&two_bus(2.0)).unwrap();
        assert!((r.dispatch.gen[0] - 2.0).abs() < 1e-9);
        assert!((r.dispatch.flows[0] - 2.0).abs() < 1e-9);
        assert!((r.nodal_prices[0] - 10.0).abs() < 1e-9);
        assert!((r.nodal_prices[1] - 50.0).abs() < 1e-9);
        assert!((r.duals.mu[0] - 40.0).abs() < 1e-9);
        assert_eq!(r.duals.nu[0], 0.0);
        assert_eq!(nodal_prices(&r.duals, &two_bus(2.0).ptdf), r.nodal_prices);
    }

    #[test]
    fn zero_demand_clears_to_nothing() {
        let mut p = two_bus(2.0);
        p.demand[0].curve = BidCurve::empty(Side::Demand);
        let r = clear_step(&p).unwrap();
        assert_eq!(r.dispatch.gen, vec![0.0]);
        assert_eq!(r.dispatch.flows, vec![0.0]);
        assert_eq!(r.welfare, 0.0);
    }

    #[test]
    fn floor_above_absorbable_load_is_infeasible() {
        let mut p = two_bus(2.0);
        p.supply[0].p_min = 2.5;
        assert!(matches!(clear_step(&p), Err(MarketError::Infeasible(_))));
    }

    #[test]
    fn expansion_variable_prices_capacity() {
        let mut p = two_bus(2.0);
        p.expansion_cost = vec![Some(15.0)];
        let r = clear_step(&p).unwrap();
        // Expansion at 15 $/MW·h is worth it against a 40 $/MWh rent.
        assert!((r.dispatch.expansion[0] - 1.0).abs() < 1e-9);
        assert!((r.duals.mu[0] - 15.0).abs() < 1e-9);
        assert!(r.duals.zeta[0].abs() < 1e-9);
        assert!(verify_kkt(&p, &r).passed());
    }

    #[test]
    fn infeasible_dispatch_rejected_by_welfare() {
        let p = two_bus(2.0);
        let d = Dispatch { gen: vec![3.0], load: vec![2.0], flows: vec![3.0], expansion: vec![0.0] };
        assert!(matches!(welfare_of(&d, &p), Err(MarketError::InfeasibleDispatch(_))));
    }
}
