//! Investment layer: annualized costs, capacity price signals from line
//! shadow prices, switch and DER planning, and the rolling operations plus
//! investment loop.

mod eval;
mod mpc;
mod planner;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::AgentError;
use crate::market::{verify_kkt, ClearingProblem, ClearingResult, MarketError};
use crate::netmodel::NetError;
use crate::protocol::ProtocolError;

pub use eval::{DerSite, Outcome, PlanningScenario, ProtocolSettings, UtilitySource};
pub use mpc::{mpc_horizon_run, operate_step, MpcRun, MpcStep};
pub use planner::{best_by_welfare, min_price_index, plan_switches, sweep_der_capacity, EXHAUSTIVE_LIMIT};

pub const HOURS_PER_YEAR: f64 = 8760.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlpError {
    #[error("invalid cost spec: {0}")]
    InvalidCost(String),
    #[error("zero energy served")]
    ZeroEnergy,
    #[error("clearing {0} failed KKT verification ({1})")]
    UnverifiedInput(usize, String),
    #[error("invalid planning request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    /// $ per switch, or $/kW for DER.
    pub capital: f64,
    /// $/yr per switch, or $/kW-yr.
    pub operating: f64,
    pub discount_rate: f64,
    /// Years.
    pub lifetime: f64,
}

impl CostSpec {
    pub fn validate(&self) -> Result<(), PlpError> {
        if !(self.capital >= 0.0 && self.operating >= 0.0) {
            return Err(PlpError::InvalidCost("capital and operating costs must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.discount_rate) {
            return Err(PlpError::InvalidCost("discount_rate must be in [0, 1)".into()));
        }
        if !(self.lifetime >= 1.0) || !self.lifetime.is_finite() {
            return Err(PlpError::InvalidCost("lifetime >= 1".into()));
        }
        Ok(())
    }
}

/// Equal annual payment recovering `capital` over the lifetime, plus the
/// operating cost. A zero rate falls back to straight-line recovery.
pub fn annualize_cost(spec: &CostSpec) -> Result<f64, PlpError> {
    spec.validate()?;
    let (r, n) = (spec.discount_rate, spec.lifetime);
    let factor = if r < 1e-12 { 1.0 / n } else { r / (1.0 - (1.0 + r).powf(-n)) };
    Ok(spec.capital * factor + spec.operating)
}

/// Average total cost per MWh; revenue at this price recovers `total_cost`.
pub fn reported_unit_price(total_cost: f64, energy: f64) -> Result<f64, PlpError> {
    if !(energy > 0.0) {
        return Err(PlpError::ZeroEnergy);
    }
    Ok(total_cost / energy)
}

/// A solved step together with the problem it solves, so it can be checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepClearing {
    pub problem: ClearingProblem,
    pub result: ClearingResult,
}

/// Per-line `Σ_t (μ + ν)·hours`, multiplied by `year_scale` ($/MW-yr when
/// the scale maps the horizon onto a year). Every clearing is re-verified.
pub fn capacity_price_signal(clearings: &[StepClearing], year_scale: f64) -> Result<Vec<f64>, PlpError> {
    let n_lines = clearings.first().map_or(0, |c| c.problem.ptdf.n_lines());
    let mut signal = vec![0.0; n_lines];
    for (i, c) in clearings.iter().enumerate() {
        let report = verify_kkt(&c.problem, &c.result);
        if !report.passed() {
            return Err(PlpError::UnverifiedInput(i, report.worst().0));
        }
        if c.result.duals.mu.len() != n_lines {
            return Err(PlpError::Invalid("clearings cover different networks".into()));
        }
        for (l, s) in signal.iter_mut().enumerate() {
            *s += (c.result.duals.mu[l] + c.result.duals.nu[l]) * c.problem.hours * year_scale;
        }
    }
    Ok(signal)
}

/// Scale mapping a horizon of `hours` onto one year.
pub fn year_scale_for(hours: f64) -> f64 {
    HOURS_PER_YEAR / hours
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvestmentPlan {
    /// Candidate switch ids installed by the plan.
    pub switches: BTreeSet<String>,
    /// Added MW per DER site id.
    pub der_capacity: BTreeMap<String, f64>,
    /// Annualized unit cost per option id ($/yr per switch, $/MW-yr per DER
    /// site).
    pub kappa: BTreeMap<String, f64>,
}

impl InvestmentPlan {
    pub fn investment_cost(&self) -> f64 {
        let switches: f64 = self.switches.iter().map(|s| self.kappa.get(s).copied().unwrap_or(0.0)).sum();
        let der: f64 = self.der_capacity.iter().map(|(s, k)| k * self.kappa.get(s).copied().unwrap_or(0.0)).sum();
        switches + der
    }

    /// Switch ids concatenated in order, e.g. `ABK`.
    pub fn locations(&self) -> String {
        self.switches.iter().cloned().collect::<Vec<_>>().join("")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub plan: InvestmentPlan,
    /// Expected customers served.
    pub served: f64,
    /// $/MWh.
    pub unit_price: f64,
    /// MWh/yr.
    pub energy: f64,
    /// $/yr: existing network cost, production and annualized investment.
    pub total_cost: f64,
    pub production_cost: f64,
    pub investment_cost: f64,
    /// $/yr: gross utility minus production and investment cost.
    pub welfare: f64,
    /// Per-line $/MW-yr.
    pub capacity_signal: Vec<f64>,
    /// Per DER site, $/MW-yr of price difference to the slack bus.
    pub der_signal: BTreeMap<String, f64>,
    /// Chosen by the greedy fallback rather than exhaustive search.
    pub heuristic: bool,
}

impl PlanResult {
    pub fn revenue(&self) -> f64 {
        self.unit_price * self.energy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::clear_step;

    fn spec(capital: f64, operating: f64) -> CostSpec {
        CostSpec { capital, operating, discount_rate: 0.07, lifetime: 20.0 }
    }

    #[test]
    fn annuity_values() {
        // Independent evaluation of the annuity factor at 7 %, 20 years.
        let mut pv = 0.0;
        for y in 1..=20 {
            pv += 1.0 / 1.07f64.powi(y);
        }
        let ncs = annualize_cost(&spec(20000.0, 200.0)).unwrap();
        assert!((ncs - (20000.0 / pv + 200.0)).abs() < 1e-9);
        assert!((ncs - 2087.9).abs() < 0.1);
        let der = annualize_cost(&spec(340.0, 17.0)).unwrap();
        assert!((der - 49.09).abs() < 0.005);
        let flat = CostSpec { capital: 500.0, operating: 20.0, discount_rate: 0.0, lifetime: 1.0 };
        assert_eq!(annualize_cost(&flat).unwrap(), 520.0);
        assert!(annualize_cost(&CostSpec { lifetime: 0.5, ..flat }).is_err());
        assert!(annualize_cost(&CostSpec { discount_rate: 1.2, ..flat }).is_err());
    }

    #[test]
    fn unit_price_examples() {
        assert_eq!(reported_unit_price(10000.0, 1000.0).unwrap(), 10.0);
        let ncs = annualize_cost(&spec(20000.0, 200.0)).unwrap();
        let step = reported_unit_price(ncs, 7492.0).unwrap();
        assert!((step - 0.2787).abs() < 1e-4);
        assert_eq!(reported_unit_price(5.0, 0.0), Err(PlpError::ZeroEnergy));
    }

    fn congested() -> StepClearing {
        let problem = crate::market::tests_support::two_bus(2.0);
        let result = clear_step(&problem).unwrap();
        StepClearing { problem, result }
    }

    #[test]
    fn signal_from_congested_hours() {
        let c = congested();
        let horizon = vec![c.clone(); 100];
        let scale = year_scale_for(100.0);
        let s = capacity_price_signal(&horizon, scale).unwrap();
        assert!((s[0] - 40.0 * 100.0 * scale).abs() < 1e-6);

        let a = capacity_price_signal(&horizon[..30], scale).unwrap();
        let b = capacity_price_signal(&horizon[30..], scale).unwrap();
        assert!((a[0] + b[0] - s[0]).abs() < 1e-6);

        let free = crate::market::tests_support::two_bus(10.0);
        let r = clear_step(&free).unwrap();
        let s = capacity_price_signal(&[StepClearing { problem: free, result: r }], 1.0).unwrap();
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn signal_rejects_unverified_input() {
        let mut c = congested();
        c.result.duals.mu[0] = 1.0;
        assert!(matches!(capacity_price_signal(&[c], 1.0), Err(PlpError::UnverifiedInput(0, _))));
    }
}
