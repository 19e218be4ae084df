use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{annualize_cost, CostSpec, PlpError, HOURS_PER_YEAR};
use crate::agents::{demand_curve_of, supply_curve_of, BidCurve, DemandSpec, DerSpec, DrawKey, RampEnvelope, Side};
use crate::market::{clear_step, verify_kkt, ClearingProblem, DemandBid, SupplyOffer};
use crate::netmodel::{build_island_ptdf, check_weights, effective_topology, Contingency, EffectiveTopology, SwitchKind, Topology};

/// Conventional supply owned by the utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySource {
    pub bus: usize,
    pub capacity: f64,
    pub marginal_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerSite {
    pub id: String,
    /// `capacity` is the MW already installed before planning.
    pub spec: DerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSettings {
    pub tolerance: f64,
    pub max_iters: usize,
    /// $/MWh amplitude of the aggregators' bid revisions.
    pub perturbation: f64,
    pub seed: u64,
}

/// Runtime form of a scenario, with every id resolved to an index.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningScenario {
    pub topology: Topology,
    pub demands: Vec<DemandSpec>,
    /// Load multiplier per step of the representative horizon.
    pub profile: Vec<f64>,
    pub step_hours: f64,
    pub utility: Vec<UtilitySource>,
    pub der_sites: Vec<DerSite>,
    pub contingencies: Vec<Contingency>,
    pub nos_cost: CostSpec,
    pub ncs_cost: CostSpec,
    /// Per kW.
    pub der_cost: CostSpec,
    /// $/yr already committed to the network before any planned investment.
    pub existing_annualized_cost: f64,
    pub protocol: ProtocolSettings,
    /// MW increments an aggregator may add at one investment epoch.
    pub der_increments: Vec<f64>,
}

impl PlanningScenario {
    pub fn validate(&self) -> Result<(), PlpError> {
        let n = self.topology.buses().len();
        if self.profile.is_empty() || self.profile.iter().any(|f| !(*f >= 0.0)) {
            return Err(PlpError::Invalid("profile must be nonempty and >= 0".into()));
        }
        if !(self.step_hours > 0.0) {
            return Err(PlpError::Invalid("step_hours > 0".into()));
        }
        for d in &self.demands {
            d.validate()?;
            if d.bus >= n {
                return Err(PlpError::Invalid("demand bus out of range".into()));
            }
        }
        for s in &self.der_sites {
            s.spec.validate()?;
            if s.spec.bus >= n {
                return Err(PlpError::Invalid(format!("DER site `{}` bus out of range", s.id)));
            }
        }
        for u in &self.utility {
            if u.bus >= n || !(u.capacity >= 0.0) || !u.marginal_cost.is_finite() {
                return Err(PlpError::Invalid("utility source".into()));
            }
        }
        if self.utility.is_empty() {
            return Err(PlpError::Invalid("at least one utility source".into()));
        }
        check_weights(&self.contingencies)?;
        for c in [&self.nos_cost, &self.ncs_cost, &self.der_cost] {
            c.validate()?;
        }
        if !(self.existing_annualized_cost >= 0.0) {
            return Err(PlpError::Invalid("existing_annualized_cost >= 0".into()));
        }
        Ok(())
    }

    pub fn horizon_hours(&self) -> f64 {
        self.profile.len() as f64 * self.step_hours
    }

    pub fn year_scale(&self) -> f64 {
        HOURS_PER_YEAR / self.horizon_hours()
    }

    /// Annualized cost of switch `s` ($/yr).
    pub fn switch_kappa(&self, s: usize) -> Result<f64, PlpError> {
        match self.topology.switches()[s].kind {
            SwitchKind::Nos => annualize_cost(&self.nos_cost),
            SwitchKind::Ncs => annualize_cost(&self.ncs_cost),
        }
    }

    /// Annualized DER cost in $/MW-yr.
    pub fn der_kappa(&self) -> Result<f64, PlpError> {
        Ok(annualize_cost(&self.der_cost)? * 1000.0)
    }

    /// Switches open to planning: those not already installed.
    pub fn candidates(&self) -> Vec<usize> {
        let pre = self.topology.preinstalled();
        (0..self.topology.switches().len()).filter(|s| !pre.contains(s)).collect()
    }

    pub fn base_der_caps(&self) -> Vec<f64> {
        self.der_sites.iter().map(|s| s.spec.capacity).collect()
    }

    /// Clearing problem for step `t` on an energized island. DER sites use
    /// `caps` and their static band unless `envelopes` is given.
    pub fn step_problem(
        &self,
        eff: &EffectiveTopology,
        t: usize,
        caps: &[f64],
        envelopes: Option<&[RampEnvelope]>,
    ) -> Result<StepLayout, PlpError> {
        let topo = &self.topology;
        let ptdf = build_island_ptdf(topo, &eff.closed, topo.slack(), &eff.energized)?;
        self.step_problem_with(ptdf, eff, t, caps, envelopes)
    }

    pub(crate) fn step_problem_with(
        &self,
        ptdf: crate::netmodel::PtdfMatrix,
        eff: &EffectiveTopology,
        t: usize,
        caps: &[f64],
        envelopes: Option<&[RampEnvelope]>,
    ) -> Result<StepLayout, PlpError> {
        let factor = self.profile[t % self.profile.len()];
        let line_caps = self.topology.lines().iter().map(|l| l.base_capacity).collect();
        let mut problem = ClearingProblem {
            ptdf,
            line_caps,
            expansion_cost: Vec::new(),
            supply: Vec::new(),
            demand: Vec::new(),
            hours: self.step_hours,
        };
        let mut der_index = vec![None; self.der_sites.len()];
        for u in &self.utility {
            if eff.energized[u.bus] && u.capacity > 0.0 {
                let curve = BidCurve::single(Side::Supply, u.capacity, u.marginal_cost)?;
                problem.supply.push(SupplyOffer { bus: u.bus, curve, p_min: 0.0 });
            }
        }
        for (i, site) in self.der_sites.iter().enumerate() {
            if !eff.energized[site.spec.bus] || caps[i] <= 0.0 {
                continue;
            }
            let spec = DerSpec { capacity: caps[i], ..site.spec.clone() };
            let env = envelopes.map_or_else(|| RampEnvelope::static_band(&spec), |e| e[i]);
            if env.p_max_t <= 0.0 {
                continue;
            }
            let key = DrawKey { seed: self.protocol.seed, agent: i as u64, step: t as u64 };
            let curve = supply_curve_of(&spec, &env, 0.0, key)?;
            der_index[i] = Some(problem.supply.len());
            problem.supply.push(SupplyOffer { bus: spec.bus, curve, p_min: env.p_min_t });
        }
        let mut demand_index = vec![None; self.demands.len()];
        for (i, d) in self.demands.iter().enumerate() {
            if !eff.energized[d.bus] {
                continue;
            }
            let curve = demand_curve_of(&d.scaled(factor));
            if curve.is_empty() {
                continue;
            }
            demand_index[i] = Some(problem.demand.len());
            problem.demand.push(DemandBid { bus: d.bus, curve });
        }
        Ok(StepLayout { problem, der_index, demand_index })
    }
}

/// A step problem and where each DER site and demand ended up in it.
#[derive(Debug, Clone)]
pub struct StepLayout {
    pub problem: ClearingProblem,
    pub der_index: Vec<Option<usize>>,
    pub demand_index: Vec<Option<usize>>,
}

/// Annual totals for one network state, or their expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub served: f64,
    /// MWh/yr.
    pub energy: f64,
    pub production_cost: f64,
    pub gross_utility: f64,
    /// Per line, $/MW-yr.
    pub line_signal: Vec<f64>,
    /// Per DER site, $/MW-yr.
    pub site_signal: Vec<f64>,
}

impl Outcome {
    fn zero(n_lines: usize, n_sites: usize) -> Self {
        Outcome {
            served: 0.0,
            energy: 0.0,
            production_cost: 0.0,
            gross_utility: 0.0,
            line_signal: vec![0.0; n_lines],
            site_signal: vec![0.0; n_sites],
        }
    }

    fn add_scaled(&mut self, other: &Outcome, w: f64) {
        self.served += w * other.served;
        self.energy += w * other.energy;
        self.production_cost += w * other.production_cost;
        self.gross_utility += w * other.gross_utility;
        for (a, b) in self.line_signal.iter_mut().zip(&other.line_signal) {
            *a += w * b;
        }
        for (a, b) in self.site_signal.iter_mut().zip(&other.site_signal) {
            *a += w * b;
        }
    }

    /// Gross utility minus production cost.
    pub fn operating_welfare(&self) -> f64 {
        self.gross_utility - self.production_cost
    }
}

/// Clears the whole representative horizon for one network state.
fn evaluate_state(scn: &PlanningScenario, eff: &EffectiveTopology, caps: &[f64]) -> Result<Outcome, PlpError> {
    let topo = &scn.topology;
    let ptdf = build_island_ptdf(topo, &eff.closed, topo.slack(), &eff.energized)?;
    let scale = scn.year_scale() * scn.step_hours;
    let mut out = Outcome::zero(topo.lines().len(), scn.der_sites.len());
    out.served = eff.energized_customers(topo);
    for t in 0..scn.profile.len() {
        let layout = scn.step_problem_with(ptdf.clone(), eff, t, caps, None)?;
        let p = &layout.problem;
        let r = clear_step(p)?;
        let report = verify_kkt(p, &r);
        if !report.passed() {
            return Err(PlpError::UnverifiedInput(t, report.worst().0));
        }
        out.energy += scale * r.dispatch.load.iter().sum::<f64>();
        out.production_cost +=
            scale * p.supply.iter().zip(&r.dispatch.gen).map(|(s, &g)| s.curve.integral(g)).sum::<f64>();
        out.gross_utility +=
            scale * p.demand.iter().zip(&r.dispatch.load).map(|(d, &l)| d.curve.integral(l)).sum::<f64>();
        for (l, s) in out.line_signal.iter_mut().enumerate() {
            *s += scale * (r.duals.mu[l] + r.duals.nu[l]);
        }
        let slack_price = r.nodal_prices[topo.slack()];
        for (i, site) in scn.der_sites.iter().enumerate() {
            if eff.energized[site.spec.bus] {
                out.site_signal[i] += scale * (r.nodal_prices[site.spec.bus] - slack_price).max(0.0);
            }
        }
    }
    Ok(out)
}

type StateKey = (usize, EffectiveTopology);

/// Expected outcomes of switch sets at fixed DER capacities. Network states
/// repeat heavily across switch sets, so each distinct (contingency, state)
/// pair is cleared once.
pub(crate) struct Evaluator<'a> {
    scn: &'a PlanningScenario,
    caps: Vec<f64>,
    cache: Mutex<HashMap<StateKey, Outcome>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(scn: &'a PlanningScenario, caps: Vec<f64>) -> Self {
        Evaluator { scn, caps, cache: Mutex::new(HashMap::new()) }
    }

    pub fn expected(&self, sets: &[BTreeSet<usize>]) -> Result<Vec<Outcome>, PlpError> {
        let scn = self.scn;
        let keys: Vec<Vec<StateKey>> = sets
            .par_iter()
            .map(|installed| {
                scn.contingencies
                    .iter()
                    .enumerate()
                    .map(|(c, cont)| Ok((c, effective_topology(&scn.topology, installed, cont)?)))
                    .collect::<Result<Vec<_>, PlpError>>()
            })
            .collect::<Result<_, _>>()?;

        let missing: Vec<StateKey> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = BTreeSet::new();
            let mut out = Vec::new();
            for k in keys.iter().flatten() {
                if !cache.contains_key(k) && seen.insert((k.0, k.1.energized.clone(), k.1.closed.clone())) {
                    out.push(k.clone());
                }
            }
            out
        };
        let computed: Vec<(StateKey, Outcome)> = missing
            .into_par_iter()
            .map(|k| {
                let o = evaluate_state(scn, &k.1, &self.caps)?;
                Ok((k, o))
            })
            .collect::<Result<_, PlpError>>()?;
        let mut cache = self.cache.lock().expect("cache lock");
        cache.extend(computed);

        let n_lines = scn.topology.lines().len();
        let n_sites = scn.der_sites.len();
        Ok(keys
            .iter()
            .map(|ks| {
                let mut o = Outcome::zero(n_lines, n_sites);
                for k in ks {
                    o.add_scaled(&cache[k], scn.contingencies[k.0].probability_weight);
                }
                o
            })
            .collect())
    }
}
