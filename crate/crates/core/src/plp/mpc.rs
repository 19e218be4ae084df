use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::eval::{Evaluator, PlanningScenario};
use super::{annualize_cost, InvestmentPlan, PlpError, StepClearing, HOURS_PER_YEAR};
use crate::agents::{choose_der_investment, ramp_envelope_step, BidCurve, DerSpec, RampEnvelope, Side};
use crate::netmodel::{build_island_ptdf, effective_topology, Contingency};
use crate::protocol::{run_clearing_round, AggregatorAgent, Agent, Role, RoundContext, RoundLog, RoundOutcome, UtilityAgent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcStep {
    pub step: usize,
    pub clearing: StepClearing,
    pub iterations: usize,
    pub converged: bool,
    /// MW dispatched per DER site.
    pub der_dispatch: Vec<f64>,
    /// MW installed per DER site during the step.
    pub der_capacity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcRun {
    pub steps: Vec<MpcStep>,
    pub logs: Vec<RoundLog>,
    /// Cumulative plan after each investment epoch.
    pub plans: Vec<InvestmentPlan>,
}

impl MpcRun {
    pub fn final_plan(&self) -> InvestmentPlan {
        self.plans.last().cloned().unwrap_or_default()
    }

    pub fn all_converged(&self) -> bool {
        self.steps.iter().all(|s| s.converged)
    }
}

/// Utility's switch additions at an epoch: repeatedly add the candidate with
/// the largest annual welfare gain net of its cost while that is positive.
fn add_switches(
    scn: &PlanningScenario,
    caps: &[f64],
    installed: &mut BTreeSet<usize>,
    plan: &mut InvestmentPlan,
) -> Result<(), PlpError> {
    let eval = Evaluator::new(scn, caps.to_vec());
    let pre = scn.topology.preinstalled();
    let with_pre = |s: &BTreeSet<usize>| s.union(&pre).copied().collect::<BTreeSet<usize>>();
    loop {
        let base = eval.expected(&[with_pre(installed)])?[0].operating_welfare();
        let options: Vec<usize> = scn.candidates().into_iter().filter(|c| !installed.contains(c)).collect();
        if options.is_empty() {
            return Ok(());
        }
        let sets: Vec<BTreeSet<usize>> = options
            .iter()
            .map(|&c| {
                let mut s = installed.clone();
                s.insert(c);
                with_pre(&s)
            })
            .collect();
        let outcomes = eval.expected(&sets)?;
        let mut best: Option<(f64, usize)> = None;
        for (i, o) in outcomes.iter().enumerate() {
            let gain = o.operating_welfare() - base - scn.switch_kappa(options[i])?;
            if gain > 1e-9 * base.abs().max(1.0) && best.is_none_or(|b| gain > b.0) {
                best = Some((gain, i));
            }
        }
        let Some((_, i)) = best else { return Ok(()) };
        let s = options[i];
        let id = scn.topology.switches()[s].id.clone();
        plan.kappa.insert(id.clone(), scn.switch_kappa(s)?);
        plan.switches.insert(id);
        installed.insert(s);
    }
}

/// Utility, one aggregator per DER site, and one load aggregator holding
/// every energized demand scaled for step `t`.
fn build_agents(
    scn: &PlanningScenario,
    t: usize,
    specs: &[DerSpec],
    envelopes: &[RampEnvelope],
    energized: &[bool],
) -> Result<(Vec<Agent>, f64), PlpError> {
    let factor = scn.profile[t % scn.profile.len()];
    let n_sites = specs.len();
    let mut agents = vec![Agent::Utility(UtilityAgent {
        index: 0,
        offers: scn
            .utility
            .iter()
            .filter(|u| u.capacity > 0.0)
            .map(|u| Ok((u.bus, BidCurve::single(Side::Supply, u.capacity, u.marginal_cost)?)))
            .collect::<Result<_, PlpError>>()?,
    })];
    for (i, spec) in specs.iter().enumerate() {
        agents.push(Agent::Aggregator(AggregatorAgent {
            index: i,
            ders: vec![(spec.clone(), envelopes[i])],
            demands: Vec::new(),
            perturbation: scn.protocol.perturbation,
            seed: scn.protocol.seed,
        }));
    }
    let demands: Vec<_> = scn.demands.iter().filter(|d| energized[d.bus]).map(|d| d.scaled(factor)).collect();
    let load_forecast_mw = demands.iter().map(|d| d.l_max).sum();
    agents.push(Agent::Aggregator(AggregatorAgent {
        index: n_sites,
        ders: Vec::new(),
        demands,
        perturbation: 0.0,
        seed: scn.protocol.seed,
    }));
    Ok((agents, load_forecast_mw))
}

/// One protocol round for step `t` on the intact network with the scenario's
/// installed DER capacity and static bands.
pub fn operate_step(scn: &PlanningScenario, t: usize) -> Result<RoundOutcome, PlpError> {
    scn.validate()?;
    let topo = &scn.topology;
    let base = effective_topology(topo, &topo.preinstalled(), &Contingency::base_case(1.0))?;
    let ptdf = build_island_ptdf(topo, &base.closed, topo.slack(), &base.energized)?;
    let specs: Vec<DerSpec> = scn.der_sites.iter().map(|s| s.spec.clone()).collect();
    let envelopes: Vec<RampEnvelope> = specs.iter().map(RampEnvelope::static_band).collect();
    let (agents, load_forecast_mw) = build_agents(scn, t, &specs, &envelopes, &base.energized)?;
    let line_caps = topo.lines().iter().map(|l| l.base_capacity).collect();
    let ctx = RoundContext { step: t, hours: scn.step_hours, ptdf, line_caps, load_forecast_mw };
    Ok(run_clearing_round(&agents, &ctx, scn.protocol.tolerance, scn.protocol.max_iters)?)
}

/// Sequential operation over `horizon` steps with investment decisions every
/// `epoch` steps. Each step is cleared by a protocol round on the intact
/// network; ramp envelopes carry over from the previous dispatch.
pub fn mpc_horizon_run(scn: &PlanningScenario, horizon: usize, epoch: usize) -> Result<MpcRun, PlpError> {
    scn.validate()?;
    if epoch == 0 || horizon == 0 || !horizon.is_multiple_of(epoch) {
        return Err(PlpError::Invalid(format!("horizon {horizon} must be a positive multiple of epoch {epoch}")));
    }
    let topo = &scn.topology;
    let base = effective_topology(topo, &topo.preinstalled(), &Contingency::base_case(1.0))?;
    let ptdf = build_island_ptdf(topo, &base.closed, topo.slack(), &base.energized)?;
    let line_caps: Vec<f64> = topo.lines().iter().map(|l| l.base_capacity).collect();
    let n_sites = scn.der_sites.len();
    let der_kappa_kw = annualize_cost(&scn.der_cost)?;

    let mut caps = scn.base_der_caps();
    let mut previous: Option<Vec<f64>> = None;
    let mut site_acc = vec![0.0; n_sites];
    let mut installed = BTreeSet::new();
    let mut plan = InvestmentPlan::default();
    let mut run = MpcRun { steps: Vec::new(), logs: Vec::new(), plans: Vec::new() };

    for t in 0..horizon {
        let specs: Vec<DerSpec> =
            scn.der_sites.iter().zip(&caps).map(|(s, &c)| DerSpec { capacity: c, ..s.spec.clone() }).collect();
        let envelopes: Vec<RampEnvelope> = match &previous {
            None => specs.iter().map(RampEnvelope::static_band).collect(),
            Some(prev) => specs.iter().zip(prev).map(|(s, &p)| ramp_envelope_step(s, p)).collect(),
        };

        let (agents, load_forecast_mw) = build_agents(scn, t, &specs, &envelopes, &base.energized)?;
        let ctx = RoundContext { step: t, hours: scn.step_hours, ptdf: ptdf.clone(), line_caps: line_caps.clone(), load_forecast_mw };
        let out = run_clearing_round(&agents, &ctx, scn.protocol.tolerance, scn.protocol.max_iters)?;

        let mut dispatch = vec![0.0; n_sites];
        for (owner, g) in out.supply_owners.iter().zip(&out.result.dispatch.gen) {
            if owner.role == Role::Aggregator && owner.index < n_sites {
                dispatch[owner.index] += g;
            }
        }
        let slack_price = out.result.nodal_prices[topo.slack()];
        for (acc, s) in site_acc.iter_mut().zip(&scn.der_sites) {
            *acc += (out.result.nodal_prices[s.spec.bus] - slack_price).max(0.0) * scn.step_hours;
        }
        run.steps.push(MpcStep {
            step: t,
            clearing: StepClearing { problem: out.problem, result: out.result },
            iterations: out.log.iterations,
            converged: out.log.converged,
            der_dispatch: dispatch.clone(),
            der_capacity: caps.clone(),
        });
        run.logs.push(out.log);
        previous = Some(dispatch);

        if (t + 1) % epoch == 0 {
            let annualize = HOURS_PER_YEAR / (epoch as f64 * scn.step_hours);
            for (i, site) in scn.der_sites.iter().enumerate() {
                // $/MW-yr to $/kW-yr, the unit of the cost table.
                let signal_kw = site_acc[i] * annualize / 1000.0;
                let add = choose_der_investment(signal_kw, der_kappa_kw, &scn.der_increments);
                if add > 0.0 {
                    caps[i] += add;
                    *plan.der_capacity.entry(site.id.clone()).or_insert(0.0) += add;
                    plan.kappa.insert(site.id.clone(), der_kappa_kw * 1000.0);
                }
            }
            site_acc.iter_mut().for_each(|a| *a = 0.0);
            add_switches(scn, &caps, &mut installed, &mut plan)?;
            run.plans.push(plan.clone());
        }
    }
    Ok(run)
}
