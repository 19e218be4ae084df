//! In-process simulation of one clearing round between the operator, the
//! aggregators and the utility. Messages go through an ordered queue and the
//! whole exchange is kept as a transcript.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{demand_curve_of, supply_curve_of, AgentError, BidCurve, DemandSpec, DerSpec, DrawKey, RampEnvelope};
use crate::market::{clear_step, verify_kkt, ClearingProblem, ClearingResult, DemandBid, MarketError, SupplyOffer};
use crate::netmodel::PtdfMatrix;

/// Factor applied to an agent's perturbation at each revision.
pub const REVISION_DAMPING: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("max_iters must be >= 1")]
    ZeroIterations,
    #[error("agent set must contain exactly one utility, found {0}")]
    UtilityCount(usize),
    #[error("award failed verification: {0} residual {1:e}")]
    Unverified(String, f64),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("empty round log")]
    EmptyLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Dso,
    Aggregator,
    Utility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId {
    pub role: Role,
    pub index: usize,
}

impl AgentId {
    pub const DSO: AgentId = AgentId { role: Role::Dso, index: 0 };

    pub fn label(&self) -> String {
        match self.role {
            Role::Dso => "dso".into(),
            Role::Aggregator => format!("aggregator:{}", self.index),
            Role::Utility => format!("utility:{}", self.index),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recipient {
    All,
    Agent(AgentId),
}

impl Recipient {
    fn label(&self) -> String {
        match self {
            Recipient::All => "all".into(),
            Recipient::Agent(a) => a.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    Forecast,
    BidCurves,
    PriceUpdate,
    Award,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AwardLine {
    pub bus: usize,
    pub mw: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Forecast { hours: f64, load_forecast_mw: f64 },
    BidCurves { supply: Vec<SupplyOffer>, demand: Vec<DemandBid>, price_responsive: bool },
    PriceUpdate { lambda: f64, nodal_prices: Vec<f64> },
    Award { supply: Vec<AwardLine>, demand: Vec<AwardLine> },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Forecast { .. } => MessageKind::Forecast,
            Payload::BidCurves { .. } => MessageKind::BidCurves,
            Payload::PriceUpdate { .. } => MessageKind::PriceUpdate,
            Payload::Award { .. } => MessageKind::Award,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub step: usize,
    pub iter: usize,
    pub kind: MessageKind,
    pub sender: AgentId,
    pub recipient: Recipient,
    pub payload: Payload,
}

impl Message {
    pub fn payload_digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.payload).expect("payload serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// One transcript line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub step: usize,
    pub iter: usize,
    pub kind: MessageKind,
    pub sender: String,
    pub recipient: String,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub iterations: usize,
    pub price_trajectory: Vec<f64>,
    pub converged: bool,
    pub messages: Vec<Message>,
}

impl RoundLog {
    pub fn transcript(&self) -> Vec<TranscriptRecord> {
        self.messages
            .iter()
            .map(|m| TranscriptRecord {
                step: m.step,
                iter: m.iter,
                kind: m.kind,
                sender: m.sender.label(),
                recipient: m.recipient.label(),
                payload_sha256: m.payload_digest(),
            })
            .collect()
    }
}

/// Line-delimited JSON, one message per line.
pub fn transcript_jsonl<'a>(logs: impl IntoIterator<Item = &'a RoundLog>) -> String {
    let mut out = String::new();
    for log in logs {
        for rec in log.transcript() {
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

/// True iff the last two prices differ by less than `tolerance`; a single
/// iterate counts as converged.
pub fn has_converged(log: &RoundLog, tolerance: f64) -> Result<bool, ProtocolError> {
    trajectory_converged(&log.price_trajectory, tolerance)
}

fn trajectory_converged(prices: &[f64], tolerance: f64) -> Result<bool, ProtocolError> {
    match prices {
        [] => Err(ProtocolError::EmptyLog),
        [_] => Ok(true),
        [.., a, b] => Ok((b - a).abs() < tolerance),
    }
}

/// Utility: conventional supply offered at fixed prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityAgent {
    pub index: usize,
    pub offers: Vec<(usize, BidCurve)>,
}

/// Aggregator: bundles DERs (with their current ramp envelopes) and loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorAgent {
    pub index: usize,
    pub ders: Vec<(DerSpec, RampEnvelope)>,
    pub demands: Vec<DemandSpec>,
    /// $/MWh; zero makes the agent ignore revision requests.
    pub perturbation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Agent {
    Utility(UtilityAgent),
    Aggregator(AggregatorAgent),
}

impl Agent {
    pub fn id(&self) -> AgentId {
        match self {
            Agent::Utility(u) => AgentId { role: Role::Utility, index: u.index },
            Agent::Aggregator(a) => AgentId { role: Role::Aggregator, index: a.index },
        }
    }

    pub fn price_responsive(&self) -> bool {
        match self {
            Agent::Utility(_) => false,
            Agent::Aggregator(a) => a.perturbation > 0.0 && a.ders.iter().any(|(_, e)| e.p_max_t > 0.0),
        }
    }

    /// Curves for `step` at revision `iter`.
    pub fn bid(&self, step: usize, iter: usize) -> Result<(Vec<SupplyOffer>, Vec<DemandBid>), AgentError> {
        match self {
            Agent::Utility(u) => {
                let supply = u
                    .offers
                    .iter()
                    .filter(|(_, c)| !c.is_empty())
                    .map(|(bus, c)| SupplyOffer { bus: *bus, curve: c.clone(), p_min: 0.0 })
                    .collect();
                Ok((supply, Vec::new()))
            }
            Agent::Aggregator(a) => {
                let pert = a.perturbation * REVISION_DAMPING.powi(iter as i32);
                let mut supply = Vec::new();
                for (j, (spec, env)) in a.ders.iter().enumerate() {
                    if env.p_max_t <= 0.0 {
                        continue;
                    }
                    let key = DrawKey { seed: a.seed, agent: ((a.index as u64) << 16) | j as u64, step: step as u64 };
                    let curve = supply_curve_of(spec, env, pert, key)?;
                    supply.push(SupplyOffer { bus: spec.bus, curve, p_min: env.p_min_t.max(0.0) });
                }
                let demand = a
                    .demands
                    .iter()
                    .map(|d| DemandBid { bus: d.bus, curve: demand_curve_of(d) })
                    .filter(|d| !d.curve.is_empty())
                    .collect();
                Ok((supply, demand))
            }
        }
    }
}

/// Network data the operator holds for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundContext {
    pub step: usize,
    pub hours: f64,
    pub ptdf: PtdfMatrix,
    pub line_caps: Vec<f64>,
    pub load_forecast_mw: f64,
}

/// Everything a round produces. `owners[i]` is the agent behind supply offer
/// `i` (and likewise for demand).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub problem: ClearingProblem,
    pub result: ClearingResult,
    pub supply_owners: Vec<AgentId>,
    pub demand_owners: Vec<AgentId>,
    pub log: RoundLog,
}

/// Collect curves, clear, request revisions until the balance price
/// settles, then verify and publish awards.
pub fn run_clearing_round(
    agents: &[Agent],
    ctx: &RoundContext,
    tolerance: f64,
    max_iters: usize,
) -> Result<RoundOutcome, ProtocolError> {
    if max_iters == 0 {
        return Err(ProtocolError::ZeroIterations);
    }
    let utilities = agents.iter().filter(|a| matches!(a, Agent::Utility(_))).count();
    if utilities != 1 {
        return Err(ProtocolError::UtilityCount(utilities));
    }
    let responsive = agents.iter().any(Agent::price_responsive);
    let mut messages = Vec::new();
    let mut prices = Vec::new();
    messages.push(Message {
        step: ctx.step,
        iter: 0,
        kind: MessageKind::Forecast,
        sender: AgentId::DSO,
        recipient: Recipient::All,
        payload: Payload::Forecast { hours: ctx.hours, load_forecast_mw: ctx.load_forecast_mw },
    });

    let mut iter = 0;
    let (problem, result, supply_owners, demand_owners) = loop {
        let mut problem = ClearingProblem {
            ptdf: ctx.ptdf.clone(),
            line_caps: ctx.line_caps.clone(),
            expansion_cost: Vec::new(),
            supply: Vec::new(),
            demand: Vec::new(),
            hours: ctx.hours,
        };
        let mut supply_owners = Vec::new();
        let mut demand_owners = Vec::new();
        for agent in agents {
            let (supply, demand) = agent.bid(ctx.step, iter)?;
            supply_owners.extend(std::iter::repeat_n(agent.id(), supply.len()));
            demand_owners.extend(std::iter::repeat_n(agent.id(), demand.len()));
            problem.supply.extend(supply.iter().cloned());
            problem.demand.extend(demand.iter().cloned());
            messages.push(Message {
                step: ctx.step,
                iter,
                kind: MessageKind::BidCurves,
                sender: agent.id(),
                recipient: Recipient::Agent(AgentId::DSO),
                payload: Payload::BidCurves { supply, demand, price_responsive: agent.price_responsive() },
            });
        }
        let result = clear_step(&problem)?;
        prices.push(result.duals.lambda);
        iter += 1;
        let settled = !responsive || (prices.len() > 1 && trajectory_converged(&prices, tolerance)?);
        if settled || iter >= max_iters {
            break (problem, result, supply_owners, demand_owners);
        }
        messages.push(Message {
            step: ctx.step,
            iter,
            kind: MessageKind::PriceUpdate,
            sender: AgentId::DSO,
            recipient: Recipient::All,
            payload: Payload::PriceUpdate { lambda: result.duals.lambda, nodal_prices: result.nodal_prices.clone() },
        });
    };
    let converged = !responsive || (prices.len() > 1 && trajectory_converged(&prices, tolerance)?);

    let report = verify_kkt(&problem, &result);
    if !report.passed() {
        let (name, value) = report.worst();
        return Err(ProtocolError::Unverified(name, value));
    }
    for agent in agents {
        let id = agent.id();
        let award = |owners: &[AgentId], buses: Vec<usize>, mw: &[f64]| -> Vec<AwardLine> {
            owners
                .iter()
                .zip(buses)
                .zip(mw)
                .filter(|((o, _), _)| **o == id)
                .map(|((_, bus), &mw)| AwardLine { bus, mw, price: result.nodal_prices[bus] })
                .collect()
        };
        let supply = award(&supply_owners, problem.supply.iter().map(|s| s.bus).collect(), &result.dispatch.gen);
        let demand = award(&demand_owners, problem.demand.iter().map(|d| d.bus).collect(), &result.dispatch.load);
        messages.push(Message {
            step: ctx.step,
            iter: iter - 1,
            kind: MessageKind::Award,
            sender: AgentId::DSO,
            recipient: Recipient::Agent(id),
            payload: Payload::Award { supply, demand },
        });
    }

    let log = RoundLog { iterations: iter, price_trajectory: prices, converged, messages };
    Ok(RoundOutcome { problem, result, supply_owners, demand_owners, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Side, UtilitySegment};
    use crate::netmodel::{build_ptdf, Bus, Line, LineState, Topology};

    fn ctx(cap: f64) -> RoundContext {
        let topo = Topology::new(
            vec![
                Bus { id: "1".into(), customers: 10, is_slack: false },
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
        RoundContext {
            step: 3,
            hours: 1.0,
            ptdf: build_ptdf(&topo, &topo.base_closed_set(), 1).unwrap(),
            line_caps: vec![cap],
            load_forecast_mw: 3.0,
        }
    }

    fn agents(perturbation: f64) -> Vec<Agent> {
        let der = DerSpec { bus: 0, capacity: 5.0, marginal_cost: 20.0, ramp_up: 2.0, ramp_down: 2.0, p_min: 0.0 };
        vec![
            Agent::Utility(UtilityAgent { index: 0, offers: vec![(1, BidCurve::single(Side::Supply, 10.0, 30.0).unwrap())] }),
            Agent::Aggregator(AggregatorAgent {
                index: 0,
                ders: vec![(der.clone(), RampEnvelope::static_band(&der))],
                demands: vec![DemandSpec::new(0, 3.0, vec![UtilitySegment { up_to: 3.0, slope: 60.0 }]).unwrap()],
                perturbation,
                seed: 9,
            }),
        ]
    }

    #[test]
    fn fixed_curves_converge_in_one_iteration() {
        let out = run_clearing_round(&agents(0.0), &ctx(10.0), 0.01, 10).unwrap();
        assert_eq!(out.log.iterations, 1);
        assert!(out.log.converged);
        assert!(has_converged(&out.log, 0.01).unwrap());
        // Forecast, two curve sets, two awards.
        assert_eq!(out.log.messages.len(), 5);
    }

    #[test]
    fn responsive_agents_settle_and_respect_message_bound() {
        let a = agents(1.0);
        // The DER undercuts the utility and sets the balance price.
        let out = run_clearing_round(&a, &ctx(10.0), 0.01, 20).unwrap();
        assert!(out.log.converged);
        assert!(out.log.iterations > 1 && out.log.iterations <= 10);
        let n = a.len();
        assert!(out.log.messages.len() <= 2 + 2 * out.log.iterations * n);
        assert!(out.log.messages.iter().filter(|m| m.kind == MessageKind::Award).count() == n);
    }

    #[test]
    fn single_iteration_cap_reports_non_convergence() {
        let out = run_clearing_round(&agents(1.0), &ctx(10.0), 0.01, 1).unwrap();
        assert!(!out.log.converged);
        assert_eq!(out.log.iterations, 1);
        assert_eq!(run_clearing_round(&agents(1.0), &ctx(0.5), 0.01, 0).unwrap_err(), ProtocolError::ZeroIterations);
    }

    #[test]
    fn convergence_rule() {
        let log = |p: Vec<f64>| RoundLog { iterations: p.len(), price_trajectory: p, converged: false, messages: vec![] };
        assert!(has_converged(&log(vec![12.0]), 0.05).unwrap());
        assert!(has_converged(&log(vec![12.0, 11.0, 10.99]), 0.05).unwrap());
        assert!(!has_converged(&log(vec![12.0, 11.0]), 0.5).unwrap());
        assert!(has_converged(&log(vec![]), 0.5).is_err());
    }

    #[test]
    fn transcript_is_deterministic_and_hides_private_data() {
        let a = agents(1.0);
        let one = transcript_jsonl([&run_clearing_round(&a, &ctx(0.5), 0.01, 20).unwrap().log]);
        let two = transcript_jsonl([&run_clearing_round(&a, &ctx(0.5), 0.01, 20).unwrap().log]);
        assert_eq!(one, two);
        let full = serde_json::to_string(&run_clearing_round(&a, &ctx(0.5), 0.01, 20).unwrap().log.messages).unwrap();
        for private in ["\"ramp_up\"", "\"ramp_down\"", "\"marginal_cost\"", "\"utility\":", "\"l_max\""] {
            assert!(!full.contains(private), "{private} leaked");
        }
    }
}
