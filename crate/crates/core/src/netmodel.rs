//! Grid topology, switch reconfiguration after faults, and DC power-flow
//! sensitivities (PTDF).
//!
//! Buses, lines and switch candidates are addressed by their position in the
//! [`Topology`]; string ids only matter at the scenario boundary.

use std::collections::{BTreeSet, HashMap, VecDeque};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sum-of-injections tolerance for [`line_flows`], relative to the injection
/// magnitude (absolute below 1 MW).
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("disconnected graph: bus `{0}` is not reachable from the slack bus")]
    DisconnectedGraph(String),
    #[error("reduced susceptance matrix is numerically singular")]
    SingularMatrix,
    #[error("unbalanced injection: net sum {0:e} MW")]
    UnbalancedInjection(f64),
    #[error("unknown switch candidate index {0}")]
    UnknownSwitch(usize),
    #[error("unknown contingency `{0}`")]
    UnknownContingency(String),
    #[error("contingency weights sum to {0}, expected 1")]
    InvalidWeights(f64),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    pub customers: u32,
    pub is_slack: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LineState {
    FixedClosed,
    /// Hosts exactly one switch candidate; its normal position follows the
    /// candidate kind (NOS open, NCS closed).
    Switchable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub id: String,
    pub from: String,
    pub to: String,
    /// Per-unit series reactance.
    pub reactance: f64,
    /// MW.
    pub base_capacity: f64,
    pub state: LineState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SwitchKind {
    /// Normally-open tie.
    Nos,
    /// Normally-closed sectionalizer.
    Ncs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchCandidate {
    pub id: String,
    pub kind: SwitchKind,
    pub host_line: String,
    #[serde(default)]
    pub installed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub id: String,
    /// Line indices.
    pub failed_lines: BTreeSet<usize>,
    pub probability_weight: f64,
}

impl Contingency {
    pub fn base_case(weight: f64) -> Self {
        Contingency {
            id: "base".to_string(),
            failed_lines: BTreeSet::new(),
            probability_weight: weight,
        }
    }
}

/// Validated network: unique ids, one slack bus, positive reactances, and a
/// connected graph over the normally-closed lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    switches: Vec<SwitchCandidate>,
    slack: usize,
    ends: Vec<(usize, usize)>,
    /// Switch candidate hosted on each line, if any.
    line_switch: Vec<Option<usize>>,
    switch_line: Vec<usize>,
    bus_index: HashMap<String, usize>,
    line_index: HashMap<String, usize>,
    switch_index: HashMap<String, usize>,
}

fn index_of<T>(items: &[T], id: impl Fn(&T) -> &str, what: &str) -> Result<HashMap<String, usize>, NetError> {
    let mut map = HashMap::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if map.insert(id(item).to_string(), i).is_some() {
            return Err(NetError::Invalid(format!("duplicate {what} id `{}`", id(item))));
        }
    }
    Ok(map)
}

impl Topology {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>, switches: Vec<SwitchCandidate>) -> Result<Self, NetError> {
        let bus_index = index_of(&buses, |b| &b.id, "bus")?;
        let line_index = index_of(&lines, |l| &l.id, "line")?;
        let switch_index = index_of(&switches, |s| &s.id, "switch")?;

        let slacks: Vec<usize> = buses.iter().enumerate().filter(|(_, b)| b.is_slack).map(|(i, _)| i).collect();
        if slacks.len() != 1 {
            return Err(NetError::Invalid(format!("exactly one slack bus required, found {}", slacks.len())));
        }

        let mut ends = Vec::with_capacity(lines.len());
        for line in &lines {
            if !(line.reactance > 0.0) || !line.reactance.is_finite() {
                return Err(NetError::Invalid(format!("line `{}`: reactance > 0", line.id)));
            }
            if !(line.base_capacity >= 0.0) {
                return Err(NetError::Invalid(format!("line `{}`: base_capacity >= 0", line.id)));
            }
            let lookup = |id: &str| {
                bus_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| NetError::Invalid(format!("line `{}` references unknown bus `{id}`", line.id)))
            };
            let (f, t) = (lookup(&line.from)?, lookup(&line.to)?);
            if f == t {
                return Err(NetError::Invalid(format!("line `{}`: from != to", line.id)));
            }
            ends.push((f, t));
        }

        let mut line_switch = vec![None; lines.len()];
        let mut switch_line = Vec::with_capacity(switches.len());
        for (s, sw) in switches.iter().enumerate() {
            let l = *line_index.get(&sw.host_line).ok_or_else(|| {
                NetError::Invalid(format!("switch `{}` references unknown line `{}`", sw.id, sw.host_line))
            })?;
            if lines[l].state != LineState::Switchable {
                return Err(NetError::Invalid(format!("switch `{}` sits on fixed-closed line `{}`", sw.id, lines[l].id)));
            }
            if line_switch[l].replace(s).is_some() {
                return Err(NetError::Invalid(format!("line `{}` hosts more than one switch", lines[l].id)));
            }
            switch_line.push(l);
        }
        for (l, line) in lines.iter().enumerate() {
            if line.state == LineState::Switchable && line_switch[l].is_none() {
                return Err(NetError::Invalid(format!("switchable line `{}` hosts no switch candidate", line.id)));
            }
        }

        let topo = Topology {
            buses,
            lines,
            switches,
            slack: slacks[0],
            ends,
            line_switch,
            switch_line,
            bus_index,
            line_index,
            switch_index,
        };
        let reach = topo.reachable(&topo.base_closed_set(), topo.slack);
        if let Some(b) = reach.iter().position(|r| !r) {
            return Err(NetError::DisconnectedGraph(topo.buses[b].id.clone()));
        }
        Ok(topo)
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn switches(&self) -> &[SwitchCandidate] {
        &self.switches
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    pub fn line_ends(&self, line: usize) -> (usize, usize) {
        self.ends[line]
    }

    pub fn bus(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn line(&self, id: &str) -> Option<usize> {
        self.line_index.get(id).copied()
    }

    pub fn switch(&self, id: &str) -> Option<usize> {
        self.switch_index.get(id).copied()
    }

    pub fn switch_host(&self, switch: usize) -> usize {
        self.switch_line[switch]
    }

    pub fn total_customers(&self) -> f64 {
        self.buses.iter().map(|b| f64::from(b.customers)).sum()
    }

    /// Switches whose `installed` flag is set in the topology itself.
    pub fn preinstalled(&self) -> BTreeSet<usize> {
        self.switches.iter().enumerate().filter(|(_, s)| s.installed).map(|(i, _)| i).collect()
    }

    fn normally_closed(&self, line: usize) -> bool {
        match self.line_switch[line] {
            Some(s) => self.switches[s].kind == SwitchKind::Ncs,
            None => true,
        }
    }

    /// All fixed lines plus NCS-hosting lines; NOS ties stay open.
    pub fn base_closed_set(&self) -> BTreeSet<usize> {
        (0..self.lines.len()).filter(|&l| self.normally_closed(l)).collect()
    }

    fn reachable(&self, closed: &BTreeSet<usize>, root: usize) -> Vec<bool> {
        let adj = self.adjacency(closed);
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(b) = queue.pop_front() {
            for &(_, nb) in &adj[b] {
                if !seen[nb] {
                    seen[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        seen
    }

    fn adjacency(&self, closed: &BTreeSet<usize>) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for &l in closed {
            let (f, t) = self.ends[l];
            adj[f].push((l, t));
            adj[t].push((l, f));
        }
        adj
    }
}

/// Line-flow sensitivities to bus injections, with the slack bus absorbing
/// the balance. Rows cover every topology line (open lines are zero rows);
/// columns cover every bus, with the slack column and any bus outside the
/// slack island identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtdfMatrix {
    entries: Vec<f64>,
    n_lines: usize,
    n_buses: usize,
    slack: usize,
}

impl PtdfMatrix {
    pub fn n_lines(&self) -> usize {
        self.n_lines
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    #[inline]
    pub fn get(&self, line: usize, bus: usize) -> f64 {
        self.entries[line * self.n_buses + bus]
    }

    pub fn row(&self, line: usize) -> &[f64] {
        &self.entries[line * self.n_buses..(line + 1) * self.n_buses]
    }

    /// Row-wise product without the balance check.
    pub fn apply(&self, injections: &[f64]) -> Vec<f64> {
        (0..self.n_lines)
            .map(|l| self.row(l).iter().zip(injections).map(|(h, p)| h * p).sum())
            .collect()
    }
}

/// PTDF for a closed line set that must span every bus.
pub fn build_ptdf(topology: &Topology, closed_set: &BTreeSet<usize>, slack: usize) -> Result<PtdfMatrix, NetError> {
    let required = vec![true; topology.buses.len()];
    build_island_ptdf(topology, closed_set, slack, &required)
}

/// PTDF restricted to the island containing `slack`. Buses flagged in
/// `required` (those carrying load or generation) must lie in that island.
pub fn build_island_ptdf(
    topology: &Topology,
    closed_set: &BTreeSet<usize>,
    slack: usize,
    required: &[bool],
) -> Result<PtdfMatrix, NetError> {
    let n_buses = topology.buses.len();
    let n_lines = topology.lines.len();
    if slack >= n_buses {
        return Err(NetError::Invalid(format!("slack bus index {slack} out of range")));
    }
    if let Some(&l) = closed_set.iter().find(|&&l| l >= n_lines) {
        return Err(NetError::Invalid(format!("line index {l} out of range")));
    }
    let island = topology.reachable(closed_set, slack);
    if let Some(b) = (0..n_buses).find(|&b| required.get(b).copied().unwrap_or(false) && !island[b]) {
        return Err(NetError::DisconnectedGraph(topology.buses[b].id.clone()));
    }

    // Reduced susceptance matrix over island buses other than the slack.
    let mut col_of = vec![None; n_buses];
    let mut order = Vec::new();
    for b in (0..n_buses).filter(|&b| island[b] && b != slack) {
        col_of[b] = Some(order.len());
        order.push(b);
    }
    let n = order.len();
    let mut entries = vec![0.0; n_lines * n_buses];
    if n == 0 {
        return Ok(PtdfMatrix { entries, n_lines, n_buses, slack });
    }

    let mut b_red = DMatrix::<f64>::zeros(n, n);
    for &l in closed_set {
        let (f, t) = topology.ends[l];
        if !island[f] {
            continue;
        }
        let y = 1.0 / topology.lines[l].reactance;
        match (col_of[f], col_of[t]) {
            (Some(i), Some(j)) => {
                b_red[(i, i)] += y;
                b_red[(j, j)] += y;
                b_red[(i, j)] -= y;
                b_red[(j, i)] -= y;
            }
            (Some(i), None) | (None, Some(i)) => b_red[(i, i)] += y,
            (None, None) => {}
        }
    }
    let scale = b_red.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let lu = b_red.lu();
    let diag_min = (0..n).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if diag_min <= 1e-12 * scale {
        return Err(NetError::SingularMatrix);
    }
    let x = lu.try_inverse().ok_or(NetError::SingularMatrix)?;

    for &l in closed_set {
        let (f, t) = topology.ends[l];
        if !island[f] {
            continue;
        }
        let y = 1.0 / topology.lines[l].reactance;
        for (k, &b) in order.iter().enumerate() {
            let xf = col_of[f].map_or(0.0, |i| x[(i, k)]);
            let xt = col_of[t].map_or(0.0, |i| x[(i, k)]);
            entries[l * n_buses + b] = y * (xf - xt);
        }
    }
    Ok(PtdfMatrix { entries, n_lines, n_buses, slack })
}

/// Flows (MW, positive from `from` to `to`) for a balanced injection vector.
pub fn line_flows(ptdf: &PtdfMatrix, injections: &[f64]) -> Result<Vec<f64>, NetError> {
    if injections.len() != ptdf.n_buses {
        return Err(NetError::Invalid(format!(
            "injection vector has {} entries, expected {}",
            injections.len(),
            ptdf.n_buses
        )));
    }
    let net: f64 = injections.iter().sum();
    let magnitude: f64 = injections.iter().map(|p| p.abs()).sum();
    if net.abs() > BALANCE_TOL * magnitude.max(1.0) {
        return Err(NetError::UnbalancedInjection(net));
    }
    Ok(ptdf.apply(injections))
}

/// Post-contingency network state after switching.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EffectiveTopology {
    pub closed: BTreeSet<usize>,
    pub energized: Vec<bool>,
}

impl EffectiveTopology {
    pub fn energized_customers(&self, topology: &Topology) -> f64 {
        topology
            .buses
            .iter()
            .zip(&self.energized)
            .filter(|(_, e)| **e)
            .map(|(b, _)| f64::from(b.customers))
            .sum()
    }
}

/// Restoration after the lines in `contingency` fail.
///
/// Buses still connected to the source through intact normally-closed lines
/// stay energized. The rest of the network is split into zones at installed
/// NCS lines; a zone touching a failed line stays down until repair. Every
/// other zone is restored when an installed switch line (an NCS kept closed
/// or an NOS tie being closed) links it to an energized bus.
pub fn effective_topology(
    topology: &Topology,
    installed: &BTreeSet<usize>,
    contingency: &Contingency,
) -> Result<EffectiveTopology, NetError> {
    if let Some(&s) = installed.iter().find(|&&s| s >= topology.switches.len()) {
        return Err(NetError::UnknownSwitch(s));
    }
    if contingency.failed_lines.iter().any(|&l| l >= topology.lines.len()) {
        return Err(NetError::UnknownContingency(contingency.id.clone()));
    }

    let base = topology.base_closed_set();
    let intact: BTreeSet<usize> = base.difference(&contingency.failed_lines).copied().collect();
    if contingency.failed_lines.is_disjoint(&base) {
        return Ok(EffectiveTopology {
            energized: topology.reachable(&intact, topology.slack),
            closed: intact,
        });
    }

    let n = topology.buses.len();
    let mut energized = topology.reachable(&intact, topology.slack);
    let is_installed = |l: usize| topology.line_switch[l].is_some_and(|s| installed.contains(&s));

    // Zones among de-energized buses, bounded by installed NCS lines.
    let zone_lines: BTreeSet<usize> = intact.iter().copied().filter(|&l| !is_installed(l)).collect();
    let adj = topology.adjacency(&zone_lines);
    let mut zone = vec![usize::MAX; n];
    let mut n_zones = 0;
    for start in 0..n {
        if energized[start] || zone[start] != usize::MAX {
            continue;
        }
        zone[start] = n_zones;
        let mut queue = VecDeque::from([start]);
        while let Some(b) = queue.pop_front() {
            for &(_, nb) in &adj[b] {
                if zone[nb] == usize::MAX {
                    zone[nb] = n_zones;
                    queue.push_back(nb);
                }
            }
        }
        n_zones += 1;
    }

    let mut faulted = vec![false; n_zones];
    for &l in contingency.failed_lines.intersection(&base) {
        let (f, t) = topology.ends[l];
        for b in [f, t] {
            if !energized[b] {
                faulted[zone[b]] = true;
            }
        }
    }

    // Installed switch lines (NCS closed or NOS tie) usable for restoration,
    // in line order so the choice of ties is deterministic.
    let links: Vec<usize> = (0..topology.lines.len())
        .filter(|&l| is_installed(l) && !contingency.failed_lines.contains(&l))
        .collect();
    let mut zone_buses: Vec<Vec<usize>> = vec![Vec::new(); n_zones];
    for b in 0..n {
        if !energized[b] {
            zone_buses[zone[b]].push(b);
        }
    }

    let mut closed = intact.clone();
    loop {
        let mut progressed = false;
        for &l in &links {
            let (f, t) = topology.ends[l];
            let target = match (energized[f], energized[t]) {
                (true, false) => t,
                (false, true) => f,
                _ => continue,
            };
            let z = zone[target];
            if faulted[z] {
                continue;
            }
            for &b in &zone_buses[z] {
                energized[b] = true;
            }
            closed.insert(l);
            progressed = true;
        }
        if !progressed {
            break;
        }
    }

    // Lines into zones left dark are open.
    closed.retain(|&l| {
        let (f, t) = topology.ends[l];
        energized[f] && energized[t]
    });
    Ok(EffectiveTopology { closed, energized })
}

/// Expected number of customers energized across the contingency set.
pub fn served_customers(
    topology: &Topology,
    installed: &BTreeSet<usize>,
    contingencies: &[Contingency],
) -> Result<f64, NetError> {
    check_weights(contingencies)?;
    let mut total = 0.0;
    for c in contingencies {
        let eff = effective_topology(topology, installed, c)?;
        total += c.probability_weight * eff.energized_customers(topology);
    }
    Ok(total)
}

pub fn check_weights(contingencies: &[Contingency]) -> Result<(), NetError> {
    let sum: f64 = contingencies.iter().map(|c| c.probability_weight).sum();
    if contingencies.iter().any(|c| !(0.0..=1.0).contains(&c.probability_weight)) || (sum - 1.0).abs() > 1e-9 {
        return Err(NetError::InvalidWeights(sum));
    }
    Ok(())
}
