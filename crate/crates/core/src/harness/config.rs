use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::agents::{DemandSpec, DerSpec, UtilitySegment};
use crate::netmodel::{Bus, Contingency, Line, LineState, SwitchCandidate, SwitchKind, Topology};
use crate::plp::{CostSpec, DerSite, PlanningScenario, ProtocolSettings, UtilitySource};

pub const FORMAT_VERSION: u32 = 1;

fn default_lifetime() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub horizon: HorizonConfig,
    pub economics: EconomicsConfig,
    pub costs: CostTable,
    pub protocol: ProtocolConfig,
    pub mpc: MpcConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    pub buses: Vec<BusConfig>,
    pub lines: Vec<LineConfig>,
    #[serde(default)]
    pub switches: Vec<SwitchConfig>,
    pub loads: Vec<LoadConfig>,
    pub utility_supply: Vec<SupplyConfig>,
    #[serde(default)]
    pub der_sites: Vec<DerConfig>,
    pub contingencies: Vec<ContingencyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonConfig {
    pub step_hours: f64,
    /// Load multiplier per step; the horizon is scaled to a year.
    pub profile: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicsConfig {
    pub discount_rate: f64,
    #[serde(default)]
    pub existing_annualized_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetCost {
    pub capital: f64,
    pub operating: f64,
    #[serde(default = "default_lifetime")]
    pub lifetime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub nos: AssetCost,
    pub ncs: AssetCost,
    /// Per kW.
    pub der: AssetCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub tolerance: f64,
    pub max_iters: usize,
    #[serde(default)]
    pub perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon_steps: usize,
    pub epoch_steps: usize,
    #[serde(default)]
    pub der_increments: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub site: String,
    /// `start:stop:step` in MW.
    pub grid: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusConfig {
    pub id: String,
    #[serde(default)]
    pub customers: u32,
    #[serde(default)]
    pub slack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub id: String,
    pub from: String,
    pub to: String,
    pub reactance: f64,
    /// MW; `inf` leaves the line unconstrained.
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchConfig {
    pub id: String,
    pub kind: SwitchKind,
    pub line: String,
    #[serde(default)]
    pub installed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub id: String,
    pub bus: String,
    pub l_max: f64,
    /// `[up_to MW, marginal utility $/MWh]` pairs.
    pub utility: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupplyConfig {
    pub id: String,
    pub bus: String,
    pub capacity: f64,
    pub marginal_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerConfig {
    pub id: String,
    pub bus: String,
    #[serde(default)]
    pub capacity: f64,
    pub marginal_cost: f64,
    pub ramp_up: f64,
    pub ramp_down: f64,
    #[serde(default)]
    pub p_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContingencyConfig {
    pub id: String,
    #[serde(default)]
    pub failed_lines: Vec<String>,
    pub weight: f64,
}

/// A parsed, validated scenario with its resolved runtime form.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub config: ScenarioConfig,
    pub scenario: PlanningScenario,
    pub digest: String,
}

impl LoadedScenario {
    pub fn der_site(&self, id: &str) -> Option<usize> {
        self.scenario.der_sites.iter().position(|s| s.id == id)
    }
}

/// sha256 over the canonical JSON encoding of the configuration.
pub fn digest(config: &ScenarioConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text).map_err(|e| match e {
        HarnessError::Parse(m) => HarnessError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_scenario(text: &str) -> Result<LoadedScenario, HarnessError> {
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string().trim_end().replace('\n', " | ")))?;
    let scenario = resolve(&config)?;
    let digest = digest(&config);
    Ok(LoadedScenario { config, scenario, digest })
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Validation(msg.into())
}

pub fn resolve(cfg: &ScenarioConfig) -> Result<PlanningScenario, HarnessError> {
    if cfg.format_version != FORMAT_VERSION {
        return Err(invalid(format!("format_version {} is not supported (expected {FORMAT_VERSION})", cfg.format_version)));
    }
    let hosted: BTreeSet<&str> = cfg.switches.iter().map(|s| s.line.as_str()).collect();
    let buses = cfg
        .buses
        .iter()
        .map(|b| Bus { id: b.id.clone(), customers: b.customers, is_slack: b.slack })
        .collect();
    let lines = cfg
        .lines
        .iter()
        .map(|l| Line {
            id: l.id.clone(),
            from: l.from.clone(),
            to: l.to.clone(),
            reactance: l.reactance,
            base_capacity: l.capacity,
            state: if hosted.contains(l.id.as_str()) { LineState::Switchable } else { LineState::FixedClosed },
        })
        .collect();
    let switches = cfg
        .switches
        .iter()
        .map(|s| SwitchCandidate { id: s.id.clone(), kind: s.kind, host_line: s.line.clone(), installed: s.installed })
        .collect();
    let topology = Topology::new(buses, lines, switches).map_err(|e| invalid(e.to_string()))?;
    let bus = |id: &str, what: &str| topology.bus(id).ok_or_else(|| invalid(format!("{what}: unknown bus `{id}`")));

    let mut seen = BTreeSet::new();
    let mut demands = Vec::new();
    for l in &cfg.loads {
        if !seen.insert(l.id.clone()) {
            return Err(invalid(format!("duplicate load id `{}`", l.id)));
        }
        let segs = l.utility.iter().map(|[q, s]| UtilitySegment { up_to: *q, slope: *s }).collect();
        let spec = DemandSpec::new(bus(&l.bus, &l.id)?, l.l_max, segs).map_err(|e| invalid(format!("load `{}`: {e}", l.id)))?;
        demands.push(spec);
    }
    let mut utility = Vec::new();
    for u in &cfg.utility_supply {
        if !seen.insert(u.id.clone()) {
            return Err(invalid(format!("duplicate supply id `{}`", u.id)));
        }
        if !(u.capacity >= 0.0) || !u.marginal_cost.is_finite() {
            return Err(invalid(format!("supply `{}`: capacity >= 0 and finite cost", u.id)));
        }
        utility.push(UtilitySource { bus: bus(&u.bus, &u.id)?, capacity: u.capacity, marginal_cost: u.marginal_cost });
    }
    let mut der_sites = Vec::new();
    for d in &cfg.der_sites {
        if !seen.insert(d.id.clone()) {
            return Err(invalid(format!("duplicate DER site id `{}`", d.id)));
        }
        let spec = DerSpec {
            bus: bus(&d.bus, &d.id)?,
            capacity: d.capacity,
            marginal_cost: d.marginal_cost,
            ramp_up: d.ramp_up,
            ramp_down: d.ramp_down,
            p_min: d.p_min,
        };
        spec.validate().map_err(|e| invalid(format!("DER site `{}`: {e}", d.id)))?;
        der_sites.push(DerSite { id: d.id.clone(), spec });
    }
    let mut contingencies = Vec::new();
    let mut cids = BTreeSet::new();
    for c in &cfg.contingencies {
        if !cids.insert(c.id.clone()) {
            return Err(invalid(format!("duplicate contingency id `{}`", c.id)));
        }
        let failed_lines = c
            .failed_lines
            .iter()
            .map(|l| topology.line(l).ok_or_else(|| invalid(format!("contingency `{}`: unknown line `{l}`", c.id))))
            .collect::<Result<_, _>>()?;
        contingencies.push(Contingency { id: c.id.clone(), failed_lines, probability_weight: c.weight });
    }
    if let Some(s) = &cfg.sweep {
        if !der_sites.iter().any(|d| d.id == s.site) {
            return Err(invalid(format!("sweep: unknown DER site `{}`", s.site)));
        }
        parse_grid(&s.grid)?;
    }
    if cfg.mpc.der_increments.iter().any(|k| !(*k >= 0.0)) {
        return Err(invalid("mpc.der_increments must be >= 0"));
    }
    let cost = |a: &AssetCost| CostSpec {
        capital: a.capital,
        operating: a.operating,
        discount_rate: cfg.economics.discount_rate,
        lifetime: a.lifetime,
    };
    let scenario = PlanningScenario {
        topology,
        demands,
        profile: cfg.horizon.profile.clone(),
        step_hours: cfg.horizon.step_hours,
        utility,
        der_sites,
        contingencies,
        nos_cost: cost(&cfg.costs.nos),
        ncs_cost: cost(&cfg.costs.ncs),
        der_cost: cost(&cfg.costs.der),
        existing_annualized_cost: cfg.economics.existing_annualized_cost,
        protocol: ProtocolSettings {
            tolerance: cfg.protocol.tolerance,
            max_iters: cfg.protocol.max_iters,
            perturbation: cfg.protocol.perturbation,
            seed: cfg.seed,
        },
        der_increments: cfg.mpc.der_increments.clone(),
    };
    scenario.validate().map_err(|e| invalid(e.to_string()))?;
    if cfg.protocol.max_iters == 0 || !(cfg.protocol.tolerance > 0.0) {
        return Err(invalid("protocol: max_iters >= 1 and tolerance > 0"));
    }
    Ok(scenario)
}

/// Parses `start:stop:step` into an inclusive ascending grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, HarnessError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| HarnessError::Usage(format!("grid `{spec}`: `{p}` is not a number"))))
        .collect::<Result<_, _>>()?;
    let [a, b, step] = nums[..] else {
        return Err(HarnessError::Usage(format!("grid `{spec}` must be start:stop:step")));
    };
    if !(step > 0.0) || !(b >= a) || !a.is_finite() || !b.is_finite() {
        return Err(HarnessError::Usage(format!("grid `{spec}` needs step > 0 and stop >= start")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// Parses `a:b` into an inclusive count range.
pub fn parse_range(spec: &str) -> Result<(usize, usize), HarnessError> {
    let bad = || HarnessError::Usage(format!("range `{spec}` must be a:b with a <= b"));
    let (a, b) = spec.split_once(':').ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok((a, b))
}
