//! Consumer, aggregator and utility behaviour: bid-curve construction under
//! ramp and capacity limits, revenue accounting, and the aggregator's DER
//! investment response.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("invalid bid curve: {0}")]
    InvalidCurve(String),
    #[error("invalid demand spec: {0}")]
    InvalidDemand(String),
    #[error("invalid DER spec: {0}")]
    InvalidDer(String),
    #[error("empty ramp envelope (p_max_t = {0})")]
    EmptyEnvelope(f64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Demand,
    Supply,
}

/// Breakpoint closing a segment: the segment runs from the previous
/// breakpoint's quantity (or 0) up to `quantity` at a flat `price`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidPoint {
    pub quantity: f64,
    pub price: f64,
}

/// Monotone step curve. Demand prices never rise with quantity, supply
/// prices never fall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    side: Side,
    points: Vec<BidPoint>,
}

impl BidCurve {
    pub fn new(side: Side, points: Vec<BidPoint>) -> Result<Self, AgentError> {
        let mut prev_q = f64::NEG_INFINITY;
        let mut prev_p: Option<f64> = None;
        for p in &points {
            if !p.quantity.is_finite() || !p.price.is_finite() {
                return Err(AgentError::InvalidCurve("non-finite breakpoint".into()));
            }
            if p.quantity < 0.0 {
                return Err(AgentError::InvalidCurve("first quantity must be >= 0".into()));
            }
            if p.quantity <= prev_q {
                return Err(AgentError::InvalidCurve("quantities must be strictly increasing".into()));
            }
            if let Some(pp) = prev_p {
                let ok = match side {
                    Side::Demand => p.price <= pp,
                    Side::Supply => p.price >= pp,
                };
                if !ok {
                    return Err(AgentError::InvalidCurve(format!("{side:?} prices are not monotone")));
                }
            }
            prev_q = p.quantity;
            prev_p = Some(p.price);
        }
        Ok(BidCurve { side, points })
    }

    pub fn empty(side: Side) -> Self {
        BidCurve { side, points: Vec::new() }
    }

    pub fn single(side: Side, quantity: f64, price: f64) -> Result<Self, AgentError> {
        if quantity <= 0.0 {
            return Ok(Self::empty(side));
        }
        Self::new(side, vec![BidPoint { quantity, price }])
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn points(&self) -> &[BidPoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.max_quantity() <= 0.0
    }

    pub fn max_quantity(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.quantity)
    }

    /// `(width, price)` per segment; zero-width leading segments included.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mut start = 0.0;
        self.points.iter().map(move |p| {
            let w = p.quantity - start;
            start = p.quantity;
            (w, p.price)
        })
    }

    /// Area under the curve from 0 to `q`: gross utility for demand, cost
    /// for supply ($/h).
    pub fn integral(&self, q: f64) -> f64 {
        let mut acc = 0.0;
        let mut start = 0.0;
        for p in &self.points {
            if q <= start {
                break;
            }
            acc += (q.min(p.quantity) - start) * p.price;
            start = p.quantity;
        }
        acc
    }

    /// Quantity the bidder wants at a posted price. Demand takes segments
    /// priced strictly above it; supply offers segments priced strictly below
    /// it. Indifferent segments are left out.
    pub fn quantity_at(&self, price: f64) -> f64 {
        let mut q = 0.0;
        for p in &self.points {
            let take = match self.side {
                Side::Demand => p.price > price,
                Side::Supply => p.price < price,
            };
            if !take {
                break;
            }
            q = p.quantity;
        }
        q
    }

    /// One-sided slopes `(left, right)` at `q`. Outside the curve's range the
    /// missing side repeats the nearest segment price.
    pub fn slopes_at(&self, q: f64, tol: f64) -> (f64, f64) {
        let segs: Vec<(f64, f64, f64)> = {
            let mut start = 0.0;
            self.points
                .iter()
                .filter_map(|p| {
                    let s = (start, p.quantity, p.price);
                    start = p.quantity;
                    (p.quantity - s.0 > tol).then_some(s)
                })
                .collect()
        };
        if segs.is_empty() {
            return (0.0, 0.0);
        }
        let left = segs.iter().rev().find(|(a, _, _)| *a < q - tol).map(|s| s.2).unwrap_or(segs[0].2);
        let right = segs.iter().find(|(_, b, _)| *b > q + tol).map(|s| s.2).unwrap_or(segs[segs.len() - 1].2);
        (left, right)
    }

    /// Curve with every quantity multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> BidCurve {
        if factor <= 0.0 {
            return BidCurve::empty(self.side);
        }
        BidCurve {
            side: self.side,
            points: self.points.iter().map(|p| BidPoint { quantity: p.quantity * factor, price: p.price }).collect(),
        }
    }

    /// Curve cut at quantity `q_max`.
    pub fn truncated(&self, q_max: f64) -> BidCurve {
        let mut points = Vec::new();
        let mut start = 0.0;
        for p in &self.points {
            if start >= q_max {
                break;
            }
            points.push(BidPoint { quantity: p.quantity.min(q_max), price: p.price });
            start = p.quantity;
        }
        BidCurve { side: self.side, points }
    }

    /// Same quantities with prices shifted by `offset`.
    pub fn shifted(&self, offset: f64) -> BidCurve {
        BidCurve {
            side: self.side,
            points: self.points.iter().map(|p| BidPoint { quantity: p.quantity, price: p.price + offset }).collect(),
        }
    }
}

/// Piece of a concave utility function: marginal utility `slope` ($/MWh)
/// holds up to cumulative load `up_to` (MW).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilitySegment {
    pub up_to: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    pub bus: usize,
    pub l_max: f64,
    pub utility: Vec<UtilitySegment>,
}

impl DemandSpec {
    pub fn new(bus: usize, l_max: f64, utility: Vec<UtilitySegment>) -> Result<Self, AgentError> {
        let spec = DemandSpec { bus, l_max, utility };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !(self.l_max >= 0.0) || !self.l_max.is_finite() {
            return Err(AgentError::InvalidDemand("l_max must be finite and >= 0".into()));
        }
        let mut prev_q = 0.0;
        let mut prev_s = f64::INFINITY;
        for seg in &self.utility {
            if !(seg.up_to > prev_q) {
                return Err(AgentError::InvalidDemand("utility breakpoints must be strictly increasing".into()));
            }
            if seg.slope > prev_s {
                return Err(AgentError::InvalidDemand("utility must be concave".into()));
            }
            prev_q = seg.up_to;
            prev_s = seg.slope;
        }
        Ok(())
    }

    /// `U_z(L)` in $/h; loads beyond the last breakpoint add nothing.
    pub fn utility_of(&self, load: f64) -> f64 {
        demand_curve_of(self).integral(load)
    }

    /// Copy with the maximum load and every breakpoint scaled, used for time
    /// profiles.
    pub fn scaled(&self, factor: f64) -> DemandSpec {
        let f = factor.max(0.0);
        DemandSpec {
            bus: self.bus,
            l_max: self.l_max * f,
            utility: if f > 0.0 {
                self.utility.iter().map(|s| UtilitySegment { up_to: s.up_to * f, slope: s.slope }).collect()
            } else {
                Vec::new()
            },
        }
    }
}

/// Marginal-utility curve truncated at `l_max`.
pub fn demand_curve_of(spec: &DemandSpec) -> BidCurve {
    let points = spec
        .utility
        .iter()
        .map(|s| BidPoint { quantity: s.up_to, price: s.slope })
        .collect();
    BidCurve { side: Side::Demand, points }.truncated(spec.l_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerSpec {
    pub bus: usize,
    /// Installed MW.
    pub capacity: f64,
    /// $/MWh.
    pub marginal_cost: f64,
    /// MW per step.
    pub ramp_up: f64,
    pub ramp_down: f64,
    pub p_min: f64,
}

impl DerSpec {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0 <= self.p_min && self.p_min <= self.capacity) {
            return Err(AgentError::InvalidDer("0 <= p_min <= capacity".into()));
        }
        if !(self.ramp_up >= 0.0 && self.ramp_down >= 0.0) {
            return Err(AgentError::InvalidDer("ramps must be >= 0".into()));
        }
        if !self.marginal_cost.is_finite() {
            return Err(AgentError::InvalidDer("marginal cost must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampEnvelope {
    pub p_max_t: f64,
    pub p_min_t: f64,
}

impl RampEnvelope {
    /// The static band `[p_min, capacity]`, used when there is no previous
    /// dispatch.
    pub fn static_band(spec: &DerSpec) -> Self {
        RampEnvelope { p_max_t: spec.capacity, p_min_t: spec.p_min }
    }
}

/// Linear ramp limits around the previous step's dispatch.
pub fn ramp_envelope_step(spec: &DerSpec, previous_dispatch: f64) -> RampEnvelope {
    let p_max_t = spec.capacity.min(previous_dispatch + spec.ramp_up);
    let p_min_t = spec.p_min.max(previous_dispatch - spec.ramp_down).min(p_max_t);
    RampEnvelope { p_max_t, p_min_t }
}

/// Identifies one perturbation draw; the same triple always yields the same
/// offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DrawKey {
    pub seed: u64,
    pub agent: u64,
    pub step: u64,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw in `[-1, 1]` for `key`.
pub fn unit_offset(key: DrawKey) -> f64 {
    let seed = mix(mix(mix(key.seed) ^ key.agent) ^ key.step);
    ChaCha8Rng::seed_from_u64(seed).gen_range(-1.0..=1.0)
}

/// Offer the envelope's upper limit at marginal cost plus a seeded uniform
/// offset in `[-perturbation, perturbation]`.
pub fn supply_curve_of(
    spec: &DerSpec,
    envelope: &RampEnvelope,
    perturbation: f64,
    key: DrawKey,
) -> Result<BidCurve, AgentError> {
    if envelope.p_max_t <= 0.0 {
        return Err(AgentError::EmptyEnvelope(envelope.p_max_t));
    }
    let offset = if perturbation > 0.0 { perturbation * unit_offset(key) } else { 0.0 };
    let q = envelope.p_max_t.min(spec.capacity);
    BidCurve::new(Side::Supply, vec![BidPoint { quantity: q, price: spec.marginal_cost + offset }])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergySale {
    pub mw: f64,
    /// Price received, $/MWh.
    pub price: f64,
    /// Production cost, $/MWh.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadService {
    pub mw: f64,
    /// Price paid, $/MWh.
    pub price: f64,
    /// `U_z(L)`, $/h.
    pub utility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Investment {
    pub capacity: f64,
    /// Fee paid per unit of capacity.
    pub fee: f64,
    /// Annualized unit cost.
    pub unit_cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLedger {
    pub energy_revenue: f64,
    pub consumer_utility_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentLedger {
    pub energy_revenue: f64,
    pub consumer_utility_value: f64,
    pub investment_margin: f64,
    pub history: Vec<StepLedger>,
}

impl AgentLedger {
    pub fn total(&self) -> f64 {
        self.energy_revenue + self.consumer_utility_value + self.investment_margin
    }
}

/// Three-part revenue: energy sales net of production cost, consumer
/// utility net of energy payments, and investment fees net of unit cost.
pub fn agent_surplus(
    hours: &[f64],
    sales: &[Vec<EnergySale>],
    loads: &[Vec<LoadService>],
    investments: &[Investment],
) -> Result<AgentLedger, AgentError> {
    if sales.len() != hours.len() || loads.len() != hours.len() {
        return Err(AgentError::LengthMismatch(format!(
            "{} steps, {} sale records, {} load records",
            hours.len(),
            sales.len(),
            loads.len()
        )));
    }
    let mut ledger = AgentLedger::default();
    for ((h, s), l) in hours.iter().zip(sales).zip(loads) {
        let step = StepLedger {
            energy_revenue: s.iter().map(|e| e.mw * (e.price - e.cost) * h).sum(),
            consumer_utility_value: l.iter().map(|z| (z.utility - z.price * z.mw) * h).sum(),
        };
        ledger.energy_revenue += step.energy_revenue;
        ledger.consumer_utility_value += step.consumer_utility_value;
        ledger.history.push(step);
    }
    ledger.investment_margin = investments.iter().map(|i| i.capacity * (i.fee - i.unit_cost)).sum();
    Ok(ledger)
}

/// Grid point maximizing `K·(fee − κ)`; ties and nonpositive margins go to
/// the smaller capacity.
pub fn choose_der_investment(price_signal: f64, kappa: f64, candidate_grid: &[f64]) -> f64 {
    let margin = price_signal - kappa;
    if margin <= 0.0 {
        return 0.0;
    }
    let mut best = (0.0, 0.0);
    for &k in candidate_grid.iter().filter(|k| **k >= 0.0) {
        let value = k * margin;
        if value > best.1 || (value == best.1 && k < best.0) {
            best = (k, value);
        }
    }
    best.0
}
