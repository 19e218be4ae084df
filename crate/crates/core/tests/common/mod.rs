//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use plpgrid::agents::{BidCurve, BidPoint, Side};
use plpgrid::harness::{load_scenario, LoadedScenario};
use plpgrid::market::{ClearingProblem, DemandBid, SupplyOffer};
use plpgrid::netmodel::{build_ptdf, Bus, Line, LineState, Topology};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

pub fn bundled(name: &str) -> LoadedScenario {
    load_scenario(&scenario_path(name)).expect("bundled scenario loads")
}

/// Connected network: a random spanning tree plus up to `extra` chords.
pub fn random_topology(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> Topology {
    let slack = rng.gen_range(0..n);
    let buses = (0..n).map(|i| Bus { id: format!("b{i}"), customers: rng.gen_range(0..50), is_slack: i == slack }).collect();
    let mut lines = Vec::new();
    let mut pairs = BTreeSet::new();
    let mut push = |lines: &mut Vec<Line>, rng: &mut ChaCha8Rng, a: usize, b: usize| {
        if a == b || !pairs.insert((a.min(b), a.max(b))) {
            return;
        }
        lines.push(Line {
            id: format!("l{}", lines.len()),
            from: format!("b{a}"),
            to: format!("b{b}"),
            reactance: rng.gen_range(0.02..0.5),
            base_capacity: f64::INFINITY,
            state: LineState::FixedClosed,
        });
    };
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        push(&mut lines, rng, parent, i);
    }
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        push(&mut lines, rng, a, b);
    }
    Topology::new(buses, lines, Vec::new()).expect("random topology is valid")
}

pub fn random_curve(rng: &mut ChaCha8Rng, side: Side, segments: usize, max_q: f64, grid: Option<f64>) -> BidCurve {
    let mut q = 0.0;
    let mut price: f64 = match side {
        Side::Supply => rng.gen_range(1.0..30.0),
        Side::Demand => rng.gen_range(40.0..120.0),
    };
    let mut points = Vec::new();
    for _ in 0..segments {
        let mut w = rng.gen_range(0.1..max_q / segments as f64);
        if let Some(g) = grid {
            w = ((w / g).round() * g).max(g);
        }
        q += w;
        if let Some(g) = grid {
            q = (q / g).round() * g;
        }
        points.push(BidPoint { quantity: q, price });
        let step = rng.gen_range(0.0..15.0);
        price = match side {
            Side::Supply => price + step,
            Side::Demand => (price - step).max(0.5),
        };
    }
    BidCurve::new(side, points).expect("monotone curve")
}

/// A feasible clearing problem on `n` buses: finite limits on some lines,
/// occasional expansion options and generator floors.
pub fn random_clearing(rng: &mut ChaCha8Rng, n: usize) -> ClearingProblem {
    let extra = rng.gen_range(0..=3.min(n));
    let topo = random_topology(rng, n, extra);
    let ptdf = build_ptdf(&topo, &topo.base_closed_set(), topo.slack()).expect("connected");
    let n_lines = topo.lines().len();
    let line_caps = (0..n_lines).map(|_| if rng.gen_bool(0.7) { rng.gen_range(0.2..4.0) } else { f64::INFINITY }).collect();
    let expansion_cost =
        if rng.gen_bool(0.3) { (0..n_lines).map(|_| rng.gen_bool(0.3).then(|| rng.gen_range(1.0..40.0))).collect() } else { Vec::new() };
    let mut demand = Vec::new();
    for _ in 0..rng.gen_range(1..=n.max(2)) {
        let segs = rng.gen_range(1..=3);
        demand.push(DemandBid { bus: rng.gen_range(0..n), curve: random_curve(rng, Side::Demand, segs, 4.0, None) });
    }
    let mut supply = Vec::new();
    for _ in 0..rng.gen_range(1..=6.min(n + 1)) {
        let segs = rng.gen_range(1..=3);
        let bus = rng.gen_range(0..n);
        let curve = random_curve(rng, Side::Supply, segs, 5.0, None);
        // A floor is only set where local demand can absorb it.
        let local: f64 = demand.iter().filter(|d| d.bus == bus).map(|d| d.curve.max_quantity()).sum();
        let p_min = if rng.gen_bool(0.2) { (0.5 * local).min(0.5 * curve.max_quantity()) } else { 0.0 };
        supply.push(SupplyOffer { bus, curve, p_min });
    }
    ClearingProblem { ptdf, line_caps, expansion_cost, supply, demand, hours: rng.gen_range(0.25..2.0) }
}

/// One- to three-bus instance with every quantity on a 0.01 MW grid.
pub fn random_tiny(rng: &mut ChaCha8Rng) -> ClearingProblem {
    let n = rng.gen_range(1..=3);
    let topo = random_topology(rng, n, if n == 3 { 1 } else { 0 });
    let ptdf = build_ptdf(&topo, &topo.base_closed_set(), topo.slack()).expect("connected");
    let line_caps = (0..topo.lines().len())
        .map(|_| if rng.gen_bool(0.6) { (rng.gen_range(0.2..1.5_f64) * 100.0).round() / 100.0 } else { f64::INFINITY })
        .collect();
    let n_supply = rng.gen_range(1..=2);
    let supply = (0..n_supply)
        .map(|_| {
            let bus = rng.gen_range(0..n);
            let segs = rng.gen_range(1..=2);
            SupplyOffer { bus, curve: random_curve(rng, Side::Supply, segs, 2.0, Some(0.01)), p_min: 0.0 }
        })
        .collect();
    let n_demand = rng.gen_range(1..=2);
    let demand = (0..n_demand)
        .map(|_| {
            let bus = rng.gen_range(0..n);
            let segs = rng.gen_range(1..=2);
            DemandBid { bus, curve: random_curve(rng, Side::Demand, segs, 2.0, Some(0.01)) }
        })
        .collect();
    ClearingProblem { ptdf, line_caps, expansion_cost: Vec::new(), supply, demand, hours: 1.0 }
}

/// Best welfare over dispatches on a `step` MW grid, by enumeration. Returns
/// the welfare and the largest price on any curve (for the tolerance).
pub fn grid_welfare(p: &ClearingProblem, step: f64) -> (f64, f64) {
    let vars: Vec<(bool, usize, &BidCurve)> = p
        .supply
        .iter()
        .enumerate()
        .map(|(i, s)| (true, i, &s.curve))
        .chain(p.demand.iter().enumerate().map(|(i, d)| (false, i, &d.curve)))
        .collect();
    let ticks: Vec<usize> = vars.iter().map(|v| (v.2.max_quantity() / step).round() as usize).collect();
    let n_buses = p.ptdf.n_buses();
    let mut best = f64::NEG_INFINITY;
    // The last variable closes the balance; the others are enumerated.
    let (last, free) = vars.split_last().expect("at least one bid");
    let mut idx = vec![0usize; free.len()];
    loop {
        let mut inj = vec![0.0; n_buses];
        let mut net = 0.0;
        let mut value = 0.0;
        for (k, v) in free.iter().enumerate() {
            let q = idx[k] as f64 * step;
            let bus = if v.0 { p.supply[v.1].bus } else { p.demand[v.1].bus };
            if v.0 {
                inj[bus] += q;
                net += q;
                value -= v.2.integral(q);
            } else {
                inj[bus] -= q;
                net -= q;
                value += v.2.integral(q);
            }
        }
        let q_last = if last.0 { -net } else { net };
        let max_last = last.2.max_quantity();
        if q_last >= -1e-9 && q_last <= max_last + 1e-9 {
            let q_last = q_last.clamp(0.0, max_last);
            let bus = if last.0 { p.supply[last.1].bus } else { p.demand[last.1].bus };
            if last.0 {
                inj[bus] += q_last;
                value -= last.2.integral(q_last);
            } else {
                inj[bus] -= q_last;
                value += last.2.integral(q_last);
            }
            let flows = p.ptdf.apply(&inj);
            if flows.iter().zip(&p.line_caps).all(|(f, c)| f.abs() <= c + 1e-9) {
                best = best.max(value * p.hours);
            }
        }
        let mut k = 0;
        loop {
            if k == free.len() {
                let max_price = vars.iter().flat_map(|v| v.2.points().iter().map(|b| b.price.abs())).fold(0.0, f64::max);
                return (best, max_price);
            }
            idx[k] += 1;
            if idx[k] <= ticks[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
