mod common;

use plpgrid::agents::{BidCurve, BidPoint, Side};
use plpgrid::harness::{resolve, LoadedScenario, SwitchConfig};
use plpgrid::market::kkt::verify_kkt_with_tolerance;
use plpgrid::market::{clear_step, ClearingProblem, DemandBid, SupplyOffer};
use plpgrid::netmodel::{build_ptdf, served_customers, Bus, Line, LineState, SwitchKind, Topology};
use plpgrid::plp::{
    best_by_welfare, min_price_index, mpc_horizon_run, plan_switches, sweep_der_capacity, PlanningScenario, PlpError, EXHAUSTIVE_LIMIT,
};

use common::bundled;

fn desk() -> LoadedScenario {
    bundled("desk30.toml")
}

fn congested() -> LoadedScenario {
    bundled("congested_line.toml")
}

fn with_config(loaded: &LoadedScenario, edit: impl FnOnce(&mut plpgrid::harness::ScenarioConfig)) -> PlanningScenario {
    let mut cfg = loaded.config.clone();
    edit(&mut cfg);
    resolve(&cfg).expect("edited scenario resolves")
}

#[test]
fn empty_plan_price_is_production_over_energy() {
    let scn = with_config(&desk(), |c| c.economics.existing_annualized_cost = 0.0);
    let r = &plan_switches(&scn, &scn.candidates(), 0, 0).unwrap()[0];
    assert!(r.plan.switches.is_empty());
    assert_eq!(r.investment_cost, 0.0);
    assert!((r.unit_price - r.production_cost / r.energy).abs() < 1e-9);
}

#[test]
fn existing_cost_enters_every_price() {
    let base = desk();
    let zero = with_config(&base, |c| c.economics.existing_annualized_cost = 0.0);
    let a = &plan_switches(&base.scenario, &base.scenario.candidates(), 0, 0).unwrap()[0];
    let b = &plan_switches(&zero, &zero.candidates(), 0, 0).unwrap()[0];
    let fixed = base.scenario.existing_annualized_cost;
    assert!((a.unit_price - b.unit_price - fixed / a.energy).abs() < 1e-6);
}

#[test]
fn nine_switches_serve_more_than_four() {
    let loaded = desk();
    let scn = &loaded.scenario;
    let four = &plan_switches(scn, &scn.candidates(), 4, 4).unwrap()[0];
    let nine = &plan_switches(scn, &scn.candidates(), 9, 9).unwrap()[0];
    assert!(nine.served > four.served, "{} vs {}", nine.served, four.served);

    // The reported value agrees with the network model directly.
    let mut installed = scn.topology.preinstalled();
    installed.extend(nine.plan.switches.iter().map(|id| scn.topology.switch(id).unwrap()));
    let direct = served_customers(&scn.topology, &installed, &scn.contingencies).unwrap();
    assert!((direct - nine.served).abs() < 1e-9);
}

#[test]
fn greedy_fallback_is_flagged() {
    let loaded = desk();
    let scn = with_config(&loaded, |c| {
        c.switches.push(SwitchConfig { id: "N".into(), kind: SwitchKind::Ncs, line: "c4-c4x".into(), installed: false })
    });
    assert_eq!(scn.candidates().len(), EXHAUSTIVE_LIMIT + 1);
    let results = plan_switches(&scn, &scn.candidates(), 0, 2).unwrap();
    assert!(results[1..].iter().all(|r| r.heuristic));
    let exact = plan_switches(&loaded.scenario, &loaded.scenario.candidates(), 0, 2).unwrap();
    assert!(exact.iter().all(|r| !r.heuristic));
    // The extra candidate is useless, so greedy should still find the
    // exhaustive optimum at these small counts.
    for (g, e) in results.iter().zip(&exact) {
        assert!(g.welfare >= e.welfare - 1e-6 * e.welfare.abs());
    }
}

#[test]
fn bad_count_range_is_rejected() {
    let loaded = desk();
    let scn = &loaded.scenario;
    let n = scn.candidates().len();
    assert!(matches!(plan_switches(scn, &scn.candidates(), 0, n + 1), Err(PlpError::Invalid(_))));
    assert!(matches!(plan_switches(scn, &scn.candidates(), 3, 2), Err(PlpError::Invalid(_))));
}

#[test]
fn sweep_price_has_interior_minimum_and_rising_tail() {
    let loaded = desk();
    let scn = &loaded.scenario;
    let grid: Vec<f64> = (0..=15).map(|i| i as f64 * 0.02).collect();
    let results = sweep_der_capacity(scn, 0, &grid).unwrap();
    let best = min_price_index(&results).unwrap();
    assert!(best > 0 && best < grid.len() - 1, "argmin at {}", grid[best]);

    let tail = sweep_der_capacity(scn, 0, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    for w in tail.windows(2) {
        assert!(w[1].unit_price > w[0].unit_price);
    }
}

#[test]
fn sweep_welfare_has_interior_maximum() {
    let loaded = congested();
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    let results = sweep_der_capacity(&loaded.scenario, 0, &grid).unwrap();
    let best = best_by_welfare(&results).unwrap();
    assert!(best > 0 && best < grid.len() - 1, "argmax at {}", grid[best]);
}

#[test]
fn sweep_rejects_unknown_site() {
    let loaded = congested();
    assert!(sweep_der_capacity(&loaded.scenario, 5, &[0.0]).is_err());
}

#[test]
fn mpc_without_congestion_never_invests() {
    let scn = with_config(&congested(), |c| c.lines[0].capacity = f64::INFINITY);
    let run = mpc_horizon_run(&scn, 48, 24).unwrap();
    assert!(run.all_converged());
    assert!(run.final_plan().der_capacity.values().all(|k| *k == 0.0));
}

#[test]
fn mpc_invests_at_first_epoch_under_congestion() {
    let loaded = congested();
    let run = mpc_horizon_run(&loaded.scenario, 48, 24).unwrap();
    let first = &run.plans[0];
    assert!(first.der_capacity.get("DER1").copied().unwrap_or(0.0) > 0.0, "{first:?}");
    // Capacity installed at the epoch is available in the following steps.
    assert!(run.steps[24].der_capacity[0] > 0.0);
}

fn chain(cap: f64) -> ClearingProblem {
    let bus = |id: &str, slack| Bus { id: id.into(), customers: 10, is_slack: slack };
    let line = |id: &str, from: &str, to: &str, cap| Line {
        id: id.into(),
        from: from.into(),
        to: to.into(),
        reactance: 0.1,
        base_capacity: cap,
        state: LineState::FixedClosed,
    };
    let topo = Topology::new(
        vec![bus("S", true), bus("a", false), bus("b", false)],
        vec![line("S-a", "S", "a", cap), line("a-b", "a", "b", f64::INFINITY)],
        Vec::new(),
    )
    .unwrap();
    let ptdf = build_ptdf(&topo, &topo.base_closed_set(), topo.slack()).unwrap();
    let curve = |side, q, p| BidCurve::new(side, vec![BidPoint { quantity: q, price: p }]).unwrap();
    ClearingProblem {
        ptdf,
        line_caps: vec![cap, f64::INFINITY],
        expansion_cost: Vec::new(),
        supply: vec![
            SupplyOffer { bus: 0, curve: curve(Side::Supply, 5.0, 20.0), p_min: 0.0 },
            SupplyOffer { bus: 1, curve: curve(Side::Supply, 5.0, 55.0), p_min: 0.0 },
        ],
        demand: vec![DemandBid { bus: 2, curve: curve(Side::Demand, 2.0, 100.0) }],
        hours: 1.0,
    }
}

#[test]
fn congestion_on_first_segment_prices_downstream_equally() {
    let p = chain(1.0);
    let r = clear_step(&p).unwrap();
    let prices = &r.nodal_prices;
    assert!((prices[0] - 20.0).abs() < 1e-9);
    assert!((prices[1] - 55.0).abs() < 1e-9);
    assert!((prices[1] - prices[2]).abs() < 1e-9);
    assert!((r.dispatch.flows[0] - 1.0).abs() < 1e-9);
    assert!(verify_kkt_with_tolerance(&p, &r, 1e-9).passed());
}

#[test]
fn uncongested_chain_has_one_price() {
    let p = chain(f64::INFINITY);
    let r = clear_step(&p).unwrap();
    assert!(r.nodal_prices.iter().all(|x| (x - 20.0).abs() < 1e-9));
    assert!(r.duals.mu.iter().chain(&r.duals.nu).all(|m| m.abs() < 1e-12));
}

#[test]
fn two_bus_stationarity_is_tight() {
    let mut p = chain(0.6);
    p.supply.truncate(1);
    p.demand[0].bus = 1;
    let r = clear_step(&p).unwrap();
    let report = verify_kkt_with_tolerance(&p, &r, 1e-9);
    assert!(report.passed(), "{:?}", report.worst());
    assert!((r.dispatch.load[0] - 0.6).abs() < 1e-12);
    assert!((r.nodal_prices[1] - 100.0).abs() < 1e-9);
}
