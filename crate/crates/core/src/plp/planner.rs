use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::eval::{Evaluator, Outcome, PlanningScenario};
use super::{reported_unit_price, InvestmentPlan, PlanResult, PlpError};

/// Largest candidate count searched exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 13;

fn better(value: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(b) => value > b + 1e-9 * b.abs().max(1.0),
    }
}

pub(crate) fn make_result(
    scn: &PlanningScenario,
    switches: &BTreeSet<usize>,
    added_der: &[f64],
    outcome: &Outcome,
    heuristic: bool,
) -> Result<PlanResult, PlpError> {
    let mut plan = InvestmentPlan::default();
    for &s in switches {
        let id = scn.topology.switches()[s].id.clone();
        plan.kappa.insert(id.clone(), scn.switch_kappa(s)?);
        plan.switches.insert(id);
    }
    let der_kappa = scn.der_kappa()?;
    for (site, &k) in scn.der_sites.iter().zip(added_der) {
        if k < 0.0 {
            return Err(PlpError::Invalid("DER capacity must be >= 0".into()));
        }
        if k > 0.0 {
            plan.der_capacity.insert(site.id.clone(), k);
            plan.kappa.insert(site.id.clone(), der_kappa);
        }
    }
    let investment_cost = plan.investment_cost();
    let total_cost = scn.existing_annualized_cost + outcome.production_cost + investment_cost;
    let unit_price = reported_unit_price(total_cost, outcome.energy)?;
    let der_signal: BTreeMap<String, f64> =
        scn.der_sites.iter().zip(&outcome.site_signal).map(|(s, v)| (s.id.clone(), *v)).collect();
    Ok(PlanResult {
        plan,
        served: outcome.served,
        unit_price,
        energy: outcome.energy,
        total_cost,
        production_cost: outcome.production_cost,
        investment_cost,
        welfare: outcome.operating_welfare() - investment_cost,
        capacity_signal: outcome.line_signal.clone(),
        der_signal,
        heuristic,
    })
}

fn check_candidates(scn: &PlanningScenario, candidates: &[usize]) -> Result<(), PlpError> {
    if candidates.is_empty() {
        return Err(PlpError::Invalid("no switch candidates".into()));
    }
    let pre = scn.topology.preinstalled();
    let mut seen = BTreeSet::new();
    for &c in candidates {
        if c >= scn.topology.switches().len() {
            return Err(crate::netmodel::NetError::UnknownSwitch(c).into());
        }
        if pre.contains(&c) || !seen.insert(c) {
            return Err(PlpError::Invalid(format!("switch `{}` listed twice or already installed", scn.topology.switches()[c].id)));
        }
    }
    Ok(())
}

/// Best switch set for each count in `k_min..=k_max`, by expected welfare
/// net of annualized switch cost. Exhaustive up to [`EXHAUSTIVE_LIMIT`]
/// candidates, greedy beyond.
pub fn plan_switches(
    scn: &PlanningScenario,
    candidates: &[usize],
    k_min: usize,
    k_max: usize,
) -> Result<Vec<PlanResult>, PlpError> {
    scn.validate()?;
    check_candidates(scn, candidates)?;
    if k_min > k_max || k_max > candidates.len() {
        return Err(PlpError::Invalid(format!("count range {k_min}..={k_max} for {} candidates", candidates.len())));
    }
    let pre = scn.topology.preinstalled();
    let caps = scn.base_der_caps();
    let zero = vec![0.0; scn.der_sites.len()];
    let eval = Evaluator::new(scn, caps);

    let net = |set: &BTreeSet<usize>, o: &Outcome| -> Result<f64, PlpError> {
        let cost: f64 = set.iter().map(|&s| scn.switch_kappa(s)).sum::<Result<f64, _>>()?;
        Ok(o.operating_welfare() - cost)
    };

    if candidates.len() <= EXHAUSTIVE_LIMIT {
        let n = candidates.len();
        let chosen: Vec<BTreeSet<usize>> = (0u32..(1u32 << n))
            .filter(|m| (k_min..=k_max).contains(&(m.count_ones() as usize)))
            .map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| candidates[i]).collect())
            .collect();
        let installed: Vec<BTreeSet<usize>> = chosen.iter().map(|s| s.union(&pre).copied().collect()).collect();
        let outcomes = eval.expected(&installed)?;
        let mut best: Vec<Option<(f64, usize)>> = vec![None; k_max + 1];
        for (i, (set, o)) in chosen.iter().zip(&outcomes).enumerate() {
            let v = net(set, o)?;
            let slot = &mut best[set.len()];
            if better(v, slot.map(|b| b.0)) {
                *slot = Some((v, i));
            }
        }
        (k_min..=k_max)
            .map(|k| {
                let (_, i) = best[k].expect("every count in range has a subset");
                make_result(scn, &chosen[i], &zero, &outcomes[i], false)
            })
            .collect()
    } else {
        let mut current = BTreeSet::new();
        let mut results = Vec::new();
        for k in 0..=k_max {
            if k > 0 {
                let options: Vec<usize> = candidates.iter().copied().filter(|c| !current.contains(c)).collect();
                let sets: Vec<BTreeSet<usize>> = options
                    .iter()
                    .map(|&c| {
                        let mut s = current.clone();
                        s.insert(c);
                        s
                    })
                    .collect();
                let installed: Vec<BTreeSet<usize>> = sets.iter().map(|s| s.union(&pre).copied().collect()).collect();
                let outcomes = eval.expected(&installed)?;
                let mut best: Option<(f64, usize)> = None;
                for (i, (s, o)) in sets.iter().zip(&outcomes).enumerate() {
                    let v = net(s, o)?;
                    if better(v, best.map(|b| b.0)) {
                        best = Some((v, i));
                    }
                }
                current.insert(options[best.expect("options nonempty").1]);
            }
            if k >= k_min {
                let installed: BTreeSet<usize> = current.union(&pre).copied().collect();
                let o = &eval.expected(&[installed])?[0];
                results.push(make_result(scn, &current, &zero, o, true)?);
            }
        }
        Ok(results)
    }
}

/// Prices the horizon with `grid[i]` MW added at DER site `site`, keeping the
/// installed switches as they are.
pub fn sweep_der_capacity(scn: &PlanningScenario, site: usize, grid: &[f64]) -> Result<Vec<PlanResult>, PlpError> {
    scn.validate()?;
    if site >= scn.der_sites.len() {
        return Err(PlpError::Invalid(format!("unknown DER site index {site}")));
    }
    if grid.iter().any(|k| !(k.is_finite() && *k >= 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PlpError::Invalid("capacity grid must be nonnegative and strictly ascending".into()));
    }
    let installed = scn.topology.preinstalled();
    grid.par_iter()
        .map(|&k| {
            let mut caps = scn.base_der_caps();
            caps[site] += k;
            let mut added = vec![0.0; scn.der_sites.len()];
            added[site] = k;
            let o = &Evaluator::new(scn, caps).expected(std::slice::from_ref(&installed))?[0];
            make_result(scn, &BTreeSet::new(), &added, o, false)
        })
        .collect()
}

/// Index of the largest welfare; earliest on ties.
pub fn best_by_welfare(results: &[PlanResult]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in results.iter().enumerate() {
        if better(r.welfare, best.map(|b| b.0)) {
            best = Some((r.welfare, i));
        }
    }
    best.map(|b| b.1)
}

/// Index of the lowest unit price; earliest on ties.
pub fn min_price_index(results: &[PlanResult]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, r) in results.iter().enumerate() {
        if better(-r.unit_price, best.map(|b| b.0)) {
            best = Some((-r.unit_price, i));
        }
    }
    best.map(|b| b.1)
}
