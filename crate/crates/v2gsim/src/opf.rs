//! Optimal power flow with elastic load shedding.
//!
//! Two solvers share one LP formulation:
//!
//! * `solve_dcopf_with_shed` — the lossless, unit-voltage, small-angle
//!   linear program, solved exactly. Serves as the cross-check oracle.
//! * `solve_opf_with_shed` — successive linearization: solve the LP on the
//!   linearized network, re-solve the AC power flow at that dispatch,
//!   fold the observed losses back into the LP, and iterate to a fixed
//!   point. The returned dispatch always satisfies the AC mismatch
//!   tolerance because the embedded solution comes from the final
//!   Newton-Raphson solve.
//!
//! Shedding is continuous per-load curtailment weighted by a big-M penalty,
//! so any available generation strictly dominates shed.

use std::collections::BTreeMap;

use microlp::{ComparisonOp, Error as LpError, OptimizationDirection, Problem, Variable};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, NetworkCase};
use crate::pf::{build_ybus, bus_injections, branch_flow_from, newton_solve, BusType, PowerFlowSolution};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid solver options: {0}")]
    BadOptions(String),
    #[error("feasibility gap is undefined for a failed dispatch")]
    FailedDispatch,
}

fn default_pf_tolerance() -> f64 {
    1e-8
}
fn default_max_pf_iterations() -> usize {
    30
}
fn default_shed_penalty() -> f64 {
    1e6
}
fn default_true() -> bool {
    true
}
fn default_max_outer() -> usize {
    20
}
fn default_dispatch_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Per-unit complex power mismatch required of the inner power flow.
    #[serde(default = "default_pf_tolerance")]
    pub pf_tolerance: f64,
    #[serde(default = "default_max_pf_iterations")]
    pub max_pf_iterations: usize,
    /// Big-M shed weight, $/MWh. Must dominate every generator's marginal
    /// cost (c1 + 2 c2 pmax).
    #[serde(default = "default_shed_penalty")]
    pub shed_penalty_m: f64,
    #[serde(default = "default_true")]
    pub enforce_line_limits: bool,
    #[serde(default = "default_true")]
    pub enforce_voltage_limits: bool,
    #[serde(default = "default_max_outer")]
    pub max_outer_iterations: usize,
    /// Outer loop converges when no generator setpoint moves more than
    /// this many MW between iterations.
    #[serde(default = "default_dispatch_tol")]
    pub dispatch_tolerance_mw: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            pf_tolerance: default_pf_tolerance(),
            max_pf_iterations: default_max_pf_iterations(),
            shed_penalty_m: default_shed_penalty(),
            enforce_line_limits: true,
            enforce_voltage_limits: true,
            max_outer_iterations: default_max_outer(),
            dispatch_tolerance_mw: default_dispatch_tol(),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self, case: &NetworkCase) -> Result<(), OpfError> {
        for g in case.generators.iter().filter(|g| g.in_service) {
            let marginal = g.cost_c1 + 2.0 * g.cost_c2 * g.pmax;
            if self.shed_penalty_m <= marginal {
                return Err(OpfError::BadOptions(format!(
                    "shed_penalty_m = {} does not dominate generator {} marginal cost {}",
                    self.shed_penalty_m, g.id, marginal
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStatus {
    Optimal,
    ShedRequired,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenDispatch {
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub status: DispatchStatus,
    /// Unserved energy over total demand, dimensionless in [0, 1].
    pub total_shed_fraction: f64,
    /// MW curtailed per load id (0 for untouched loads).
    pub shed_by_load: BTreeMap<u32, f64>,
    /// Setpoints per generator id, MW / MVAr.
    pub dispatch: BTreeMap<u32, GenDispatch>,
    #[serde(rename = "cost")]
    pub generation_cost: f64,
    #[serde(rename = "pf")]
    pub solution: PowerFlowSolution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl DispatchResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dispatch serialization cannot fail")
    }

    fn failed(reason: String, solution: PowerFlowSolution) -> Self {
        DispatchResult {
            status: DispatchStatus::Failed,
            total_shed_fraction: 0.0,
            shed_by_load: BTreeMap::new(),
            dispatch: BTreeMap::new(),
            generation_cost: 0.0,
            solution,
            diagnostic: Some(reason),
        }
    }
}

fn empty_solution(n: usize) -> PowerFlowSolution {
    PowerFlowSolution {
        vm: vec![1.0; n],
        va: vec![0.0; n],
        iterations: 0,
        max_mismatch: 0.0,
        converged: false,
        diagnostic: None,
    }
}

/// The feasibility gap: unmet demand as a percentage of total demand.
pub fn feasibility_gap(result: &DispatchResult) -> Result<f64, OpfError> {
    if result.status == DispatchStatus::Failed {
        return Err(OpfError::FailedDispatch);
    }
    Ok(result.total_shed_fraction * 100.0)
}

/// Display formatting for gap percentages: three significant figures,
/// with converged (zero-shed) cells printed as "0.00".
pub fn format_gap_percent(pct: f64) -> String {
    if !(pct > 0.005) {
        return "0.00".to_string();
    }
    let magnitude = pct.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    format!("{pct:.decimals$}")
}

// ---------------------------------------------------------------------------
// shared LP formulation
// ---------------------------------------------------------------------------

struct LpOutcome {
    /// MW per in-service generator id.
    gen_p: BTreeMap<u32, f64>,
    /// MW shed per load id.
    shed: BTreeMap<u32, f64>,
    /// Bus voltage angles implied by the linear model, radians.
    theta: Vec<f64>,
}

/// Solves the shed-minimizing linearized dispatch.
///
/// `marginal_cost` gives the $/MWh cost slope per in-service generator id;
/// `extra_demand_mw` is added at the slack bus (the AC loop passes observed
/// losses through it); `rating_scale` shrinks individual line ratings when
/// the AC flows overshoot them.
fn solve_dispatch_lp(
    case: &NetworkCase,
    marginal_cost: &BTreeMap<u32, f64>,
    shed_penalty_m: f64,
    extra_demand_mw: f64,
    enforce_line_limits: bool,
    rating_scale: &BTreeMap<usize, f64>,
) -> Result<LpOutcome, LpError> {
    let base = case.base_mva;
    let idx = case.bus_index();
    let n = case.buses.len();
    let slack = idx[&case.slack_bus().expect("validated case has a slack").id];

    let mut problem = Problem::new(OptimizationDirection::Minimize);

    // angle variables for every non-slack bus
    let mut theta: Vec<Option<Variable>> = vec![None; n];
    for i in 0..n {
        if i != slack {
            theta[i] = Some(problem.add_var(0.0, (-50.0, 50.0)));
        }
    }

    // generator variables with a deterministic id-ordered tie-break epsilon
    let mut gens: Vec<(u32, usize, Variable)> = Vec::new();
    let mut in_service: Vec<&crate::grid::Generator> =
        case.generators.iter().filter(|g| g.in_service).collect();
    in_service.sort_by_key(|g| g.id);
    for (rank, g) in in_service.iter().enumerate() {
        let slope = marginal_cost.get(&g.id).copied().unwrap_or(g.cost_c1);
        let coeff = slope * base + 1e-4 * (rank as f64 + 1.0);
        let var = problem.add_var(coeff, (g.pmin / base, g.pmax / base));
        gens.push((g.id, idx[&g.bus], var));
    }

    // shed variables for sheddable loads
    let mut sheds: Vec<(u32, usize, Variable, f64)> = Vec::new();
    for (rank, l) in case.loads.iter().enumerate() {
        if l.sheddable && l.p > 0.0 {
            let coeff = shed_penalty_m * base + 1e-4 * (rank as f64 + 1.0);
            let var = problem.add_var(coeff, (0.0, l.p / base));
            sheds.push((l.id, idx[&l.bus], var, l.p));
        }
    }

    // nodal balance: generation - served load - extra = net branch export
    let mut bus_terms: Vec<Vec<(Variable, f64)>> = vec![Vec::new(); n];
    let mut bus_rhs = vec![0.0_f64; n];
    for (_, bus, var) in &gens {
        bus_terms[*bus].push((*var, 1.0));
    }
    for (_, bus, var, _) in &sheds {
        bus_terms[*bus].push((*var, 1.0));
    }
    for l in &case.loads {
        bus_rhs[idx[&l.bus]] += l.p / base;
    }
    bus_rhs[slack] += extra_demand_mw / base;

    let mut flows: Vec<(usize, Vec<(Variable, f64)>, f64)> = Vec::new();
    for (bi, br) in case.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        let f = idx[&br.from_bus];
        let t = idx[&br.to_bus];
        let susceptance = 1.0 / br.x;
        // flow from f to t = (theta_f - theta_t) / x
        let mut flow_terms: Vec<(Variable, f64)> = Vec::new();
        if let Some(v) = theta[f] {
            flow_terms.push((v, susceptance));
        }
        if let Some(v) = theta[t] {
            flow_terms.push((v, -susceptance));
        }
        for (var, c) in &flow_terms {
            bus_terms[f].push((*var, -c));
            bus_terms[t].push((*var, *c));
        }
        if enforce_line_limits && br.rating > 0.0 {
            let limit = br.rating * rating_scale.get(&bi).copied().unwrap_or(1.0) / base;
            flows.push((bi, flow_terms, limit));
        }
    }
    // the solver wants each constraint sorted by variable with no duplicates
    let canon = |terms: &[(Variable, f64)]| -> Vec<(Variable, f64)> {
        let mut merged: BTreeMap<usize, (Variable, f64)> = BTreeMap::new();
        for (var, c) in terms {
            merged
                .entry(var.idx())
                .and_modify(|(_, acc)| *acc += c)
                .or_insert((*var, *c));
        }
        merged.into_values().collect()
    };
    for i in 0..n {
        problem.add_constraint(canon(&bus_terms[i]), ComparisonOp::Eq, bus_rhs[i]);
    }
    for (_, terms, limit) in &flows {
        problem.add_constraint(canon(terms), ComparisonOp::Le, *limit);
        problem.add_constraint(canon(terms), ComparisonOp::Ge, -limit);
    }

    let solution = problem.solve()?.into_solution().map_err(|_| {
        LpError::InternalError("dispatch LP interrupted before finding a solution".into())
    })?;

    let gen_p = gens
        .iter()
        .map(|(id, _, var)| (*id, solution.var_value(*var) * base))
        .collect();
    let mut shed: BTreeMap<u32, f64> = case.loads.iter().map(|l| (l.id, 0.0)).collect();
    for (id, _, var, _) in &sheds {
        shed.insert(*id, solution.var_value(*var) * base);
    }
    let theta_vals = (0..n)
        .map(|i| theta[i].map(|v| solution.var_value(v)).unwrap_or(0.0))
        .collect();
    Ok(LpOutcome {
        gen_p,
        shed,
        theta: theta_vals,
    })
}

fn quadratic_cost(case: &NetworkCase, gen_p: &BTreeMap<u32, f64>) -> f64 {
    case.generators
        .iter()
        .filter(|g| g.in_service)
        .map(|g| {
            let p = gen_p.get(&g.id).copied().unwrap_or(0.0);
            g.cost_c0 + g.cost_c1 * p + g.cost_c2 * p * p
        })
        .sum()
}

fn shed_fraction(case: &NetworkCase, shed: &BTreeMap<u32, f64>) -> f64 {
    let total = case.total_load_p();
    if total <= 0.0 {
        return 0.0;
    }
    shed.values().sum::<f64>() / total
}

fn status_for(fraction: f64) -> DispatchStatus {
    if fraction < 1e-6 {
        DispatchStatus::Optimal
    } else {
        DispatchStatus::ShedRequired
    }
}

// ---------------------------------------------------------------------------
// DC solver (oracle)
// ---------------------------------------------------------------------------

/// Lossless unit-voltage shed-minimizing dispatch, solved as an exact LP.
///
/// Quadratic cost terms are ignored in the objective (the LP uses c1 only);
/// the reported cost evaluates the full polynomial at the returned dispatch.
pub fn solve_dcopf_with_shed(case: &NetworkCase) -> Result<DispatchResult, OpfError> {
    case.validate()?;
    let n = case.buses.len();
    let marginal: BTreeMap<u32, f64> = case
        .generators
        .iter()
        .map(|g| (g.id, g.cost_c1))
        .collect();
    let outcome = match solve_dispatch_lp(case, &marginal, 1e6, 0.0, true, &BTreeMap::new()) {
        Ok(o) => o,
        Err(e) => {
            return Ok(DispatchResult::failed(
                format!("dc dispatch LP failed: {e}"),
                empty_solution(n),
            ))
        }
    };
    let fraction = shed_fraction(case, &outcome.shed);
    let dispatch: BTreeMap<u32, GenDispatch> = outcome
        .gen_p
        .iter()
        .map(|(id, p)| (*id, GenDispatch { p: *p, q: 0.0 }))
        .collect();
    Ok(DispatchResult {
        status: status_for(fraction),
        total_shed_fraction: fraction,
        generation_cost: quadratic_cost(case, &outcome.gen_p),
        shed_by_load: outcome.shed,
        dispatch,
        solution: PowerFlowSolution {
            vm: vec![1.0; n],
            va: outcome.theta,
            iterations: 0,
            max_mismatch: 0.0,
            converged: true,
            diagnostic: None,
        },
        diagnostic: None,
    })
}

// ---------------------------------------------------------------------------
// AC solver (successive linearization)
// ---------------------------------------------------------------------------

/// AC optimal power flow with elastic shedding.
///
/// Outer loop: dispatch LP -> Newton-Raphson at that dispatch -> fold the
/// observed losses back into the LP, until no setpoint moves more than
/// `dispatch_tolerance_mw`. Generator buses with reactive range hold 1.0 pu
/// voltage; buses that hit a reactive limit are re-solved with Q pinned at
/// the limit.
pub fn solve_opf_with_shed(
    case: &NetworkCase,
    options: &SolverOptions,
) -> Result<DispatchResult, OpfError> {
    case.validate()?;
    options.validate(case)?;
    let base = case.base_mva;
    let idx = case.bus_index();
    let n = case.buses.len();
    let slack = idx[&case.slack_bus().expect("validated").id];
    let ybus = build_ybus(case);

    // reactive range per bus over in-service generators
    let mut q_range = vec![(0.0_f64, 0.0_f64); n];
    let mut has_gen = vec![false; n];
    for g in case.generators.iter().filter(|g| g.in_service) {
        let i = idx[&g.bus];
        q_range[i].0 += g.qmin;
        q_range[i].1 += g.qmax;
        has_gen[i] = true;
    }
    let base_types: Vec<BusType> = (0..n)
        .map(|i| {
            if i == slack {
                BusType::Slack
            } else if has_gen[i] && q_range[i].1 > q_range[i].0 {
                BusType::Pv
            } else {
                BusType::Pq
            }
        })
        .collect();

    let mut marginal: BTreeMap<u32, f64> = case
        .generators
        .iter()
        .map(|g| (g.id, g.cost_c1))
        .collect();
    let mut rating_scale: BTreeMap<usize, f64> = BTreeMap::new();
    let mut loss_mw = 0.0_f64;
    let mut prev_p: Option<BTreeMap<u32, f64>> = None;
    let mut outcome;
    let mut pf;
    let mut q_spec;
    let mut served_q;

    let mut outer = 0;
    loop {
        outer += 1;
        outcome = match solve_dispatch_lp(
            case,
            &marginal,
            options.shed_penalty_m,
            loss_mw,
            options.enforce_line_limits,
            &rating_scale,
        ) {
            Ok(o) => o,
            Err(e) => {
                return Ok(DispatchResult::failed(
                    format!("dispatch LP failed: {e}"),
                    empty_solution(n),
                ))
            }
        };

        // per-bus injections implied by the dispatch
        let mut p_spec = vec![0.0_f64; n];
        q_spec = vec![0.0_f64; n];
        served_q = vec![0.0_f64; n];
        for g in case.generators.iter().filter(|g| g.in_service) {
            let i = idx[&g.bus];
            p_spec[i] += outcome.gen_p[&g.id] / base;
            // zero-range units (e.g. unity-pf V2G) inject their fixed Q on
            // non-voltage-holding buses
            if base_types[i] == BusType::Pq && g.qmin == g.qmax {
                q_spec[i] += g.qmin / base;
            }
        }
        for l in &case.loads {
            let i = idx[&l.bus];
            let served = if l.p > 0.0 {
                1.0 - outcome.shed[&l.id] / l.p
            } else {
                1.0
            };
            p_spec[i] -= l.p * served / base;
            q_spec[i] -= l.q * served / base;
            served_q[i] += l.q * served;
        }

        // Newton solve with reactive-limit switching on voltage-holding buses
        let mut types = base_types.clone();
        let mut q_eff = q_spec.clone();
        let mut switches = 0;
        pf = loop {
            let sol = newton_solve(
                &ybus,
                &types,
                &p_spec,
                &q_eff,
                options.pf_tolerance,
                options.max_pf_iterations,
            );
            if !sol.converged {
                return Ok(DispatchResult::failed(
                    sol.diagnostic
                        .clone()
                        .unwrap_or_else(|| "power flow failed".to_string()),
                    sol,
                ));
            }
            let inj = bus_injections(&ybus, &sol.vm, &sol.va);
            let mut violated = None;
            for i in 0..n {
                if types[i] != BusType::Pv {
                    continue;
                }
                let gen_q_total = inj[i].im * base + served_q[i];
                if gen_q_total > q_range[i].1 + 1e-6 {
                    violated = Some((i, q_range[i].1));
                    break;
                }
                if gen_q_total < q_range[i].0 - 1e-6 {
                    violated = Some((i, q_range[i].0));
                    break;
                }
            }
            match violated {
                Some((i, limit)) if switches < n => {
                    types[i] = BusType::Pq;
                    q_eff[i] = (limit - served_q[i]) / base;
                    switches += 1;
                }
                _ => break sol,
            }
        };

        // fold AC losses and slack residual back into the dispatch
        let inj = bus_injections(&ybus, &pf.vm, &pf.va);
        let slack_gen_p = inj[slack].re * base
            + case
                .loads
                .iter()
                .filter(|l| idx[&l.bus] == slack)
                .map(|l| l.p * (1.0 - if l.p > 0.0 { outcome.shed[&l.id] / l.p } else { 0.0 }))
                .sum::<f64>();
        let lp_slack_p: f64 = case
            .generators
            .iter()
            .filter(|g| g.in_service && idx[&g.bus] == slack)
            .map(|g| outcome.gen_p[&g.id])
            .sum();
        let new_loss = loss_mw + (slack_gen_p - lp_slack_p);

        // line-rating overshoot check on the AC flows
        let mut overshoot = false;
        if options.enforce_line_limits {
            for (bi, br) in case.branches.iter().enumerate() {
                if !br.in_service || br.rating <= 0.0 {
                    continue;
                }
                let mva = branch_flow_from(br, &idx, &pf.vm, &pf.va).norm() * base;
                if mva > br.rating * 1.001 {
                    let scale = rating_scale.entry(bi).or_insert(1.0);
                    *scale *= br.rating / mva;
                    overshoot = true;
                }
            }
        }

        // marginal cost update for quadratic units
        for g in case.generators.iter().filter(|g| g.cost_c2 != 0.0) {
            if let Some(p) = outcome.gen_p.get(&g.id) {
                marginal.insert(g.id, g.cost_c1 + 2.0 * g.cost_c2 * p);
            }
        }

        let dispatch_moved = match &prev_p {
            Some(prev) => outcome
                .gen_p
                .iter()
                .map(|(id, p)| (p - prev.get(id).copied().unwrap_or(0.0)).abs())
                .fold(0.0_f64, f64::max),
            None => f64::INFINITY,
        };
        let loss_moved = (new_loss - loss_mw).abs();
        prev_p = Some(outcome.gen_p.clone());
        loss_mw = new_loss;
        if (!overshoot && dispatch_moved < options.dispatch_tolerance_mw && loss_moved < options.dispatch_tolerance_mw)
            || outer >= options.max_outer_iterations
        {
            break;
        }
    }

    // distribute the slack bus residual across its generators
    let mut gen_p = outcome.gen_p.clone();
    let inj = bus_injections(&ybus, &pf.vm, &pf.va);
    let mut diagnostic = None;
    {
        let served_at_slack: f64 = case
            .loads
            .iter()
            .filter(|l| idx[&l.bus] == slack)
            .map(|l| l.p - outcome.shed[&l.id])
            .sum();
        let target = inj[slack].re * base + served_at_slack;
        let slack_gens: Vec<&crate::grid::Generator> = case
            .generators
            .iter()
            .filter(|g| g.in_service && idx[&g.bus] == slack)
            .collect();
        if !slack_gens.is_empty() {
            let pmin_sum: f64 = slack_gens.iter().map(|g| g.pmin).sum();
            let range_sum: f64 = slack_gens.iter().map(|g| g.pmax - g.pmin).sum();
            let mut frac = if range_sum > 0.0 {
                (target - pmin_sum) / range_sum
            } else {
                0.0
            };
            if !(0.0..=1.0).contains(&frac) {
                diagnostic = Some(format!(
                    "slack bus residual {target:.3} MW falls outside the combined generator range"
                ));
                frac = frac.clamp(0.0, 1.0);
            }
            for g in &slack_gens {
                gen_p.insert(g.id, g.pmin + (g.pmax - g.pmin) * frac);
            }
        }
    }

    // reactive output per generator: proportional range fill at each bus
    let mut dispatch: BTreeMap<u32, GenDispatch> = BTreeMap::new();
    for i in 0..n {
        let gens_here: Vec<&crate::grid::Generator> = case
            .generators
            .iter()
            .filter(|g| g.in_service && idx[&g.bus] == i)
            .collect();
        if gens_here.is_empty() {
            continue;
        }
        let total_q = inj[i].im * base + served_q[i];
        let (qmin_sum, qmax_sum) = q_range[i];
        let range = qmax_sum - qmin_sum;
        let frac = if range > 0.0 {
            ((total_q - qmin_sum) / range).clamp(0.0, 1.0)
        } else {
            0.0
        };
        if (total_q < qmin_sum - 1e-4 || total_q > qmax_sum + 1e-4) && diagnostic.is_none() {
            diagnostic = Some(format!(
                "reactive requirement {total_q:.3} MVAr at bus {} exceeds the generator range",
                case.buses[i].id
            ));
        }
        for g in gens_here {
            dispatch.insert(
                g.id,
                GenDispatch {
                    p: gen_p.get(&g.id).copied().unwrap_or(0.0),
                    q: g.qmin + (g.qmax - g.qmin) * frac,
                },
            );
        }
    }

    // voltage envelope check
    if options.enforce_voltage_limits {
        for (i, bus) in case.buses.iter().enumerate() {
            if pf.vm[i] < bus.vmin - 1e-6 || pf.vm[i] > bus.vmax + 1e-6 {
                return Ok(DispatchResult::failed(
                    format!(
                        "voltage {:.4} pu at bus {} violates limits [{}, {}]",
                        pf.vm[i], bus.id, bus.vmin, bus.vmax
                    ),
                    pf,
                ));
            }
        }
    }

    let fraction = shed_fraction(case, &outcome.shed);
    let p_for_cost: BTreeMap<u32, f64> = dispatch.iter().map(|(id, d)| (*id, d.p)).collect();
    Ok(DispatchResult {
        status: status_for(fraction),
        total_shed_fraction: fraction,
        generation_cost: quadratic_cost(case, &p_for_cost),
        shed_by_load: outcome.shed,
        dispatch,
        solution: pf,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;

    fn two_bus(capacity: f64, load: f64, r: f64) -> NetworkCase {
        parse_case(&format!(
            r#"{{
                "base_mva": 100.0,
                "buses": [
                    {{"id": 1, "role": "slack"}},
                    {{"id": 2, "role": "pq"}}
                ],
                "branches": [{{"from": 1, "to": 2, "r": {r}, "x": 0.1}}],
                "generators": [{{"id": 1, "bus": 1, "pmin": 0.0, "pmax": {capacity},
                                 "qmin": -300.0, "qmax": 300.0, "c1": 10.0}}],
                "loads": [{{"id": 1, "bus": 2, "p": {load}, "q": {q}}}]
            }}"#,
            q = load * 0.2,
        ))
        .unwrap()
    }

    #[test]
    fn ample_capacity_sheds_nothing() {
        let case = two_bus(300.0, 100.0, 0.001);
        let result = solve_opf_with_shed(&case, &SolverOptions::default()).unwrap();
        assert_eq!(result.status, DispatchStatus::Optimal);
        assert!(result.total_shed_fraction < 1e-9);
        assert!(result.solution.max_mismatch <= 1e-8);
        let p = result.dispatch[&1].p;
        assert!(p >= 100.0 && p < 102.0, "dispatch covers load plus losses, got {p}");
    }

    #[test]
    fn dc_single_bus_shed_is_forced() {
        let case = parse_case(
            r#"{
                "base_mva": 100.0,
                "buses": [{"id": 1, "role": "slack"}],
                "branches": [],
                "generators": [{"id": 1, "bus": 1, "pmin": 0.0, "pmax": 40.0,
                                "qmin": -50.0, "qmax": 50.0, "c1": 10.0}],
                "loads": [{"id": 1, "bus": 1, "p": 100.0, "q": 0.0}]
            }"#,
        )
        .unwrap();
        let result = solve_dcopf_with_shed(&case).unwrap();
        assert_eq!(result.status, DispatchStatus::ShedRequired);
        assert!((result.shed_by_load[&1] - 60.0).abs() < 1e-6);
        assert!((result.total_shed_fraction - 0.6).abs() < 1e-9);
    }

    #[test]
    fn ac_matches_dc_on_lossless_deficit() {
        // capacity is 60% of load: both routes must shed ~40%
        let case = two_bus(60.0, 100.0, 0.0);
        let dc = solve_dcopf_with_shed(&case).unwrap();
        let mut opts = SolverOptions::default();
        opts.enforce_voltage_limits = false;
        let ac = solve_opf_with_shed(&case, &opts).unwrap();
        assert!((dc.total_shed_fraction - 0.4).abs() < 1e-6);
        assert!(
            (ac.total_shed_fraction - dc.total_shed_fraction).abs() < 0.005,
            "ac {} vs dc {}",
            ac.total_shed_fraction,
            dc.total_shed_fraction
        );
        assert_eq!(ac.status, DispatchStatus::ShedRequired);
    }

    #[test]
    fn shed_respects_per_load_bounds_and_flags() {
        let case = parse_case(
            r#"{
                "base_mva": 100.0,
                "buses": [
                    {"id": 1, "role": "slack"},
                    {"id": 2, "role": "pq"}
                ],
                "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.1}],
                "generators": [{"id": 1, "bus": 1, "pmin": 0.0, "pmax": 50.0,
                                "qmin": -100.0, "qmax": 100.0, "c1": 10.0}],
                "loads": [
                    {"id": 1, "bus": 2, "p": 40.0, "q": 5.0, "sheddable": false},
                    {"id": 2, "bus": 2, "p": 60.0, "q": 8.0, "sheddable": true}
                ]
            }"#,
        )
        .unwrap();
        let mut opts = SolverOptions::default();
        opts.enforce_voltage_limits = false;
        let result = solve_opf_with_shed(&case, &opts).unwrap();
        assert_eq!(result.shed_by_load[&1], 0.0);
        let shed2 = result.shed_by_load[&2];
        assert!(shed2 > 0.0 && shed2 <= 60.0 + 1e-9);
    }

    #[test]
    fn shed_penalty_must_dominate_marginal_cost() {
        let case = two_bus(100.0, 50.0, 0.0);
        let mut opts = SolverOptions::default();
        opts.shed_penalty_m = 5.0;
        assert!(matches!(
            solve_opf_with_shed(&case, &opts),
            Err(OpfError::BadOptions(_))
        ));
    }

    #[test]
    fn results_are_deterministic() {
        let case = two_bus(60.0, 100.0, 0.002);
        let opts = SolverOptions::default();
        let a = solve_opf_with_shed(&case, &opts).unwrap();
        let b = solve_opf_with_shed(&case, &opts).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn gap_formatting_matches_display_rules() {
        assert_eq!(format_gap_percent(40.7), "40.7");
        assert_eq!(format_gap_percent(3.47), "3.47");
        assert_eq!(format_gap_percent(16.4), "16.4");
        assert_eq!(format_gap_percent(0.0), "0.00");
        assert_eq!(format_gap_percent(0.407), "0.407");
    }

    #[test]
    fn failed_dispatch_has_no_gap() {
        let failed = DispatchResult::failed("x".into(), empty_solution(1));
        assert!(matches!(
            feasibility_gap(&failed),
            Err(OpfError::FailedDispatch)
        ));
        let ok = DispatchResult {
            status: DispatchStatus::ShedRequired,
            total_shed_fraction: 0.407,
            ..failed
        };
        assert!((feasibility_gap(&ok).unwrap() - 40.7).abs() < 1e-12);
    }
}
