//! AC power flow: pi-model admittance assembly and a full Newton-Raphson
//! solve in polar coordinates. This is the feasibility kernel the OPF
//! iterates around.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BusRole, NetworkCase};

#[derive(Debug, Error)]
pub enum PfError {
    #[error("case has no slack bus")]
    NoSlack,
    #[error("injection vector length {got} does not match bus count {want}")]
    DimensionMismatch { got: usize, want: usize },
}

/// Bus admittance matrix, indexed by position in `case.buses`.
///
/// Dense storage: the cases this toolkit targets stay well under a few
/// hundred buses.
#[derive(Debug, Clone)]
pub struct YBus {
    pub matrix: DMatrix<Complex64>,
}

/// Standard pi-model assembly over in-service branches.
pub fn build_ybus(case: &NetworkCase) -> YBus {
    let idx = case.bus_index();
    let n = case.buses.len();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in case.branches.iter().filter(|b| b.in_service) {
        let f = idx[&br.from_bus];
        let t = idx[&br.to_bus];
        let y_series = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let y_shunt = Complex64::new(0.0, br.b_shunt / 2.0);
        y[(f, f)] += y_series + y_shunt;
        y[(t, t)] += y_series + y_shunt;
        y[(f, t)] -= y_series;
        y[(t, f)] -= y_series;
    }
    YBus { matrix: y }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Voltage magnitude per bus, per-unit, in case bus order.
    pub vm: Vec<f64>,
    /// Voltage angle per bus, radians.
    pub va: Vec<f64>,
    pub iterations: usize,
    /// Largest per-bus complex power residual, per-unit.
    pub max_mismatch: f64,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Complex power injected at each bus by the network at voltages (vm, va),
/// per-unit: S_i = V_i * conj(sum_j Y_ij V_j).
pub fn bus_injections(ybus: &YBus, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
    let n = vm.len();
    let v: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(vm[i], va[i]))
        .collect();
    (0..n)
        .map(|i| {
            let mut current = Complex64::new(0.0, 0.0);
            for j in 0..n {
                current += ybus.matrix[(i, j)] * v[j];
            }
            v[i] * current.conj()
        })
        .collect()
}

/// From-end complex flow of an in-service branch, per-unit.
pub fn branch_flow_from(
    branch: &crate::grid::Branch,
    idx: &std::collections::BTreeMap<u32, usize>,
    vm: &[f64],
    va: &[f64],
) -> Complex64 {
    let f = idx[&branch.from_bus];
    let t = idx[&branch.to_bus];
    let vf = Complex64::from_polar(vm[f], va[f]);
    let vt = Complex64::from_polar(vm[t], va[t]);
    let y_series = Complex64::new(1.0, 0.0) / Complex64::new(branch.r, branch.x);
    let i_from = (vf - vt) * y_series + vf * Complex64::new(0.0, branch.b_shunt / 2.0);
    vf * i_from.conj()
}

/// Solves power flow for the given per-bus injections (MW / MVAr, aligned
/// with `case.buses`). Bus types come from the case roles: the slack bus
/// holds 1.0 at angle 0, pv buses hold magnitude 1.0, pq buses take both
/// P and Q from the injection vectors.
pub fn solve_powerflow(
    case: &NetworkCase,
    p_mw: &[f64],
    q_mvar: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> Result<PowerFlowSolution, PfError> {
    let n = case.buses.len();
    if p_mw.len() != n || q_mvar.len() != n {
        return Err(PfError::DimensionMismatch {
            got: p_mw.len().min(q_mvar.len()),
            want: n,
        });
    }
    let types: Vec<BusType> = case
        .buses
        .iter()
        .map(|b| match b.role {
            BusRole::Slack => BusType::Slack,
            BusRole::Pv => BusType::Pv,
            BusRole::Pq => BusType::Pq,
        })
        .collect();
    if !types.contains(&BusType::Slack) {
        return Err(PfError::NoSlack);
    }
    let ybus = build_ybus(case);
    let p_pu: Vec<f64> = p_mw.iter().map(|p| p / case.base_mva).collect();
    let q_pu: Vec<f64> = q_mvar.iter().map(|q| q / case.base_mva).collect();
    Ok(newton_solve(
        &ybus,
        &types,
        &p_pu,
        &q_pu,
        tolerance,
        max_iterations,
    ))
}

/// Newton-Raphson core over per-unit injections and explicit bus types.
/// Diverging or singular iterations come back as a non-converged solution
/// carrying a diagnostic.
pub(crate) fn newton_solve(
    ybus: &YBus,
    types: &[BusType],
    p_spec: &[f64],
    q_spec: &[f64],
    tolerance: f64,
    max_iterations: usize,
) -> PowerFlowSolution {
    let n = types.len();
    let mut vm = vec![1.0_f64; n];
    let mut va = vec![0.0_f64; n];

    // unknown ordering: angles at all non-slack buses, then magnitudes at pq
    let ang_buses: Vec<usize> = (0..n).filter(|&i| types[i] != BusType::Slack).collect();
    let mag_buses: Vec<usize> = (0..n).filter(|&i| types[i] == BusType::Pq).collect();
    let m = ang_buses.len() + mag_buses.len();

    let mismatch = |vm: &[f64], va: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
        let inj = bus_injections(ybus, vm, va);
        let dp: Vec<f64> = (0..n).map(|i| p_spec[i] - inj[i].re).collect();
        let dq: Vec<f64> = (0..n).map(|i| q_spec[i] - inj[i].im).collect();
        let mut worst = 0.0_f64;
        for i in 0..n {
            let r = match types[i] {
                BusType::Slack => 0.0,
                BusType::Pv => dp[i].abs(),
                BusType::Pq => dp[i].hypot(dq[i]),
            };
            worst = worst.max(r);
        }
        (dp, dq, worst)
    };

    let (mut dp, mut dq, mut worst) = mismatch(&vm, &va);
    let mut iterations = 0;
    while worst > tolerance && iterations < max_iterations {
        let jac = jacobian(ybus, &vm, &va, &ang_buses, &mag_buses);
        let mut rhs = DVector::<f64>::zeros(m);
        for (k, &i) in ang_buses.iter().enumerate() {
            rhs[k] = dp[i];
        }
        for (k, &i) in mag_buses.iter().enumerate() {
            rhs[ang_buses.len() + k] = dq[i];
        }
        let lu = jac.lu();
        let step = match lu.solve(&rhs) {
            Some(s) => s,
            None => {
                return PowerFlowSolution {
                    vm,
                    va,
                    iterations,
                    max_mismatch: worst,
                    converged: false,
                    diagnostic: Some(
                        "singular Jacobian (bus isolated from the slack or degenerate network)"
                            .to_string(),
                    ),
                }
            }
        };
        if step.iter().any(|v| !v.is_finite()) {
            return PowerFlowSolution {
                vm,
                va,
                iterations,
                max_mismatch: worst,
                converged: false,
                diagnostic: Some("non-finite Newton step".to_string()),
            };
        }
        for (k, &i) in ang_buses.iter().enumerate() {
            va[i] += step[k];
        }
        for (k, &i) in mag_buses.iter().enumerate() {
            vm[i] += step[ang_buses.len() + k];
        }
        iterations += 1;
        let next = mismatch(&vm, &va);
        dp = next.0;
        dq = next.1;
        worst = next.2;
    }
    let converged = worst <= tolerance;
    PowerFlowSolution {
        vm,
        va,
        iterations,
        max_mismatch: worst,
        converged,
        diagnostic: if converged {
            None
        } else {
            Some(format!(
                "iteration limit {max_iterations} reached with mismatch {worst:.3e}"
            ))
        },
    }
}

fn jacobian(
    ybus: &YBus,
    vm: &[f64],
    va: &[f64],
    ang_buses: &[usize],
    mag_buses: &[usize],
) -> DMatrix<f64> {
    let inj = bus_injections(ybus, vm, va);
    let m = ang_buses.len() + mag_buses.len();
    let mut jac = DMatrix::<f64>::zeros(m, m);
    let na = ang_buses.len();
    let g = |i: usize, j: usize| ybus.matrix[(i, j)].re;
    let b = |i: usize, j: usize| ybus.matrix[(i, j)].im;
    // dP/dθ and dP/dV rows for every angle bus
    for (row, &i) in ang_buses.iter().enumerate() {
        for (col, &j) in ang_buses.iter().enumerate() {
            jac[(row, col)] = if i == j {
                -inj[i].im - b(i, i) * vm[i] * vm[i]
            } else {
                let th = va[i] - va[j];
                vm[i] * vm[j] * (g(i, j) * th.sin() - b(i, j) * th.cos())
            };
        }
        for (col, &j) in mag_buses.iter().enumerate() {
            jac[(row, na + col)] = if i == j {
                inj[i].re / vm[i] + g(i, i) * vm[i]
            } else {
                let th = va[i] - va[j];
                vm[i] * (g(i, j) * th.cos() + b(i, j) * th.sin())
            };
        }
    }
    // dQ/dθ and dQ/dV rows for every pq bus
    for (row, &i) in mag_buses.iter().enumerate() {
        for (col, &j) in ang_buses.iter().enumerate() {
            jac[(na + row, col)] = if i == j {
                inj[i].re - g(i, i) * vm[i] * vm[i]
            } else {
                let th = va[i] - va[j];
                -vm[i] * vm[j] * (g(i, j) * th.cos() + b(i, j) * th.sin())
            };
        }
        for (col, &j) in mag_buses.iter().enumerate() {
            jac[(na + row, na + col)] = if i == j {
                inj[i].im / vm[i] - b(i, i) * vm[i]
            } else {
                let th = va[i] - va[j];
                vm[i] * (g(i, j) * th.sin() - b(i, j) * th.cos())
            };
        }
    }
    jac
}
