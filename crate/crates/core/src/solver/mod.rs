//! AC optimal power flow via penalty continuation with projected L-BFGS.
//!
//! Entry points: [`solve_acopf`] (minimum-cost dispatch), [`solve_power_flow`]
//! (recover voltages for a pinned dispatch), and [`project_dispatch`] (nearest
//! feasible dispatch to a target). All runs are deterministic for a given
//! [`SolverConfig`]: restarts draw their control jitter from a seeded stream
//! and candidates are ranked by a fixed rule, so equal inputs give bit-equal
//! outputs.
//!
//! [`check_feasibility`] is deliberately independent of the solver internals —
//! it re-derives every constraint family from the grid primitives so it can
//! audit solver output rather than echo it.

pub(crate) mod acopf;
pub(crate) mod engine;
pub(crate) mod pf;

pub use engine::{minimize, EngineConfig, Eval, Outcome, PenaltyProblem};

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::grid::{
    branch_flow, compute_flows, dispatch_cost, power_balance_residual, Complex, LoadVector,
    Network, OperatingPoint,
};
use acopf::{AcopfProblem, ObjectiveKind};
use pf::{PfModel, PfState};

/// Tolerances, iteration budgets, and restart policy for one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Worst constraint violation accepted as feasible.
    pub feas_tol: f64,
    /// Projected-gradient infinity norm accepted as stationary.
    pub opt_tol: f64,
    /// Penalty continuation rounds.
    pub max_outer: usize,
    /// L-BFGS iterations per continuation round.
    pub max_inner: usize,
    /// Seed for the restart jitter stream.
    pub seed: u64,
    /// Total attempts; the first is unjittered, later ones perturb angles.
    pub restarts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: 1e-6,
            opt_tol: 1e-6,
            max_outer: 50,
            max_inner: 500,
            seed: 0,
            restarts: 3,
        }
    }
}

/// How a solve ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// Feasible within tolerance and stationary.
    Optimal,
    /// No attempt reached feasibility.
    Infeasible,
    /// Feasible but the iteration budget ran out before stationarity.
    IterationLimit,
}

/// Best point found plus diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub point: OperatingPoint,
    /// Generation cost of the returned dispatch (unscaled).
    pub objective: f64,
    /// Worst constraint violation at the returned point.
    pub max_violation: f64,
    /// Inner iterations spent on the winning attempt.
    pub inner_iterations: usize,
}

/// Constraint-family violation maxima at an operating point; every entry is
/// zero when the corresponding family is satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub slack_angle: f64,
    pub voltage_bounds: f64,
    pub angle_bounds: f64,
    pub gen_bounds: f64,
    pub thermal: f64,
    pub balance: f64,
    /// Gap between stored flows and flows recomputed from the voltages.
    pub ohm: f64,
}

impl ViolationReport {
    pub fn max(&self) -> f64 {
        self.slack_angle
            .max(self.voltage_bounds)
            .max(self.angle_bounds)
            .max(self.gen_bounds)
            .max(self.thermal)
            .max(self.balance)
            .max(self.ohm)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Constraints active (within `eps`) at an operating point: buses at their
/// upper / lower voltage bound and arcs at their thermal limit. A bus at both
/// bounds counts as upper only, so the two bus sets are disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingSets {
    pub n_upper: Vec<usize>,
    pub n_lower: Vec<usize>,
    pub e_binding: Vec<usize>,
}

/// Minimum-cost AC-OPF from a flat start.
pub fn solve_acopf(net: &Network, loads: &LoadVector, cfg: &SolverConfig) -> SolveResult {
    solve_acopf_warm(net, loads, cfg, None)
}

/// Minimum-cost AC-OPF, optionally warm-started from a previous point.
pub fn solve_acopf_warm(
    net: &Network,
    loads: &LoadVector,
    cfg: &SolverConfig,
    warm: Option<&OperatingPoint>,
) -> SolveResult {
    let mut prob = AcopfProblem::new(net, loads, ObjectiveKind::Cost);
    run(&mut prob, warm, cfg)
}

/// Recover voltages for a pinned dispatch by Newton power flow. Injections
/// are fixed at every non-slack bus; the slack bus generators absorb both
/// active and reactive mismatch, split evenly, and their entries in
/// `dispatch` are ignored. Operating limits (bounds, thermal) are audited on
/// the result rather than enforced — a dispatch the network cannot serve
/// within limits comes back [`SolveStatus::Infeasible`] with an honest
/// violation figure.
pub fn solve_power_flow(
    net: &Network,
    loads: &LoadVector,
    dispatch: &[Complex],
    warm: Option<&OperatingPoint>,
    cfg: &SolverConfig,
) -> SolveResult {
    assert_eq!(dispatch.len(), net.n_generators(), "dispatch length");
    let slack = net.slack();
    let n = net.n_buses();
    let model = PfModel::dispatch_split(net);
    let mut p_inj: Vec<f64> = (0..n).map(|b| -loads.p[b]).collect();
    let mut q_inj: Vec<f64> = (0..n).map(|b| -loads.q[b]).collect();
    for (gen, s) in net.generators.iter().zip(dispatch) {
        if gen.bus != slack {
            p_inj[gen.bus] += s.re;
            q_inj[gen.bus] += s.im;
        }
    }
    let mut state = PfState::flat(n);
    if let Some(op) = warm {
        let shift = op.voltage[slack].arg();
        for b in 0..n {
            state.v[b] = op.voltage[b].norm();
            state.th[b] = if b == slack { 0.0 } else { op.voltage[b].arg() - shift };
        }
    }
    let pf_ok = model.solve(&p_inj, &q_inj, &mut state).is_ok();
    let voltage: Vec<Complex> =
        (0..n).map(|b| Complex::from_polar(state.v[b], state.th[b])).collect();
    let flow = compute_flows(net, &voltage);
    let mut gen_injection = dispatch.to_vec();
    let slack_gens: Vec<usize> =
        (0..net.n_generators()).filter(|&g| net.generators[g].bus == slack).collect();
    if !slack_gens.is_empty() {
        let mut s_tot = Complex::new(loads.p[slack], loads.q[slack]);
        for (k, br) in net.branches.iter().enumerate() {
            if br.from == slack {
                s_tot += flow[k];
            }
            if br.to == slack {
                s_tot += flow[net.n_branches() + k];
            }
        }
        let share = s_tot / slack_gens.len() as f64;
        for &g in &slack_gens {
            gen_injection[g] = share;
        }
    }
    let point = OperatingPoint { voltage, gen_injection, flow };
    let report = check_feasibility(net, loads, &point, cfg.feas_tol);
    let max_violation = if pf_ok { report.max() } else { f64::INFINITY };
    let status = if pf_ok && report.passes(cfg.feas_tol) {
        SolveStatus::Optimal
    } else {
        SolveStatus::Infeasible
    };
    let objective = dispatch_cost(net, &point.gen_injection);
    SolveResult { status, point, objective, max_violation, inner_iterations: 0 }
}

/// Nearest feasible operating point to a target dispatch (least squares over
/// the generator injections).
pub fn project_dispatch(
    net: &Network,
    loads: &LoadVector,
    target: &[Complex],
    warm: Option<&OperatingPoint>,
    cfg: &SolverConfig,
) -> SolveResult {
    assert_eq!(target.len(), net.n_generators(), "target dispatch length");
    let kind = ObjectiveKind::TrackDispatch {
        p: target.iter().map(|s| s.re).collect(),
        q: target.iter().map(|s| s.im).collect(),
    };
    let mut prob = AcopfProblem::new(net, loads, kind);
    run(&mut prob, warm, cfg)
}

/// Attempt rank: optimal beats merely-feasible beats infeasible; ties break
/// on objective (feasible) or violation (infeasible).
pub(crate) fn better(cand: &Outcome, best: &Outcome, feas_tol: f64) -> bool {
    let rank = |o: &Outcome| {
        if o.max_violation <= feas_tol {
            if o.stationary {
                2
            } else {
                1
            }
        } else {
            0
        }
    };
    let (rc, rb) = (rank(cand), rank(best));
    if rc != rb {
        return rc > rb;
    }
    if rc == 0 {
        cand.max_violation < best.max_violation
    } else {
        cand.objective < best.objective
    }
}

fn run(prob: &mut AcopfProblem, warm: Option<&OperatingPoint>, cfg: &SolverConfig) -> SolveResult {
    let engine_cfg = EngineConfig {
        feas_tol: cfg.feas_tol,
        opt_tol: cfg.opt_tol,
        max_outer: cfg.max_outer,
        max_inner: cfg.max_inner,
        ..EngineConfig::default()
    };
    let base = match warm {
        Some(op) => prob.pack_point(op),
        None => prob.flat_start(),
    };
    // Restart jitter is proportional to each control's box span, so voltage
    // controls (span ~0.1) and dispatch controls (span ~1) move comparably.
    let dim = base.len();
    let mut lo = vec![f64::NEG_INFINITY; dim];
    let mut hi = vec![f64::INFINITY; dim];
    prob.bounds(&mut lo, &mut hi);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Outcome> = None;
    for attempt in 0..cfg.restarts.max(1) {
        let mut x0 = base.clone();
        if attempt > 0 {
            for i in 0..dim {
                let span = (hi[i] - lo[i]).min(2.0);
                x0[i] += rng.gen_range(-0.1..0.1) * span;
            }
        }
        let out = minimize(prob, &x0, &engine_cfg);
        let solved = out.max_violation <= cfg.feas_tol && out.stationary;
        if best.as_ref().map_or(true, |b| better(&out, b, cfg.feas_tol)) {
            best = Some(out);
        }
        if solved {
            break;
        }
    }
    let best = best.expect("at least one attempt");
    let status = if best.max_violation <= cfg.feas_tol {
        if best.stationary {
            SolveStatus::Optimal
        } else {
            SolveStatus::IterationLimit
        }
    } else {
        SolveStatus::Infeasible
    };
    let point = prob.unpack(&best.x);
    let objective = dispatch_cost(net_of(prob), &point.gen_injection);
    SolveResult {
        status,
        point,
        objective,
        max_violation: best.max_violation,
        inner_iterations: best.inner_iterations,
    }
}

fn net_of<'a>(prob: &AcopfProblem<'a>) -> &'a Network {
    prob.network()
}

/// Audit an operating point against every constraint family using only the
/// grid primitives. `loads` is the demand the point is supposed to serve.
pub fn check_feasibility(
    net: &Network,
    loads: &LoadVector,
    op: &OperatingPoint,
    _tol: f64,
) -> ViolationReport {
    assert_eq!(op.voltage.len(), net.n_buses(), "voltage length");
    assert_eq!(op.gen_injection.len(), net.n_generators(), "dispatch length");
    assert_eq!(op.flow.len(), net.n_arcs(), "flow length");

    let slack_angle = op.voltage[net.slack()].arg().abs();

    let mut voltage_bounds = 0.0f64;
    for (bus, v) in net.buses.iter().zip(&op.voltage) {
        let vm = v.norm();
        voltage_bounds = voltage_bounds.max(bus.v_min - vm).max(vm - bus.v_max);
    }

    let mut angle_bounds = 0.0f64;
    for br in &net.branches {
        let d = op.voltage[br.from].arg() - op.voltage[br.to].arg();
        angle_bounds = angle_bounds.max(d - br.angle_max).max(br.angle_min - d);
    }

    let mut gen_bounds = 0.0f64;
    for (gen, s) in net.generators.iter().zip(&op.gen_injection) {
        gen_bounds = gen_bounds
            .max(gen.p_min - s.re)
            .max(s.re - gen.p_max)
            .max(gen.q_min - s.im)
            .max(s.im - gen.q_max);
    }

    let mut thermal = 0.0f64;
    for a in 0..net.n_arcs() {
        thermal = thermal.max(op.flow[a].norm() - net.branches[net.arc_branch(a)].s_max);
    }

    let residual = power_balance_residual(net, op, loads).expect("dimensions checked above");
    let balance = residual.iter().map(|r| r.norm()).fold(0.0f64, f64::max);

    let mut ohm = 0.0f64;
    for a in 0..net.n_arcs() {
        let (tail, head) = net.arc_ends(a);
        let recomputed =
            branch_flow(net.branches[net.arc_branch(a)].admittance, op.voltage[tail], op.voltage[head]);
        ohm = ohm.max((op.flow[a] - recomputed).norm());
    }

    ViolationReport {
        slack_angle,
        voltage_bounds: voltage_bounds.max(0.0),
        angle_bounds: angle_bounds.max(0.0),
        gen_bounds: gen_bounds.max(0.0),
        thermal: thermal.max(0.0),
        balance,
        ohm,
    }
}

/// Default activity tolerance for [`binding_sets`]: comfortably above the
/// solver's feasibility tolerance, comfortably below typical bound spans.
pub const DEFAULT_BINDING_EPS: f64 = 1e-4;

/// Classify which voltage bounds and thermal limits are active within `eps`.
pub fn binding_sets(net: &Network, op: &OperatingPoint, eps: f64) -> BindingSets {
    let mut sets = BindingSets::default();
    for (i, (bus, v)) in net.buses.iter().zip(&op.voltage).enumerate() {
        let vm = v.norm();
        if bus.v_max - vm <= eps {
            sets.n_upper.push(i);
        } else if vm - bus.v_min <= eps {
            sets.n_lower.push(i);
        }
    }
    for a in 0..net.n_arcs() {
        if net.branches[net.arc_branch(a)].s_max - op.flow[a].norm() <= eps {
            sets.e_binding.push(a);
        }
    }
    sets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::compute_flows;
    use approx::assert_relative_eq;

    /// Two lossless buses: the generator must exactly cover the load, and the
    /// optimum is checkable by hand.
    #[test]
    fn two_bus_optimum_matches_hand_solution() {
        let (net, loads) = cases::case2();
        let res = solve_acopf(&net, &loads, &SolverConfig::default());
        assert_eq!(res.status, SolveStatus::Optimal);
        // Lossless line: p^g = p^d = 0.5 exactly at any feasible point.
        assert_relative_eq!(res.point.gen_injection[0].re, 0.5, max_relative = 1e-4);
        let report = check_feasibility(&net, &loads, &res.point, 1e-6);
        assert!(report.passes(1e-6), "violations: {report:?}");
        // cost(0.5) = 100·0.25 + 500·0.5 = 275 in per-unit coefficients.
        assert_relative_eq!(res.objective, 275.0, max_relative = 1e-3);
    }

    #[test]
    fn zero_load_costs_nothing() {
        let (net, _) = cases::case2();
        let loads = LoadVector::zeros(net.n_buses());
        let res = solve_acopf(&net, &loads, &SolverConfig::default());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!(res.objective.abs() < 1e-4, "objective {}", res.objective);
        assert!(res.point.gen_injection[0].norm() < 1e-4);
    }

    #[test]
    fn case14_reaches_optimal_and_passes_audit() {
        let (net, loads) = cases::case14();
        let res = solve_acopf(&net, &loads, &SolverConfig::default());
        assert_eq!(res.status, SolveStatus::Optimal, "violation {}", res.max_violation);
        let report = check_feasibility(&net, &loads, &res.point, 1e-6);
        assert!(report.passes(1e-6), "violations: {report:?}");
        assert!(res.objective > 0.0);
        // Different jitter seeds must land on the same basin.
        let alt = solve_acopf(
            &net,
            &loads,
            &SolverConfig { seed: 99, ..SolverConfig::default() },
        );
        assert_eq!(alt.status, SolveStatus::Optimal);
        assert!(
            ((alt.objective - res.objective) / res.objective).abs() < 1e-3,
            "seed drift: {} vs {}",
            alt.objective,
            res.objective
        );
    }

    #[test]
    fn case30_reaches_optimal_and_passes_audit() {
        let (net, loads) = cases::case30();
        let res = solve_acopf(&net, &loads, &SolverConfig::default());
        assert_eq!(res.status, SolveStatus::Optimal, "violation {}", res.max_violation);
        let report = check_feasibility(&net, &loads, &res.point, 1e-6);
        assert!(report.passes(1e-6), "violations: {report:?}");
    }

    #[test]
    fn repeated_solves_are_bitwise_identical() {
        let (net, loads) = cases::case14();
        let cfg = SolverConfig::default();
        let a = solve_acopf(&net, &loads, &cfg);
        let b = solve_acopf(&net, &loads, &cfg);
        assert_eq!(
            serde_json::to_string(&a.point).unwrap(),
            serde_json::to_string(&b.point).unwrap()
        );
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }

    /// Fixed-dispatch power flow must recover a feasible point from cold when
    /// the dispatch is known good.
    #[test]
    fn power_flow_recovers_known_dispatch() {
        let (net, loads) = cases::case2();
        let opf = solve_acopf(&net, &loads, &SolverConfig::default());
        assert_eq!(opf.status, SolveStatus::Optimal);
        let pf = solve_power_flow(
            &net,
            &loads,
            &opf.point.gen_injection,
            None,
            &SolverConfig::default(),
        );
        assert!(
            pf.max_violation <= 1e-5,
            "power flow violation {}",
            pf.max_violation
        );
        let report = check_feasibility(&net, &loads, &pf.point, 1e-5);
        assert!(report.passes(1e-5), "violations: {report:?}");
    }

    #[test]
    fn project_dispatch_returns_feasible_near_target() {
        let (net, loads) = cases::case14();
        let opf = solve_acopf(&net, &loads, &SolverConfig::default());
        let res = project_dispatch(
            &net,
            &loads,
            &opf.point.gen_injection,
            Some(&opf.point),
            &SolverConfig::default(),
        );
        assert_ne!(res.status, SolveStatus::Infeasible);
        // The target is already feasible, so the projection should stay put.
        for (a, b) in res.point.gen_injection.iter().zip(&opf.point.gen_injection) {
            assert!((a - b).norm() < 1e-3, "projection moved {a} away from {b}");
        }
    }

    /// The audit must flag each constructed violation in the right family.
    #[test]
    fn feasibility_audit_catches_constructed_violations() {
        let (net, loads) = cases::case14();
        let base = solve_acopf(&net, &loads, &SolverConfig::default());
        assert_eq!(base.status, SolveStatus::Optimal);

        // Push one voltage magnitude above its cap; flows kept consistent.
        let mut op = base.point.clone();
        let over = net.buses[5].v_max + 0.01;
        op.voltage[5] = Complex::from_polar(over, op.voltage[5].arg());
        op.flow = compute_flows(&net, &op.voltage);
        let rep = check_feasibility(&net, &loads, &op, 1e-6);
        assert_relative_eq!(rep.voltage_bounds, 0.01, max_relative = 1e-9);
        assert!(rep.ohm < 1e-12, "flows were recomputed, ohm {}", rep.ohm);

        // Rotate the slack bus.
        let mut op = base.point.clone();
        op.voltage[net.slack()] *= Complex::from_polar(1.0, 0.02);
        let rep = check_feasibility(&net, &loads, &op, 1e-6);
        assert_relative_eq!(rep.slack_angle, 0.02, max_relative = 1e-9);

        // Violate a generator upper bound.
        let mut op = base.point.clone();
        op.gen_injection[1] += Complex::new(net.generators[1].p_max, 0.0);
        let rep = check_feasibility(&net, &loads, &op, 1e-6);
        assert!(rep.gen_bounds > 0.0 && rep.balance > 0.0);

        // Tamper with a stored flow: Ohm's-law gap appears.
        let mut op = base.point.clone();
        op.flow[3] += Complex::new(0.05, 0.0);
        let rep = check_feasibility(&net, &loads, &op, 1e-6);
        assert_relative_eq!(rep.ohm, 0.05, max_relative = 1e-9);

        // A flat profile does not serve the load: balance must fail.
        let flat = OperatingPoint {
            voltage: vec![Complex::new(1.0, 0.0); net.n_buses()],
            gen_injection: vec![Complex::new(0.0, 0.0); net.n_generators()],
            flow: vec![Complex::new(0.0, 0.0); net.n_arcs()],
        };
        let rep = check_feasibility(&net, &loads, &flat, 1e-6);
        assert!(rep.balance > 0.1, "flat start should violate balance");
    }

    #[test]
    fn binding_sets_classify_and_stay_disjoint() {
        let (net, _) = cases::case14();
        let mut op = OperatingPoint {
            voltage: net
                .buses
                .iter()
                .map(|b| Complex::new(0.5 * (b.v_min + b.v_max), 0.0))
                .collect(),
            gen_injection: vec![Complex::new(0.0, 0.0); net.n_generators()],
            flow: Vec::new(),
        };
        op.voltage[2] = Complex::new(net.buses[2].v_max, 0.0);
        op.voltage[7] = Complex::new(net.buses[7].v_min, 0.0);
        op.flow = compute_flows(&net, &op.voltage);
        // Force one arc to sit at its limit by shrinking that limit.
        let mut net = net;
        net.branches[4].s_max = op.flow[4].norm();
        let sets = binding_sets(&net, &op, 1e-4);
        assert!(sets.n_upper.contains(&2));
        assert!(sets.n_lower.contains(&7));
        assert!(sets.e_binding.contains(&4));
        for i in &sets.n_upper {
            assert!(!sets.n_lower.contains(i), "bus {i} in both sets");
        }
    }
}
