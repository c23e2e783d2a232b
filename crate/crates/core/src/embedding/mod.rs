//! Load embeddings: replace a network's load vector by a sparser one that
//! leaves the optimal dispatch and cost (nearly) unchanged.
//!
//! The pipeline is: solve the original OPF once to get a
//! [`ReferenceSolution`]; repeatedly solve a penalty subproblem that
//! concentrates the same load totals onto as few buses as the network
//! allows while holding the dispatch fixed ([`solve_penalty_subproblem`]);
//! escalate the congestion-keeping weights until the re-solved OPF cost of
//! the candidate lands within a relative tolerance of the original
//! ([`encode_loads`]). [`verify_bilevel`] audits any candidate against the
//! full requirement list — load totals, AC feasibility under the fixed
//! dispatch, and cost — and [`compression_report`] turns the before/after
//! nonzero counts into percentages.

mod subproblem;

pub use subproblem::SubproblemResult;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Complex, LoadVector, Network, OperatingPoint};
use crate::solver::{
    binding_sets, solve_acopf, solve_acopf_warm, solve_power_flow, BindingSets, SolveStatus,
    SolverConfig, DEFAULT_BINDING_EPS,
};

/// Feasibility tolerance for the fixed-dispatch power-flow audit: looser
/// than the solver's own tolerance so equality-constraint residue does not
/// read as infeasibility.
pub const FIXED_DISPATCH_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("invalid embedding configuration: {0}")]
    BadConfig(String),
    #[error("reference OPF solve ended {status:?}; embedding needs an optimal base")]
    Reference { status: SolveStatus },
    #[error("network has no nonzero loads to embed")]
    NoLoads,
    #[error("load vectors have mismatched dimensions")]
    Dimension,
    #[error("original load vector has no nonzero {0} entries")]
    DegenerateCount(&'static str),
}

/// Tolerances and weight schedule for [`encode_loads`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Relative cost tolerance: accept a candidate whose re-solved OPF cost
    /// is within this fraction of the reference cost.
    pub beta: f64,
    /// Initial weight of the voltage-bound-keeping penalty.
    pub beta_v: f64,
    /// Initial weight of the congested-arc-keeping penalty.
    pub beta_s: f64,
    /// Growth factor for `beta_v` per outer iteration.
    pub rho_v: f64,
    /// Growth factor for `beta_s` per outer iteration.
    pub rho_s: f64,
    /// Outer iteration cap. The loop is inclusive: `max_iter = 0` still
    /// solves exactly one subproblem.
    pub max_iter: usize,
    /// Loads with both components at or below this magnitude count as zero.
    pub zero_tol: f64,
    /// Settings for every inner OPF and subproblem solve.
    pub solver: SolverConfig,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            beta: 0.005,
            beta_v: 1.0,
            beta_s: 1.0,
            rho_v: 1.5,
            rho_s: 1.5,
            max_iter: 500,
            zero_tol: 1e-5,
            solver: SolverConfig::default(),
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if !(self.beta > 0.0) {
            return Err(EmbedError::BadConfig("beta must be positive".into()));
        }
        if !(self.rho_v > 1.0) || !(self.rho_s > 1.0) {
            return Err(EmbedError::BadConfig("rho_v and rho_s must exceed 1".into()));
        }
        if self.beta_v < 0.0 || self.beta_s < 0.0 {
            return Err(EmbedError::BadConfig("penalty weights must be nonnegative".into()));
        }
        if !(self.zero_tol > 0.0) {
            return Err(EmbedError::BadConfig("zero_tol must be positive".into()));
        }
        Ok(())
    }
}

/// The original OPF solution an embedding must preserve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSolution {
    /// The originating loads.
    pub loads: LoadVector,
    /// Optimal generator injections, to stay fixed under the embedding.
    pub dispatch: Vec<Complex>,
    /// Optimal generation cost.
    pub cost: f64,
    /// The full optimal operating state.
    pub point: OperatingPoint,
    /// Voltage bounds and thermal limits active at `point`.
    pub binding: BindingSets,
    /// Total active load, which every candidate must match.
    pub total_p: f64,
    /// Total reactive load, likewise.
    pub total_q: f64,
}

impl ReferenceSolution {
    /// Solve the OPF for `loads` and capture everything the embedding needs.
    pub fn solve(
        net: &Network,
        loads: &LoadVector,
        cfg: &SolverConfig,
    ) -> Result<Self, EmbedError> {
        let res = solve_acopf(net, loads, cfg);
        if res.status != SolveStatus::Optimal {
            return Err(EmbedError::Reference { status: res.status });
        }
        Ok(ReferenceSolution {
            loads: loads.clone(),
            dispatch: res.point.gen_injection.clone(),
            cost: res.objective,
            binding: binding_sets(net, &res.point, DEFAULT_BINDING_EPS),
            total_p: loads.total_p(),
            total_q: loads.total_q(),
            point: res.point,
        })
    }
}

/// One row of the outer-loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Relative cost gap of this iteration's candidate, `None` when the
    /// re-solved OPF did not reach feasibility.
    pub cost_error: Option<f64>,
    /// Buses still carrying a load above the zero tolerance.
    pub nonzero: usize,
    /// Weights used (not the escalated values for the next round).
    pub beta_v: f64,
    pub beta_s: f64,
}

/// Output of [`encode_loads`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingResult {
    /// The embedded load vector (best candidate when not converged).
    pub embedded: LoadVector,
    /// Outer iterations performed.
    pub iterations: usize,
    /// Weights of the iteration that produced `embedded`.
    pub final_beta_v: f64,
    pub final_beta_s: f64,
    /// Re-solved OPF cost of `embedded`.
    pub embedded_cost: f64,
    /// Whether the cost gap closed within tolerance.
    pub converged: bool,
    pub trace: Vec<TraceRow>,
    /// Operating state realizing `embedded` under the reference dispatch;
    /// useful as a warm start for verification.
    pub witness: OperatingPoint,
}

/// Audit of a candidate load vector against the embedding requirements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelReport {
    /// Buses with either load component above the zero tolerance.
    pub nonzero_count: usize,
    /// Signed total-load mismatches vs. the reference.
    pub delta_p: f64,
    pub delta_q: f64,
    /// Whether a power flow under the fixed reference dispatch meets every
    /// operating constraint at [`FIXED_DISPATCH_TOL`].
    pub pf_feasible: bool,
    /// Worst constraint violation of that power flow (infinite when the
    /// flow itself diverged — an infeasible candidate).
    pub pf_violation: f64,
    /// Worst generator deviation between the recovered dispatch and the
    /// reference (only the slack can deviate; the rest are pinned).
    pub dispatch_deviation: f64,
    /// Relative gap between the candidate's re-solved OPF cost and the
    /// reference cost; `None` when the re-solve found no feasible point.
    pub cost_gap: Option<f64>,
}

impl BilevelReport {
    /// The whole requirement list at once: totals preserved, AC-feasible
    /// under the fixed dispatch, and cost within `beta`.
    pub fn passes(&self, beta: f64) -> bool {
        self.pf_feasible
            && self.delta_p.abs() <= 1e-6
            && self.delta_q.abs() <= 1e-6
            && self.cost_gap.is_some_and(|g| g <= beta)
    }
}

/// Buses whose load has either component above `tol` in magnitude.
pub fn nonzero_load_count(loads: &LoadVector, tol: f64) -> usize {
    (0..loads.len()).filter(|&b| loads.p[b].abs() > tol || loads.q[b].abs() > tol).count()
}

/// Audit `candidate` against the reference: nonzero-load count, load-total
/// deltas, AC feasibility under the pinned reference dispatch, and the
/// re-solved OPF cost gap. `witness` warm-starts the power-flow check when
/// the caller has an operating state for the candidate; otherwise one is
/// recovered from the reference point. The cost re-solve is cold on
/// purpose: handing it the same inputs as the reference solve makes the
/// identity candidate's gap exactly zero.
pub fn verify_bilevel(
    net: &Network,
    rs: &ReferenceSolution,
    candidate: &LoadVector,
    cfg: &EmbeddingConfig,
    witness: Option<&OperatingPoint>,
) -> BilevelReport {
    assert_eq!(candidate.len(), net.n_buses(), "candidate dimension");
    let recovered;
    let warm = match witness {
        Some(op) => Some(op),
        None => {
            recovered = subproblem::recover_state(net, rs, candidate);
            recovered.as_ref().or(Some(&rs.point))
        }
    };
    let pf = solve_power_flow(net, candidate, &rs.dispatch, warm, &cfg.solver);
    let dispatch_deviation = pf
        .point
        .gen_injection
        .iter()
        .zip(&rs.dispatch)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0f64, f64::max);
    let re = solve_acopf(net, candidate, &cfg.solver);
    let cost_gap = match re.status {
        SolveStatus::Infeasible => None,
        _ => Some((re.objective - rs.cost).abs() / rs.cost),
    };
    BilevelReport {
        nonzero_count: nonzero_load_count(candidate, cfg.zero_tol),
        delta_p: candidate.total_p() - rs.total_p,
        delta_q: candidate.total_q() - rs.total_q,
        pf_feasible: pf.max_violation <= FIXED_DISPATCH_TOL,
        pf_violation: pf.max_violation,
        dispatch_deviation,
        cost_gap,
    }
}

/// One concentration subproblem at the given weights, warm-started from a
/// load vector: maximize load concentration subject to fixed dispatch,
/// matched totals, and the operating constraints. A state for `warm` is
/// recovered by power flow (falling back to the reference point when the
/// warm loads are outside its basin).
pub fn solve_penalty_subproblem(
    net: &Network,
    rs: &ReferenceSolution,
    beta_v: f64,
    beta_s: f64,
    warm: &LoadVector,
    cfg: &SolverConfig,
) -> SubproblemResult {
    let warm_op =
        subproblem::recover_state(net, rs, warm).unwrap_or_else(|| rs.point.clone());
    subproblem::solve_from_point(net, rs, beta_v, beta_s, &warm_op, cfg)
}

/// Embed `loads`: solve the reference OPF, then iterate concentration
/// subproblems with escalating congestion-keeping weights until a
/// candidate's re-solved cost is within `cfg.beta` of the reference.
pub fn encode_loads(
    net: &Network,
    loads: &LoadVector,
    cfg: &EmbeddingConfig,
) -> Result<EmbeddingResult, EmbedError> {
    cfg.validate()?;
    let rs = ReferenceSolution::solve(net, loads, &cfg.solver)?;
    encode_with_reference(net, &rs, cfg)
}

/// [`encode_loads`] for callers that already hold the reference solution.
pub fn encode_with_reference(
    net: &Network,
    rs: &ReferenceSolution,
    cfg: &EmbeddingConfig,
) -> Result<EmbeddingResult, EmbedError> {
    cfg.validate()?;
    if nonzero_load_count(&rs.loads, 0.0) == 0 {
        return Err(EmbedError::NoLoads);
    }
    let mut beta_v = cfg.beta_v;
    let mut beta_s = cfg.beta_s;
    let mut warm = rs.point.clone();
    let mut trace = Vec::new();
    // Best candidate by cost gap, kept for honest output on exhaustion.
    let mut best: Option<(f64, LoadVector, OperatingPoint, f64)> = None;
    for i in 0..=cfg.max_iter {
        let sub = subproblem::solve_from_point(net, rs, beta_v, beta_s, &warm, &cfg.solver);
        let re = solve_acopf_warm(net, &sub.loads, &cfg.solver, Some(&rs.point));
        let gap = match re.status {
            SolveStatus::Infeasible => None,
            _ => Some((re.objective - rs.cost).abs() / rs.cost),
        };
        trace.push(TraceRow {
            iteration: i,
            cost_error: gap,
            nonzero: nonzero_load_count(&sub.loads, cfg.zero_tol),
            beta_v,
            beta_s,
        });
        let rank = gap.unwrap_or(f64::INFINITY);
        if best.as_ref().map_or(true, |b| rank < b.0) {
            best = Some((rank, sub.loads.clone(), sub.point.clone(), re.objective));
        }
        if gap.is_some_and(|g| g <= cfg.beta) {
            return Ok(EmbeddingResult {
                embedded: sub.loads,
                iterations: i + 1,
                final_beta_v: beta_v,
                final_beta_s: beta_s,
                embedded_cost: re.objective,
                converged: true,
                trace,
                witness: sub.point,
            });
        }
        beta_v *= cfg.rho_v;
        beta_s *= cfg.rho_s;
        warm = sub.point;
    }
    let (_, embedded, witness, embedded_cost) = best.expect("loop ran at least once");
    let last = trace.last().expect("trace is nonempty");
    let (final_beta_v, final_beta_s) = (last.beta_v, last.beta_s);
    Ok(EmbeddingResult {
        embedded,
        iterations: cfg.max_iter + 1,
        final_beta_v,
        final_beta_s,
        embedded_cost,
        converged: false,
        trace,
        witness,
    })
}

/// Nonzero-count compression of `embedded` relative to `original`, as
/// percentages shaved off the active count, the reactive count, and their
/// mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub c_p: usize,
    pub c_q: usize,
    pub c_p_emb: usize,
    pub c_q_emb: usize,
    pub active_pct: f64,
    pub reactive_pct: f64,
    pub joint_pct: f64,
}

pub fn compression_report(
    original: &LoadVector,
    embedded: &LoadVector,
    zero_tol: f64,
) -> Result<CompressionReport, EmbedError> {
    if original.len() != embedded.len() {
        return Err(EmbedError::Dimension);
    }
    let c_p = original.count_nonzero_p(zero_tol);
    let c_q = original.count_nonzero_q(zero_tol);
    if c_p == 0 {
        return Err(EmbedError::DegenerateCount("active"));
    }
    if c_q == 0 {
        return Err(EmbedError::DegenerateCount("reactive"));
    }
    let c_p_emb = embedded.count_nonzero_p(zero_tol);
    let c_q_emb = embedded.count_nonzero_q(zero_tol);
    let active_pct = 100.0 * (c_p as f64 - c_p_emb as f64) / c_p as f64;
    let reactive_pct = 100.0 * (c_q as f64 - c_q_emb as f64) / c_q as f64;
    Ok(CompressionReport {
        c_p,
        c_q,
        c_p_emb,
        c_q_emb,
        active_pct,
        reactive_pct,
        joint_pct: 0.5 * (active_pct + reactive_pct),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use approx::assert_relative_eq;

    fn quick_cfg() -> EmbeddingConfig {
        EmbeddingConfig { max_iter: 6, ..EmbeddingConfig::default() }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        assert!(EmbeddingConfig::default().validate().is_ok());
        let cases: Vec<EmbeddingConfig> = vec![
            EmbeddingConfig { beta: 0.0, ..EmbeddingConfig::default() },
            EmbeddingConfig { rho_v: 1.0, ..EmbeddingConfig::default() },
            EmbeddingConfig { rho_s: 0.5, ..EmbeddingConfig::default() },
            EmbeddingConfig { beta_v: -1.0, ..EmbeddingConfig::default() },
            EmbeddingConfig { zero_tol: 0.0, ..EmbeddingConfig::default() },
        ];
        for bad in cases {
            assert!(bad.validate().is_err());
        }
    }

    /// The original loads audited against their own reference: every check
    /// passes, and the cost gap is exactly zero because the verifying
    /// re-solve repeats the reference solve bit for bit.
    #[test]
    fn identity_candidate_passes_all_checks() {
        let (net, loads) = cases::case14();
        let cfg = quick_cfg();
        let rs = ReferenceSolution::solve(&net, &loads, &cfg.solver).expect("reference");
        let rep = verify_bilevel(&net, &rs, &loads, &cfg, None);
        assert_eq!(rep.cost_gap, Some(0.0), "identical inputs must re-solve identically");
        assert!(rep.pf_feasible, "violation {}", rep.pf_violation);
        assert_eq!(rep.delta_p, 0.0);
        assert_eq!(rep.delta_q, 0.0);
        assert_eq!(rep.nonzero_count, 11);
        assert!(rep.passes(cfg.beta));
    }

    /// A shifted total must surface as exactly the delta that was added.
    #[test]
    fn total_mismatch_is_reported() {
        let (net, loads) = cases::case2();
        let cfg = quick_cfg();
        let rs = ReferenceSolution::solve(&net, &loads, &cfg.solver).expect("reference");
        let mut off = loads.clone();
        off.p[1] += 0.1;
        let rep = verify_bilevel(&net, &rs, &off, &cfg, None);
        assert_relative_eq!(rep.delta_p, 0.1, max_relative = 1e-12);
        assert!(!rep.passes(cfg.beta));
    }

    /// With a single load bus the totals pin the load completely: the
    /// embedding converges immediately and returns the input.
    #[test]
    fn single_load_bus_round_trips() {
        let (net, loads) = cases::case2();
        let cfg = quick_cfg();
        let res = encode_loads(&net, &loads, &cfg).expect("embeds");
        assert!(res.converged);
        assert_eq!(res.iterations, 1, "first candidate is already within tolerance");
        assert_eq!(res.final_beta_v, cfg.beta_v, "weights untouched on immediate success");
        for b in 0..net.n_buses() {
            assert!(
                (res.embedded.p[b] - loads.p[b]).abs() < 1e-5
                    && (res.embedded.q[b] - loads.q[b]).abs() < 1e-5,
                "bus {b}: embedded load drifted"
            );
        }
        let comp = compression_report(&loads, &res.embedded, cfg.zero_tol).expect("counts");
        assert_eq!(
            (comp.active_pct, comp.reactive_pct, comp.joint_pct),
            (0.0, 0.0, 0.0),
            "nothing to compress"
        );
    }

    /// An unreachable cost tolerance exhausts the iteration cap; the trace
    /// then shows the full geometric weight schedule.
    #[test]
    fn weights_escalate_geometrically() {
        let (net, loads) = cases::case2();
        let cfg = EmbeddingConfig { beta: 1e-12, max_iter: 3, ..EmbeddingConfig::default() };
        let res = encode_loads(&net, &loads, &cfg).expect("embeds");
        assert!(!res.converged);
        assert_eq!(res.iterations, 4, "inclusive loop: max_iter + 1 rounds");
        assert_eq!(res.trace.len(), 4);
        for (i, row) in res.trace.iter().enumerate() {
            // Powers of 1.5 are exact in binary floating point.
            assert_eq!(row.beta_v, 1.5f64.powi(i as i32));
            assert_eq!(row.beta_s, 1.5f64.powi(i as i32));
        }
        assert_eq!(res.final_beta_v, 1.5f64.powi(3));
    }

    /// `max_iter = 0` still runs the loop body once.
    #[test]
    fn max_iter_zero_solves_once() {
        let (net, loads) = cases::case2();
        let cfg = EmbeddingConfig { beta: 1e-12, max_iter: 0, ..EmbeddingConfig::default() };
        let res = encode_loads(&net, &loads, &cfg).expect("embeds");
        assert_eq!(res.trace.len(), 1);
        assert_eq!(res.iterations, 1);
        assert_eq!(res.final_beta_v, 1.0);
    }

    /// On the symmetric star the optimizer must break the tie and
    /// concentrate load onto one leg as far as the pinned dispatch allows,
    /// at least matching a brute-force scan of the feasible splits. (Full
    /// concentration is infeasible here: the slack's reactive injection is
    /// fixed, so a fully loaded leg would push voltages out of bounds.)
    #[test]
    fn star_concentrates_onto_one_leg() {
        let (net, loads) = cases::case3_star();
        let cfg = quick_cfg();
        let rs = ReferenceSolution::solve(&net, &loads, &cfg.solver).expect("reference");
        assert!(rs.binding.n_upper.is_empty() && rs.binding.e_binding.is_empty());

        // Oracle: the feasible set is the 1-D segment parametrized by the
        // active split t (the reactive components stay at their original
        // zero). Walk it, solving the fixed-injection power flow at each
        // point and keeping the feasible maximum of Σ(p² + q²). The grid is
        // a lower bound on the true optimum since it only probes one Newton
        // basin at finite resolution.
        let total = rs.total_p;
        let mut oracle = 0.0f64;
        let mut at = 0.0;
        let mut feasible = 0usize;
        for ti in 0..=120 {
            let t = ti as f64 / 120.0;
            let mut cand = LoadVector::zeros(3);
            cand.p[1] = t * total;
            cand.p[2] = (1.0 - t) * total;
            let Some(op) = subproblem::recover_state(&net, &rs, &cand) else {
                continue;
            };
            let ok = (0..3).all(|b| {
                let vm = op.voltage[b].norm();
                vm >= net.buses[b].v_min && vm <= net.buses[b].v_max
            });
            if ok {
                feasible += 1;
                let obj = cand.p[1] * cand.p[1] + cand.p[2] * cand.p[2];
                if obj > oracle {
                    oracle = obj;
                    at = t;
                }
            }
        }
        let symmetric = 2.0 * (0.5 * total).powi(2);
        assert!(
            oracle > 1.3 * symmetric && feasible > 20,
            "oracle grid should find genuinely concentrated feasible points \
             (best {oracle} at t={at}, {feasible} feasible)"
        );

        let sub = solve_penalty_subproblem(&net, &rs, 1.0, 1.0, &loads, &cfg.solver);
        assert!(sub.converged, "subproblem should solve the star");
        assert!(
            sub.concentration >= 0.95 * oracle,
            "concentration {} vs oracle {}",
            sub.concentration,
            oracle
        );
        let skew = (sub.loads.p[1] - sub.loads.p[2]).abs();
        assert!(skew >= 0.5 * total, "split should be decisively asymmetric: {:?}", sub.loads.p);
        assert_relative_eq!(sub.loads.p[1] + sub.loads.p[2], total, epsilon = 1e-6);
        assert_relative_eq!(sub.loads.q[1] + sub.loads.q[2], 0.0, epsilon = 1e-6);
        assert!(
            sub.loads.q[1].abs() <= 1e-6 && sub.loads.q[2].abs() <= 1e-6,
            "absent reactive components must stay zero: {:?}",
            sub.loads.q
        );
    }

    /// Published-style ratios: 11 → 4 active and 11 → 2 reactive nonzero
    /// loads shave 63.64% and 81.82%, joint 72.73%.
    #[test]
    fn compression_matches_published_ratios() {
        let n = 14;
        let mut original = LoadVector::zeros(n);
        for b in 0..11 {
            original.p[b] = 0.5;
            original.q[b] = 0.2;
        }
        let mut embedded = LoadVector::zeros(n);
        for b in 0..4 {
            embedded.p[b] = 1.0;
        }
        for b in 0..2 {
            embedded.q[b] = 0.6;
        }
        let rep = compression_report(&original, &embedded, 1e-5).expect("counts");
        assert_eq!((rep.c_p, rep.c_q, rep.c_p_emb, rep.c_q_emb), (11, 11, 4, 2));
        assert_relative_eq!(rep.active_pct, 100.0 * 7.0 / 11.0, max_relative = 1e-12);
        assert!((rep.active_pct - 63.64).abs() < 5e-3);
        assert!((rep.reactive_pct - 81.82).abs() < 5e-3);
        assert!((rep.joint_pct - 72.73).abs() < 5e-3);
    }

    #[test]
    fn compression_rejects_degenerate_originals() {
        let zeros = LoadVector::zeros(4);
        let mut p_only = LoadVector::zeros(4);
        p_only.p[0] = 1.0;
        assert!(matches!(
            compression_report(&zeros, &zeros, 1e-5),
            Err(EmbedError::DegenerateCount("active"))
        ));
        assert!(matches!(
            compression_report(&p_only, &p_only, 1e-5),
            Err(EmbedError::DegenerateCount("reactive"))
        ));
        let longer = LoadVector::zeros(5);
        assert!(matches!(
            compression_report(&p_only, &longer, 1e-5),
            Err(EmbedError::Dimension)
        ));
    }

    /// The full pipeline on the 14-bus fixture: converges within the cost
    /// tolerance, preserves totals to solver precision, stays AC-feasible
    /// under the pinned dispatch, and does not add loads anywhere.
    #[test]
    fn case14_embedding_converges_and_verifies() {
        let (net, loads) = cases::case14();
        let cfg = quick_cfg();
        let res = encode_loads(&net, &loads, &cfg).expect("embeds");
        assert!(res.converged, "trace: {:?}", res.trace);
        assert!(
            (res.embedded.total_p() - loads.total_p()).abs() <= 1e-6
                && (res.embedded.total_q() - loads.total_q()).abs() <= 1e-6,
            "totals must be preserved"
        );
        let rs = ReferenceSolution::solve(&net, &loads, &cfg.solver).expect("reference");
        let rep = verify_bilevel(&net, &rs, &res.embedded, &cfg, Some(&res.witness));
        assert!(rep.pf_feasible, "fixed-dispatch violation {}", rep.pf_violation);
        assert!(rep.cost_gap.is_some_and(|g| g <= cfg.beta), "gap {:?}", rep.cost_gap);
        assert!(
            rep.nonzero_count <= nonzero_load_count(&loads, cfg.zero_tol),
            "embedding may not spread load onto new buses"
        );
        for b in 0..net.n_buses() {
            if loads.p[b] == 0.0 && loads.q[b] == 0.0 {
                assert_eq!(
                    (res.embedded.p[b], res.embedded.q[b]),
                    (0.0, 0.0),
                    "bus {b} had no load and must stay empty"
                );
            }
        }
    }
}
