//! The penalty subproblem that concentrates load onto fewer buses.
//!
//! Decision variables are the complex voltages at the load buses: magnitude
//! everywhere, angle except at the slack (whose angle stays the reference).
//! The state at every other bus is eliminated by a Newton solve of its
//! balance equations — generator injections are pinned to the reference
//! dispatch throughout — and each load is whatever its own bus balance
//! implies, so load-bus balance holds identically and never appears as a
//! constraint. What the augmented-Lagrangian engine actually wrestles with:
//! two load-total equalities, the slack active balance (when the slack bus
//! carries no load), and the usual operating inequalities as hinges.
//!
//! The objective maximizes `Σ (p² + q²)` over the load buses, which drives
//! the totals onto as few buses as the network allows, minus quadratic
//! penalties that keep the reference solution's binding voltage bounds and
//! congested arcs where they were.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::grid::{compute_flows, Complex, LoadVector, Network, OperatingPoint};
use crate::solver::acopf::arc_partials;
use crate::solver::engine::{minimize, EngineConfig, Eval, Outcome, PenaltyProblem, MERIT_FAILED};
use crate::solver::pf::{DenseLu, PfModel, PfState};
use crate::solver::{better, SolverConfig};

use super::ReferenceSolution;

/// Box half-width for the angle variables. Real solutions sit well inside;
/// the box only keeps restart jitter and wild line-search steps on a sane
/// scale.
const TH_BOUND: f64 = 1.5;

/// Output of one subproblem solve.
#[derive(Debug, Clone)]
pub struct SubproblemResult {
    /// Candidate loads: the implied demand at each load bus, zero elsewhere.
    /// When the solve failed this is the warm start unchanged.
    pub loads: LoadVector,
    /// Operating state realizing `loads` under the reference dispatch.
    pub point: OperatingPoint,
    /// Feasible within tolerance and stationary.
    pub converged: bool,
    /// `Σ (p² + q²)` over the load buses at the returned point.
    pub concentration: f64,
}

pub(crate) struct EmbedProblem<'a> {
    net: &'a Network,
    rs: &'a ReferenceSolution,
    beta_v: f64,
    beta_s: f64,
    slack: usize,
    /// Buses with a nonzero original load, ascending; these carry the
    /// voltage-magnitude variables in slot order.
    load_buses: Vec<usize>,
    is_load: Vec<bool>,
    /// Load buses except the slack, ascending; these carry the angle
    /// variables, offset by `load_buses.len()` in the control vector.
    th_ctl: Vec<usize>,
    v_ctl_slot: Vec<usize>,
    th_ctl_slot: Vec<usize>,
    pf: PfModel<'a>,
    /// Fixed generator injection totals per bus, from the reference dispatch.
    gp: Vec<f64>,
    gq: Vec<f64>,
    /// Whether the slack active balance is an explicit equality (true when
    /// the slack bus has no load of its own to absorb it).
    slack_eq: bool,
    /// Reference binding pattern: buses at their upper / lower voltage bound
    /// and arcs at their thermal limit.
    vu: Vec<bool>,
    vl: Vec<bool>,
    cong: Vec<bool>,
    /// Sign of each original load component (per bus; 0 for absent
    /// components). Implied loads are confined to the half-line of their
    /// original sign — zero components stay zero — which is what turns the
    /// concentration objective into a sparsifier: pushed-out loads stop
    /// exactly at zero instead of going negative and circulating.
    sign_p: Vec<i8>,
    sign_q: Vec<i8>,
    outgoing: Vec<Vec<usize>>,
    // Multipliers: signed for the equalities, hinge-shifted for the rest.
    lam_p: f64,
    lam_q: f64,
    lam_s: f64,
    mu_thermal: Vec<f64>,
    mu_ang_hi: Vec<f64>,
    mu_ang_lo: Vec<f64>,
    mu_v_hi: Vec<f64>,
    mu_v_lo: Vec<f64>,
    mu_pd_lo: Vec<f64>,
    mu_pd_hi: Vec<f64>,
    mu_qd_lo: Vec<f64>,
    mu_qd_hi: Vec<f64>,
    // Cache for the most recent successful refresh.
    state: PfState,
    lu: Option<DenseLu>,
    pf_ok: bool,
    arc_p: Vec<f64>,
    arc_q: Vec<f64>,
    cos_d: Vec<f64>,
    sin_d: Vec<f64>,
    p_d: Vec<f64>,
    q_d: Vec<f64>,
    c_p: f64,
    c_q: f64,
    c_s: f64,
}

impl<'a> EmbedProblem<'a> {
    pub fn new(
        net: &'a Network,
        rs: &'a ReferenceSolution,
        beta_v: f64,
        beta_s: f64,
    ) -> Self {
        let n = net.buses.len();
        let m = net.branches.len();
        let slack = net.slack();
        let load_buses: Vec<usize> = (0..n)
            .filter(|&b| rs.loads.p[b] != 0.0 || rs.loads.q[b] != 0.0)
            .collect();
        assert!(!load_buses.is_empty(), "nothing to embed without loads");
        let mut is_load = vec![false; n];
        let mut v_ctl_slot = vec![usize::MAX; n];
        for (i, &b) in load_buses.iter().enumerate() {
            is_load[b] = true;
            v_ctl_slot[b] = i;
        }
        let th_ctl: Vec<usize> = load_buses.iter().copied().filter(|&b| b != slack).collect();
        let mut th_ctl_slot = vec![usize::MAX; n];
        for (j, &b) in th_ctl.iter().enumerate() {
            th_ctl_slot[b] = j;
        }
        let pf = PfModel::embed_split(net, &is_load);
        let mut gp = vec![0.0; n];
        let mut gq = vec![0.0; n];
        for (gen, s) in net.generators.iter().zip(&rs.dispatch) {
            gp[gen.bus] += s.re;
            gq[gen.bus] += s.im;
        }
        let mut vu = vec![false; n];
        let mut vl = vec![false; n];
        for &b in &rs.binding.n_upper {
            vu[b] = true;
        }
        for &b in &rs.binding.n_lower {
            vl[b] = true;
        }
        let mut cong = vec![false; 2 * m];
        for &a in &rs.binding.e_binding {
            cong[a] = true;
        }
        let sign = |v: f64| -> i8 {
            if v > 0.0 {
                1
            } else if v < 0.0 {
                -1
            } else {
                0
            }
        };
        let sign_p: Vec<i8> = rs.loads.p.iter().map(|&v| sign(v)).collect();
        let sign_q: Vec<i8> = rs.loads.q.iter().map(|&v| sign(v)).collect();
        let nv = pf.v_free.len();
        EmbedProblem {
            net,
            rs,
            beta_v,
            beta_s,
            slack,
            slack_eq: !is_load[slack],
            load_buses,
            is_load,
            th_ctl,
            v_ctl_slot,
            th_ctl_slot,
            pf,
            gp,
            gq,
            vu,
            vl,
            cong,
            sign_p,
            sign_q,
            outgoing: net.outgoing_arcs(),
            lam_p: 0.0,
            lam_q: 0.0,
            lam_s: 0.0,
            mu_thermal: vec![0.0; 2 * m],
            mu_ang_hi: vec![0.0; m],
            mu_ang_lo: vec![0.0; m],
            mu_v_hi: vec![0.0; nv],
            mu_v_lo: vec![0.0; nv],
            mu_pd_lo: vec![0.0; n],
            mu_pd_hi: vec![0.0; n],
            mu_qd_lo: vec![0.0; n],
            mu_qd_hi: vec![0.0; n],
            state: PfState::flat(n),
            lu: None,
            pf_ok: false,
            arc_p: vec![0.0; 2 * m],
            arc_q: vec![0.0; 2 * m],
            cos_d: vec![0.0; m],
            sin_d: vec![0.0; m],
            p_d: vec![0.0; n],
            q_d: vec![0.0; n],
            c_p: 0.0,
            c_q: 0.0,
            c_s: 0.0,
        }
    }

    /// Install `op` as the state seed and return the matching control vector.
    pub fn seed(&mut self, op: &OperatingPoint) -> Vec<f64> {
        let n = self.net.buses.len();
        let shift = op.voltage[self.slack].arg();
        for b in 0..n {
            self.state.v[b] = op.voltage[b].norm();
            self.state.th[b] =
                if b == self.slack { 0.0 } else { op.voltage[b].arg() - shift };
        }
        let mut x = vec![0.0; self.dim()];
        for (i, &b) in self.load_buses.iter().enumerate() {
            x[i] = self.state.v[b];
        }
        for (j, &b) in self.th_ctl.iter().enumerate() {
            x[self.load_buses.len() + j] = self.state.th[b];
        }
        x
    }

    /// Re-solve the eliminated state for the controls in `x` and refresh
    /// every cached quantity. Keeps the previous state on failure so later
    /// evaluations can still warm-start.
    fn refresh(&mut self, x: &[f64]) -> bool {
        let net = self.net;
        let m = net.branches.len();
        let mut trial = self.state.clone();
        for (i, &b) in self.load_buses.iter().enumerate() {
            trial.v[b] = x[i];
        }
        for (j, &b) in self.th_ctl.iter().enumerate() {
            trial.th[b] = x[self.load_buses.len() + j];
        }
        trial.th[self.slack] = 0.0;
        match self.pf.solve(&self.gp, &self.gq, &mut trial) {
            Ok(lu) => {
                self.lu = Some(lu);
                self.state = trial;
            }
            Err(_) => {
                self.pf_ok = false;
                return false;
            }
        }
        self.pf_ok = true;
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            let d = self.state.th[br.from] - self.state.th[br.to];
            let (sa, ca) = d.sin_cos();
            self.sin_d[k] = sa;
            self.cos_d[k] = ca;
            for (arc, tail, head, sa) in
                [(k, br.from, br.to, sa), (m + k, br.to, br.from, -sa)]
            {
                let (vt, vh) = (self.state.v[tail], self.state.v[head]);
                self.arc_p[arc] = g * (vt * vt - vt * vh * ca) - b * vt * vh * sa;
                self.arc_q[arc] = -g * vt * vh * sa - b * (vt * vt - vt * vh * ca);
            }
        }
        self.p_d.fill(0.0);
        self.q_d.fill(0.0);
        for &b in &self.load_buses {
            let mut p = self.gp[b];
            let mut q = self.gq[b];
            for &a in &self.outgoing[b] {
                p -= self.arc_p[a];
                q -= self.arc_q[a];
            }
            self.p_d[b] = p;
            self.q_d[b] = q;
        }
        self.c_p =
            self.load_buses.iter().map(|&b| self.p_d[b]).sum::<f64>() - self.rs.total_p;
        self.c_q =
            self.load_buses.iter().map(|&b| self.q_d[b]).sum::<f64>() - self.rs.total_q;
        self.c_s = if self.slack_eq {
            let mut r = self.gp[self.slack];
            for &a in &self.outgoing[self.slack] {
                r -= self.arc_p[a];
            }
            r
        } else {
            0.0
        };
        true
    }

    /// The implied loads of the cached state as a full-length vector.
    pub fn candidate(&self) -> LoadVector {
        let mut loads = LoadVector::zeros(self.net.buses.len());
        for &b in &self.load_buses {
            loads.p[b] = self.p_d[b];
            loads.q[b] = self.q_d[b];
        }
        loads
    }

    /// The cached state as an operating point under the reference dispatch.
    pub fn operating_point(&self) -> OperatingPoint {
        let n = self.net.buses.len();
        let voltage: Vec<Complex> =
            (0..n).map(|b| Complex::from_polar(self.state.v[b], self.state.th[b])).collect();
        let flow = compute_flows(self.net, &voltage);
        OperatingPoint { voltage, gen_injection: self.rs.dispatch.clone(), flow }
    }

    pub fn concentration(&self) -> f64 {
        self.load_buses
            .iter()
            .map(|&b| self.p_d[b] * self.p_d[b] + self.q_d[b] * self.q_d[b])
            .sum()
    }

    fn nv(&self) -> usize {
        self.load_buses.len()
    }

    /// Route a voltage-magnitude derivative to its owner: control slot or
    /// eliminated-state slot.
    fn scatter_v(&self, bus: usize, val: f64, gbuf: &mut [f64], gy: &mut [f64]) {
        if self.v_ctl_slot[bus] != usize::MAX {
            gbuf[self.v_ctl_slot[bus]] += val;
        } else {
            gy[self.pf.v_col(bus)] += val;
        }
    }

    /// Route an angle derivative likewise; the slack angle is pinned and
    /// absorbs nothing.
    fn scatter_th(&self, bus: usize, val: f64, gbuf: &mut [f64], gy: &mut [f64]) {
        if self.th_ctl_slot[bus] != usize::MAX {
            gbuf[self.nv() + self.th_ctl_slot[bus]] += val;
        } else if self.pf.th_slots[bus] != usize::MAX {
            gy[self.pf.th_col(bus)] += val;
        }
    }

    /// Which one-sided terms are active at `x`, in eval order; a
    /// finite-difference stencil straddling a flip is meaningless.
    #[cfg(test)]
    pub fn hinge_activity(&mut self, x: &[f64], weight: f64) -> Vec<bool> {
        assert!(self.refresh(x), "power flow must converge for activity probe");
        let net = self.net;
        let m = net.branches.len();
        let mut act = Vec::new();
        for a in 0..2 * m {
            let s_max = net.branches[a % m].s_max;
            let smag =
                (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
            act.push(self.mu_thermal[a] + 2.0 * weight * (smag - s_max) > 0.0);
        }
        for (k, br) in net.branches.iter().enumerate() {
            let d = self.state.th[br.from] - self.state.th[br.to];
            act.push(self.mu_ang_hi[k] + 2.0 * weight * (d - br.angle_max) > 0.0);
            act.push(self.mu_ang_lo[k] + 2.0 * weight * (br.angle_min - d) > 0.0);
        }
        for (s, &b) in self.pf.v_free.iter().enumerate() {
            let v = self.state.v[b];
            act.push(self.mu_v_hi[s] + 2.0 * weight * (v - net.buses[b].v_max) > 0.0);
            act.push(self.mu_v_lo[s] + 2.0 * weight * (net.buses[b].v_min - v) > 0.0);
        }
        for &b in &self.load_buses {
            if self.sign_p[b] >= 0 {
                act.push(self.mu_pd_lo[b] + 2.0 * weight * -self.p_d[b] > 0.0);
            }
            if self.sign_p[b] <= 0 {
                act.push(self.mu_pd_hi[b] + 2.0 * weight * self.p_d[b] > 0.0);
            }
            if self.sign_q[b] >= 0 {
                act.push(self.mu_qd_lo[b] + 2.0 * weight * -self.q_d[b] > 0.0);
            }
            if self.sign_q[b] <= 0 {
                act.push(self.mu_qd_hi[b] + 2.0 * weight * self.q_d[b] > 0.0);
            }
        }
        act
    }
}

impl<'a> PenaltyProblem for EmbedProblem<'a> {
    fn dim(&self) -> usize {
        self.load_buses.len() + self.th_ctl.len()
    }

    fn bounds(&self, lo: &mut [f64], hi: &mut [f64]) {
        for (i, &b) in self.load_buses.iter().enumerate() {
            lo[i] = self.net.buses[b].v_min;
            hi[i] = self.net.buses[b].v_max;
        }
        for j in 0..self.th_ctl.len() {
            lo[self.nv() + j] = -TH_BOUND;
            hi[self.nv() + j] = TH_BOUND;
        }
    }

    fn eval(&mut self, x: &[f64], weight: f64, grad: Option<&mut [f64]>) -> Eval {
        if !self.refresh(x) {
            if let Some(g) = grad {
                g.fill(0.0);
            }
            return Eval {
                merit: MERIT_FAILED,
                objective: MERIT_FAILED,
                max_violation: MERIT_FAILED,
                active_set: 0,
            };
        }
        let net = self.net;
        let n = net.buses.len();
        let m = net.branches.len();

        // Objective: negated concentration plus the congestion-keeping
        // penalties (the engine minimizes).
        let mut objective = -self.concentration();
        for b in 0..n {
            if self.vu[b] {
                objective += self.beta_v * (self.state.v[b] - net.buses[b].v_max).powi(2);
            }
            if self.vl[b] {
                objective += self.beta_v * (self.state.v[b] - net.buses[b].v_min).powi(2);
            }
        }
        for a in 0..2 * m {
            if self.cong[a] {
                let s_max = net.branches[a % m].s_max;
                let smag =
                    (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
                objective += self.beta_s * (smag - s_max).powi(2);
            }
        }

        let mut merit = objective;
        let mut viol = 0.0f64;

        // Equalities carry signed multipliers: λ·c + w·c², force λ + 2w·c.
        let mut eq = |c: f64, lam: f64| -> f64 {
            merit += lam * c + weight * c * c;
            viol = viol.max(c.abs());
            lam + 2.0 * weight * c
        };
        let t_cp = eq(self.c_p, self.lam_p);
        let t_cq = eq(self.c_q, self.lam_q);
        let t_cs = if self.slack_eq { eq(self.c_s, self.lam_s) } else { 0.0 };

        // Hinges as in the OPF problem: active force max(0, μ + 2w·h).
        let mut active_set = 0u64;
        let mut idx = 0u64;
        let mut hinge = |h: f64, mu: f64| -> f64 {
            let t = (mu + 2.0 * weight * h).max(0.0);
            merit += t * t / (4.0 * weight);
            viol = viol.max(h);
            idx += 1;
            if t > 0.0 {
                active_set = active_set.wrapping_mul(0x100000001b3).wrapping_add(idx);
            }
            t
        };
        let mut t_thermal = vec![0.0; 2 * m];
        for a in 0..2 * m {
            let s_max = net.branches[a % m].s_max;
            let smag =
                (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
            t_thermal[a] = hinge(smag - s_max, self.mu_thermal[a]);
        }
        let mut t_ang = vec![(0.0, 0.0); m];
        for (k, br) in net.branches.iter().enumerate() {
            let d = self.state.th[br.from] - self.state.th[br.to];
            let hi = hinge(d - br.angle_max, self.mu_ang_hi[k]);
            let lo = hinge(br.angle_min - d, self.mu_ang_lo[k]);
            t_ang[k] = (hi, lo);
        }
        let mut t_v = vec![0.0; self.pf.v_free.len()];
        for (s, &b) in self.pf.v_free.iter().enumerate() {
            let v = self.state.v[b];
            let hi = hinge(v - net.buses[b].v_max, self.mu_v_hi[s]);
            let lo = hinge(net.buses[b].v_min - v, self.mu_v_lo[s]);
            t_v[s] = hi - lo;
        }
        // Sign-preserving load bounds: ∂Φ/∂(p_d, q_d) forces per bus.
        let mut fp = vec![0.0; n];
        let mut fq = vec![0.0; n];
        for &b in &self.load_buses {
            if self.sign_p[b] >= 0 {
                fp[b] -= hinge(-self.p_d[b], self.mu_pd_lo[b]);
            }
            if self.sign_p[b] <= 0 {
                fp[b] += hinge(self.p_d[b], self.mu_pd_hi[b]);
            }
            if self.sign_q[b] >= 0 {
                fq[b] -= hinge(-self.q_d[b], self.mu_qd_lo[b]);
            }
            if self.sign_q[b] <= 0 {
                fq[b] += hinge(self.q_d[b], self.mu_qd_hi[b]);
            }
        }

        let result = Eval { merit, objective, max_violation: viol, active_set };

        let Some(gbuf) = grad else { return result };
        gbuf.fill(0.0);
        let mut gy = vec![0.0; self.pf.dim()];

        // ∂Φ/∂(state and controls) through the arc flows. Implied loads are
        // linear in the flows out of their bus (p_d = injection − Σ flows),
        // so their objective and total-equality forces fold into the same
        // per-arc weights as the thermal terms.
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            for (arc, tail, head, sa) in [
                (k, br.from, br.to, self.sin_d[k]),
                (m + k, br.to, br.from, -self.sin_d[k]),
            ] {
                let ca = self.cos_d[k];
                let (p, q) = (self.arc_p[arc], self.arc_q[arc]);
                let mut d_s = t_thermal[arc];
                if self.cong[arc] {
                    let smag = (p * p + q * q).sqrt();
                    d_s += 2.0 * self.beta_s * (smag - net.branches[k].s_max);
                }
                let mut wp = 0.0;
                let mut wq = 0.0;
                if d_s != 0.0 {
                    let smag = (p * p + q * q).sqrt();
                    if smag > 0.0 {
                        wp += d_s * p / smag;
                        wq += d_s * q / smag;
                    }
                }
                if self.is_load[tail] {
                    // ∂Φ/∂p_d = −2·p_d + t_cp + f_p, and ∂p_d/∂(this
                    // flow) = −1.
                    wp += 2.0 * self.p_d[tail] - t_cp - fp[tail];
                    wq += 2.0 * self.q_d[tail] - t_cq - fq[tail];
                }
                if self.slack_eq && tail == self.slack {
                    wp -= t_cs;
                }
                if wp == 0.0 && wq == 0.0 {
                    continue;
                }
                let [dp_dvt, dp_dvh, dp_dd, dq_dvt, dq_dvh, dq_dd] =
                    arc_partials(g, b, self.state.v[tail], self.state.v[head], ca, sa);
                self.scatter_v(tail, wp * dp_dvt + wq * dq_dvt, gbuf, &mut gy);
                self.scatter_v(head, wp * dp_dvh + wq * dq_dvh, gbuf, &mut gy);
                let gd = wp * dp_dd + wq * dq_dd;
                self.scatter_th(tail, gd, gbuf, &mut gy);
                self.scatter_th(head, -gd, gbuf, &mut gy);
            }
        }
        for (k, br) in net.branches.iter().enumerate() {
            let gd = t_ang[k].0 - t_ang[k].1;
            if gd != 0.0 {
                self.scatter_th(br.from, gd, gbuf, &mut gy);
                self.scatter_th(br.to, -gd, gbuf, &mut gy);
            }
        }
        for (s, t) in t_v.iter().enumerate() {
            gy[self.pf.th_free.len() + s] += t;
        }
        for b in 0..n {
            let mut f = 0.0;
            if self.vu[b] {
                f += 2.0 * self.beta_v * (self.state.v[b] - net.buses[b].v_max);
            }
            if self.vl[b] {
                f += 2.0 * self.beta_v * (self.state.v[b] - net.buses[b].v_min);
            }
            if f != 0.0 {
                self.scatter_v(b, f, gbuf, &mut gy);
            }
        }

        // Adjoint for the eliminated state: ψ solves Jᵀψ = −∂Φ/∂y.
        let lu = self.lu.as_ref().expect("refresh succeeded");
        for v in gy.iter_mut() {
            *v = -*v;
        }
        lu.solve_t(&mut gy);
        let psi = gy;

        // ψᵀ·∂F/∂u. Balance rows exist only at eliminated buses, so the row
        // bus itself is never a control; only the far end of each arc can
        // contribute. Residual = injection − flows, hence the signs.
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            for (tail, head, sa) in
                [(br.from, br.to, self.sin_d[k]), (br.to, br.from, -self.sin_d[k])]
            {
                let head_v = self.v_ctl_slot[head];
                let head_th = self.th_ctl_slot[head];
                if head_v == usize::MAX && head_th == usize::MAX {
                    continue;
                }
                let ca = self.cos_d[k];
                let [_, dp_dvh, dp_dd, _, dq_dvh, dq_dd] =
                    arc_partials(g, b, self.state.v[tail], self.state.v[head], ca, sa);
                let p_row =
                    (self.pf.p_slots[tail] != usize::MAX).then(|| self.pf.p_row(tail));
                let q_row =
                    (self.pf.v_slot[tail] != usize::MAX).then(|| self.pf.q_row(tail));
                for (row, dvh, dd) in [(p_row, dp_dvh, dp_dd), (q_row, dq_dvh, dq_dd)] {
                    let Some(row) = row else { continue };
                    if head_v != usize::MAX {
                        gbuf[head_v] -= psi[row] * dvh;
                    }
                    if head_th != usize::MAX {
                        // δ = θ_tail − θ_head, so the flow loses dd per unit
                        // of θ_head and the residual gains it.
                        gbuf[self.nv() + head_th] += psi[row] * dd;
                    }
                }
            }
        }

        result
    }

    fn reset_multipliers(&mut self) {
        self.lam_p = 0.0;
        self.lam_q = 0.0;
        self.lam_s = 0.0;
        for mu in [
            &mut self.mu_thermal,
            &mut self.mu_ang_hi,
            &mut self.mu_ang_lo,
            &mut self.mu_v_hi,
            &mut self.mu_v_lo,
            &mut self.mu_pd_lo,
            &mut self.mu_pd_hi,
            &mut self.mu_qd_lo,
            &mut self.mu_qd_hi,
        ] {
            mu.fill(0.0);
        }
    }

    fn update_multipliers(&mut self, x: &[f64], weight: f64) {
        if !self.refresh(x) {
            return;
        }
        let net = self.net;
        let m = net.branches.len();
        self.lam_p += 2.0 * weight * self.c_p;
        self.lam_q += 2.0 * weight * self.c_q;
        if self.slack_eq {
            self.lam_s += 2.0 * weight * self.c_s;
        }
        for a in 0..2 * m {
            let s_max = net.branches[a % m].s_max;
            let smag =
                (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
            self.mu_thermal[a] =
                (self.mu_thermal[a] + 2.0 * weight * (smag - s_max)).max(0.0);
        }
        for (k, br) in net.branches.iter().enumerate() {
            let d = self.state.th[br.from] - self.state.th[br.to];
            self.mu_ang_hi[k] =
                (self.mu_ang_hi[k] + 2.0 * weight * (d - br.angle_max)).max(0.0);
            self.mu_ang_lo[k] =
                (self.mu_ang_lo[k] + 2.0 * weight * (br.angle_min - d)).max(0.0);
        }
        for (s, &b) in self.pf.v_free.iter().enumerate() {
            let v = self.state.v[b];
            self.mu_v_hi[s] =
                (self.mu_v_hi[s] + 2.0 * weight * (v - net.buses[b].v_max)).max(0.0);
            self.mu_v_lo[s] =
                (self.mu_v_lo[s] + 2.0 * weight * (net.buses[b].v_min - v)).max(0.0);
        }
        for i in 0..self.load_buses.len() {
            let b = self.load_buses[i];
            if self.sign_p[b] >= 0 {
                self.mu_pd_lo[b] =
                    (self.mu_pd_lo[b] + 2.0 * weight * -self.p_d[b]).max(0.0);
            }
            if self.sign_p[b] <= 0 {
                self.mu_pd_hi[b] =
                    (self.mu_pd_hi[b] + 2.0 * weight * self.p_d[b]).max(0.0);
            }
            if self.sign_q[b] >= 0 {
                self.mu_qd_lo[b] =
                    (self.mu_qd_lo[b] + 2.0 * weight * -self.q_d[b]).max(0.0);
            }
            if self.sign_q[b] <= 0 {
                self.mu_qd_hi[b] =
                    (self.mu_qd_hi[b] + 2.0 * weight * self.q_d[b]).max(0.0);
            }
        }
    }

    fn hessian_diag(&mut self, x: &[f64], weight: f64, out: &mut [f64]) {
        out.fill(1.0);
        if !self.refresh(x) {
            return;
        }
        let net = self.net;
        let m = net.branches.len();
        let nv = self.nv();
        for (i, &b) in self.load_buses.iter().enumerate() {
            if self.vu[b] || self.vl[b] {
                out[i] += 2.0 * self.beta_v;
            }
        }
        // Gauss–Newton curvature of the equalities, the load-sign hinges,
        // and active arc terms, direct (control) parts only; the
        // eliminated-state response is left for the quasi-Newton pairs to
        // learn. Per-load-bus implied-demand sensitivities are kept as
        // rows so each bus's own sign hinges can be seeded.
        let dim = self.dim();
        let nl = self.load_buses.len();
        let mut dp = vec![0.0; nl * dim];
        let mut dq = vec![0.0; nl * dim];
        let mut ss = vec![0.0; dim];
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            for (arc, tail, head, sa) in [
                (k, br.from, br.to, self.sin_d[k]),
                (m + k, br.to, br.from, -self.sin_d[k]),
            ] {
                let ca = self.cos_d[k];
                let [dp_dvt, dp_dvh, dp_dd, dq_dvt, dq_dvh, dq_dd] =
                    arc_partials(g, b, self.state.v[tail], self.state.v[head], ca, sa);
                // Column/partial pairs for this arc's ends, θ sign included.
                let ends = [
                    (tail, dp_dvt, dq_dvt, 1.0),
                    (head, dp_dvh, dq_dvh, -1.0),
                ];
                if self.is_load[tail] {
                    let r = self.v_ctl_slot[tail] * dim;
                    for &(bus, dpv, dqv, sgn) in &ends {
                        if self.v_ctl_slot[bus] != usize::MAX {
                            dp[r + self.v_ctl_slot[bus]] -= dpv;
                            dq[r + self.v_ctl_slot[bus]] -= dqv;
                        }
                        if self.th_ctl_slot[bus] != usize::MAX {
                            dp[r + nv + self.th_ctl_slot[bus]] -= sgn * dp_dd;
                            dq[r + nv + self.th_ctl_slot[bus]] -= sgn * dq_dd;
                        }
                    }
                }
                if self.slack_eq && tail == self.slack {
                    for &(bus, dpv, _, sgn) in &ends {
                        if self.v_ctl_slot[bus] != usize::MAX {
                            ss[self.v_ctl_slot[bus]] -= dpv;
                        }
                        if self.th_ctl_slot[bus] != usize::MAX {
                            ss[nv + self.th_ctl_slot[bus]] -= sgn * dp_dd;
                        }
                    }
                }
                let s_max = net.branches[k].s_max;
                let (p, q) = (self.arc_p[arc], self.arc_q[arc]);
                let smag = (p * p + q * q).sqrt();
                let mut wgt = 0.0;
                if self.mu_thermal[arc] + 2.0 * weight * (smag - s_max) > 0.0 {
                    wgt += 2.0 * weight;
                }
                if self.cong[arc] {
                    wgt += 2.0 * self.beta_s;
                }
                if wgt > 0.0 && smag > 0.0 {
                    for &(bus, dpv, dqv, sgn) in &ends {
                        let dmag_dv = (p * dpv + q * dqv) / smag;
                        let dmag_dd = sgn * (p * dp_dd + q * dq_dd) / smag;
                        if self.v_ctl_slot[bus] != usize::MAX {
                            out[self.v_ctl_slot[bus]] += wgt * dmag_dv * dmag_dv;
                        }
                        if self.th_ctl_slot[bus] != usize::MAX {
                            out[nv + self.th_ctl_slot[bus]] += wgt * dmag_dd * dmag_dd;
                        }
                    }
                }
            }
            let d = self.state.th[br.from] - self.state.th[br.to];
            let ang_active = self.mu_ang_hi[k] + 2.0 * weight * (d - br.angle_max) > 0.0
                || self.mu_ang_lo[k] + 2.0 * weight * (br.angle_min - d) > 0.0;
            if ang_active {
                for bus in [br.from, br.to] {
                    if self.th_ctl_slot[bus] != usize::MAX {
                        out[nv + self.th_ctl_slot[bus]] += 2.0 * weight;
                    }
                }
            }
        }
        for c in 0..dim {
            let sp: f64 = (0..nl).map(|r| dp[r * dim + c]).sum();
            let sq: f64 = (0..nl).map(|r| dq[r * dim + c]).sum();
            out[c] += 2.0 * weight * (sp * sp + sq * sq + ss[c] * ss[c]);
        }
        for (r, &b) in self.load_buses.iter().enumerate() {
            let p_act = (self.sign_p[b] >= 0
                && self.mu_pd_lo[b] + 2.0 * weight * -self.p_d[b] > 0.0)
                || (self.sign_p[b] <= 0
                    && self.mu_pd_hi[b] + 2.0 * weight * self.p_d[b] > 0.0);
            let q_act = (self.sign_q[b] >= 0
                && self.mu_qd_lo[b] + 2.0 * weight * -self.q_d[b] > 0.0)
                || (self.sign_q[b] <= 0
                    && self.mu_qd_hi[b] + 2.0 * weight * self.q_d[b] > 0.0);
            for c in 0..dim {
                if p_act {
                    out[c] += 2.0 * weight * dp[r * dim + c] * dp[r * dim + c];
                }
                if q_act {
                    out[c] += 2.0 * weight * dq[r * dim + c] * dq[r * dim + c];
                }
            }
        }
    }
}

/// One subproblem solve from an explicit warm state, with seeded restarts.
/// Infeasible outcomes hand back the warm start unchanged (`converged:
/// false`) so the caller can escalate weights and try again from the same
/// place.
pub(crate) fn solve_from_point(
    net: &Network,
    rs: &ReferenceSolution,
    beta_v: f64,
    beta_s: f64,
    warm: &OperatingPoint,
    cfg: &SolverConfig,
) -> SubproblemResult {
    let mut prob = EmbedProblem::new(net, rs, beta_v, beta_s);
    let engine_cfg = EngineConfig {
        feas_tol: cfg.feas_tol,
        opt_tol: cfg.opt_tol,
        max_outer: cfg.max_outer,
        max_inner: cfg.max_inner,
        ..EngineConfig::default()
    };
    let base = prob.seed(warm);
    let dim = base.len();
    let mut lo = vec![f64::NEG_INFINITY; dim];
    let mut hi = vec![f64::INFINITY; dim];
    prob.bounds(&mut lo, &mut hi);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Outcome> = None;
    for attempt in 0..cfg.restarts.max(1) {
        let mut x0 = base.clone();
        // Even the first attempt gets a whisper of jitter: symmetric
        // networks make the symmetric warm start a stationary saddle of the
        // concentration objective, and a first-order method would sit on it
        // forever. Later attempts jitter at full restart scale.
        let scale = if attempt == 0 { 1e-4 } else { 0.1 };
        for i in 0..dim {
            let span = (hi[i] - lo[i]).min(2.0);
            x0[i] += rng.gen_range(-scale..scale) * span;
        }
        let out = minimize(&mut prob, &x0, &engine_cfg);
        if std::env::var_os("GRIDEMBED_DEBUG").is_some() {
            eprintln!(
                "attempt {attempt}: obj {} viol {} stat {} inner {} w {}",
                out.objective,
                out.max_violation,
                out.stationary,
                out.inner_iterations,
                out.final_weight
            );
            if prob.refresh(&out.x) {
                let mut sp = (0.0f64, 0);
                let mut sq = (0.0f64, 0);
                for &b in &prob.load_buses {
                    let hp = if prob.sign_p[b] >= 0 { -prob.p_d[b] } else { prob.p_d[b] };
                    let hq = if prob.sign_q[b] >= 0 { -prob.q_d[b] } else { prob.q_d[b] };
                    if hp > sp.0 {
                        sp = (hp, b);
                    }
                    if hq > sq.0 {
                        sq = (hq, b);
                    }
                }
                eprintln!(
                    "  c_p {:+.2e} c_q {:+.2e} c_s {:+.2e} signp {:.2e}@{} signq {:.2e}@{}",
                    prob.c_p, prob.c_q, prob.c_s, sp.0, sp.1, sq.0, sq.1
                );
            }
        }
        let solved = out.max_violation <= cfg.feas_tol && out.stationary;
        if best.as_ref().map_or(true, |b| better(&out, b, cfg.feas_tol)) {
            best = Some(out);
        }
        if solved {
            break;
        }
    }
    let best = best.expect("at least one attempt");
    let feasible = best.max_violation <= cfg.feas_tol;
    if feasible && prob.refresh(&best.x) {
        return SubproblemResult {
            loads: prob.candidate(),
            point: prob.operating_point(),
            converged: best.stationary,
            concentration: prob.concentration(),
        };
    }
    let loads = implied_loads(net, rs, warm);
    let concentration = (0..net.buses.len())
        .map(|b| loads.p[b] * loads.p[b] + loads.q[b] * loads.q[b])
        .sum();
    SubproblemResult { loads, point: warm.clone(), converged: false, concentration }
}

/// Recover a full operating state realizing `loads` under the reference
/// dispatch: a Newton solve with every injection prescribed, seeded from the
/// reference point. `None` when the loads are outside the solvable basin
/// from there.
pub(crate) fn recover_state(
    net: &Network,
    rs: &ReferenceSolution,
    loads: &LoadVector,
) -> Option<OperatingPoint> {
    let n = net.buses.len();
    let slack = net.slack();
    let model = PfModel::full_split(net);
    let mut p_inj: Vec<f64> = (0..n).map(|b| -loads.p[b]).collect();
    let mut q_inj: Vec<f64> = (0..n).map(|b| -loads.q[b]).collect();
    for (gen, s) in net.generators.iter().zip(&rs.dispatch) {
        p_inj[gen.bus] += s.re;
        q_inj[gen.bus] += s.im;
    }
    let mut state = PfState::flat(n);
    let shift = rs.point.voltage[slack].arg();
    for b in 0..n {
        state.v[b] = rs.point.voltage[b].norm();
        state.th[b] = if b == slack { 0.0 } else { rs.point.voltage[b].arg() - shift };
    }
    model.solve(&p_inj, &q_inj, &mut state).ok()?;
    let voltage: Vec<Complex> =
        (0..n).map(|b| Complex::from_polar(state.v[b], state.th[b])).collect();
    let flow = compute_flows(net, &voltage);
    Some(OperatingPoint { voltage, gen_injection: rs.dispatch.clone(), flow })
}

/// The loads an operating point implies at the reference's load buses, by
/// plain balance arithmetic (no solving): demand = generation − outflows.
pub(crate) fn implied_loads(
    net: &Network,
    rs: &ReferenceSolution,
    op: &OperatingPoint,
) -> LoadVector {
    let n = net.buses.len();
    let m = net.branches.len();
    let mut inj = vec![Complex::new(0.0, 0.0); n];
    for (gen, s) in net.generators.iter().zip(&rs.dispatch) {
        inj[gen.bus] += *s;
    }
    for (k, br) in net.branches.iter().enumerate() {
        inj[br.from] -= op.flow[k];
        inj[br.to] -= op.flow[m + k];
    }
    let mut loads = LoadVector::zeros(n);
    for b in 0..n {
        if rs.loads.p[b] != 0.0 || rs.loads.q[b] != 0.0 {
            loads.p[b] = inj[b].re;
            loads.q[b] = inj[b].im;
        }
    }
    loads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::solver::{binding_sets, DEFAULT_BINDING_EPS};

    fn reference(net: &Network, loads: &LoadVector) -> ReferenceSolution {
        ReferenceSolution::solve(net, loads, &SolverConfig::default()).expect("reference")
    }

    fn perturbed_controls(
        prob: &mut EmbedProblem,
        op: &OperatingPoint,
        seed: u64,
    ) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = prob.seed(op);
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
        x
    }

    /// Seeding the problem with the reference point must reproduce the
    /// reference loads: the eliminated state barely moves under the Newton
    /// polish, so the implied demands and both total constraints land on
    /// the originals to solver accuracy.
    #[test]
    fn reference_point_implies_reference_loads() {
        for (net, loads) in [cases::case2(), cases::case3_star(), cases::case14()] {
            let rs = reference(&net, &loads);
            let mut prob = EmbedProblem::new(&net, &rs, 1.0, 1.0);
            let x = prob.seed(&rs.point);
            assert!(prob.refresh(&x), "{}: reference state must re-solve", net.name);
            for &b in &prob.load_buses.clone() {
                assert!(
                    (prob.p_d[b] - loads.p[b]).abs() < 1e-4
                        && (prob.q_d[b] - loads.q[b]).abs() < 1e-4,
                    "{}: bus {b} implied load ({}, {}) vs original ({}, {})",
                    net.name,
                    prob.p_d[b],
                    prob.q_d[b],
                    loads.p[b],
                    loads.q[b]
                );
            }
            assert!(prob.c_p.abs() < 1e-4, "{}: c_p {}", net.name, prob.c_p);
            assert!(prob.c_q.abs() < 1e-4, "{}: c_q {}", net.name, prob.c_q);
            assert!(prob.c_s.abs() < 1e-4, "{}: c_s {}", net.name, prob.c_s);
        }
    }

    /// With no recorded binding sets the penalty terms are empty sums, so
    /// the reported objective is exactly the negated concentration — and
    /// with zero weights it stays exact even when binding sets are present.
    #[test]
    fn objective_reduces_to_negated_concentration() {
        let (net, loads) = cases::case3_star();
        let mut rs = reference(&net, &loads);
        assert!(rs.binding.n_upper.is_empty() && rs.binding.e_binding.is_empty());
        {
            let mut prob = EmbedProblem::new(&net, &rs, 3.0, 7.0);
            let x = perturbed_controls(&mut prob, &rs.point, 5);
            let e = prob.eval(&x, 1.0, None);
            assert_eq!(e.objective, -prob.concentration());
        }
        rs.binding.n_upper = vec![1];
        rs.binding.e_binding = vec![0, 2];
        let mut prob = EmbedProblem::new(&net, &rs, 0.0, 0.0);
        let x = perturbed_controls(&mut prob, &rs.point, 5);
        let e = prob.eval(&x, 1.0, None);
        assert_eq!(e.objective, -prob.concentration());
    }

    /// State recovery round-trips: the reference loads recover (essentially)
    /// the reference state, and absurd loads report failure instead of a
    /// fabricated state.
    #[test]
    fn recover_state_round_trips() {
        let (net, loads) = cases::case14();
        let rs = reference(&net, &loads);
        let op = recover_state(&net, &rs, &loads).expect("reference loads are solvable");
        for b in 0..net.n_buses() {
            assert!(
                (op.voltage[b] - rs.point.voltage[b]).norm() < 1e-4,
                "bus {b}: {} vs {}",
                op.voltage[b],
                rs.point.voltage[b]
            );
        }
        let mut absurd = loads.clone();
        absurd.p[3] = 1.0e6;
        assert!(recover_state(&net, &rs, &absurd).is_none());
    }

    /// The adjoint gradient against central differences, across cases,
    /// penalty weights, and nonzero multipliers, with synthetic binding
    /// sets so the congestion-keeping terms are exercised too. Components
    /// whose stencil straddles a hinge activation are skipped — the merit
    /// is nonsmooth there by design.
    #[test]
    fn gradient_matches_finite_differences() {
        let (net14, loads14) = cases::case14();
        let mut rs14 = reference(&net14, &loads14);
        let m14 = net14.branches.len();
        // Synthetic binding pattern: one control-bus voltage, one
        // eliminated-bus voltage, and arcs in both directions.
        rs14.binding.n_upper = vec![4, 6];
        rs14.binding.n_lower = vec![9];
        rs14.binding.e_binding = vec![0, 3, m14 + 2];

        let (net2, loads2) = cases::case2();
        let mut rs2 = reference(&net2, &loads2);
        rs2.binding.n_upper = vec![1];
        rs2.binding.e_binding = vec![0, 1];

        let (net3, loads3) = cases::case3_star();
        let rs3 = reference(&net3, &loads3);

        // A variant with load on the slack bus itself: the slack-balance
        // equality disappears and the slack voltage becomes a control.
        let mut loads3s = loads3.clone();
        loads3s.p[0] = 0.1;
        let rs3s = reference(&net3, &loads3s);

        let probes: Vec<(&str, &Network, &ReferenceSolution)> = vec![
            ("case14", &net14, &rs14),
            ("case2", &net2, &rs2),
            ("case3-star", &net3, &rs3),
            ("case3-slackload", &net3, &rs3s),
        ];
        for (label, net, rs) in probes {
            let mut prob = EmbedProblem::new(net, rs, 0.7, 0.9);
            let x = perturbed_controls(&mut prob, &rs.point, 23);
            let dim = prob.dim();
            let mut grad = vec![0.0; dim];
            for round in 0..7 {
                let weight = if round % 2 == 0 { 1.0 } else { 250.0 };
                if round == 3 {
                    prob.update_multipliers(&x, weight);
                }
                let e = prob.eval(&x, weight, Some(&mut grad));
                assert!(e.merit < 1e20, "{label}: probe point must evaluate");
                let h = 3e-6;
                for i in 0..dim {
                    let mut xp = x.clone();
                    xp[i] += h;
                    let mut xm = x.clone();
                    xm[i] -= h;
                    if prob.hinge_activity(&xp, weight) != prob.hinge_activity(&xm, weight) {
                        continue;
                    }
                    let ep = prob.eval(&xp, weight, None);
                    let em = prob.eval(&xm, weight, None);
                    let fd = (ep.merit - em.merit) / (2.0 * h);
                    // Tolerance: relative term plus the resolution limit of
                    // the difference — float cancellation plus the inner
                    // Newton solve's own tolerance leaking into the merit.
                    let scale = ep.merit.abs().max(em.merit.abs()).max(1.0);
                    let noise = (4.0 * f64::EPSILON * scale + 2e-9) / (2.0 * h);
                    let tol = 1e-4 * (grad[i].abs() + fd.abs() + 1.0) + noise;
                    assert!(
                        (grad[i] - fd).abs() <= tol,
                        "{label} round {round} coord {i}: grad {} vs fd {} (tol {tol})",
                        grad[i],
                        fd
                    );
                }
            }
        }
    }

    /// Binding sets computed at the reference are what the constructor
    /// caches: flags line up bus-for-bus and arc-for-arc.
    #[test]
    fn constructor_caches_binding_pattern() {
        let (net, loads) = cases::case14();
        let mut rs = reference(&net, &loads);
        rs.binding = binding_sets(&net, &rs.point, DEFAULT_BINDING_EPS);
        let prob = EmbedProblem::new(&net, &rs, 1.0, 1.0);
        for b in 0..net.n_buses() {
            assert_eq!(prob.vu[b], rs.binding.n_upper.contains(&b));
            assert_eq!(prob.vl[b], rs.binding.n_lower.contains(&b));
        }
        for a in 0..2 * net.branches.len() {
            assert_eq!(prob.cong[a], rs.binding.e_binding.contains(&a));
        }
    }
}
