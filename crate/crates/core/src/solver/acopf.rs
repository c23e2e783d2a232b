//! The AC-OPF problem in reduced control space, as a [`PenaltyProblem`].
//!
//! The decision variables are only the quantities an operator actually sets:
//! voltage magnitude at each generator bus and active output of each
//! non-slack generator. Everything else — angles, load-bus voltages,
//! generator reactive output, slack active output — is recovered by solving
//! the balance equations exactly with Newton power flow at every merit
//! evaluation. Eliminating the equalities this way keeps the penalty merit
//! small and well-conditioned: what remains for hinge penalties are the
//! genuine inequalities (thermal limits, angle-difference limits, load-bus
//! voltage bounds, reactive bounds, slack active bounds), of which only a
//! handful are ever active. Control bounds are boxes handled by the
//! engine's projection. Gradients come from the adjoint of the power-flow
//! Jacobian, reusing the factorization of the final Newton step, so one
//! gradient costs one extra triangular solve.
//!
//! The same struct serves two tasks, differing only in objective:
//! minimum-cost OPF and squared-distance dispatch projection.

use num_complex::Complex64;

use super::engine::{Eval, PenaltyProblem, MERIT_FAILED};
use super::pf::{DenseLu, PfModel, PfState};
use crate::grid::{compute_flows, Complex, LoadVector, Network, OperatingPoint};

pub(crate) enum ObjectiveKind {
    /// Generation cost, normalized by a deterministic scale so its gradient
    /// is O(1) against the penalty terms.
    Cost,
    /// Squared distance of the dispatch to a target, for optimality probes.
    TrackDispatch { p: Vec<f64>, q: Vec<f64> },
}

/// Deterministic normalization for the cost objective: the cost of running
/// every generator at full output, floored at 1.
pub(crate) fn cost_scale(net: &Network) -> f64 {
    let worst: f64 = net
        .generators
        .iter()
        .map(|g| g.cost.c2.abs() * g.p_max * g.p_max + g.cost.c1.abs() * g.p_max + g.cost.c0.abs())
        .sum();
    worst.max(1.0)
}

/// ∂(p, q)/∂(v_tail, v_head, Δ) for one arc, where Δ = θ_tail − θ_head and
/// `ca`/`sa` are cos Δ / sin Δ.
pub(crate) fn arc_partials(g: f64, b: f64, vt: f64, vh: f64, ca: f64, sa: f64) -> [f64; 6] {
    let vv = vt * vh;
    [
        g * (2.0 * vt - vh * ca) - b * vh * sa,
        -g * vt * ca - b * vt * sa,
        g * vv * sa - b * vv * ca,
        -g * vh * sa - b * (2.0 * vt - vh * ca),
        -g * vt * sa + b * vt * ca,
        -g * vv * ca - b * vv * sa,
    ]
}

pub(crate) struct AcopfProblem<'a> {
    net: &'a Network,
    loads: &'a LoadVector,
    kind: ObjectiveKind,
    scale: f64,
    slack: usize,
    pf: PfModel<'a>,
    outgoing: Vec<Vec<usize>>,
    /// Sorted buses hosting at least one generator; one voltage control each.
    gen_buses: Vec<usize>,
    /// Bus index → slot in `gen_buses`, or `usize::MAX`.
    gen_bus_slot: Vec<usize>,
    /// Generator indices per bus (aligned with bus index).
    gens_at: Vec<Vec<usize>>,
    /// Generators away from the slack bus; one active-power control each.
    free_gens: Vec<usize>,
    /// Generators at the slack bus; their active power is dependent.
    slack_gens: Vec<usize>,
    // Multiplier estimates for the inequality hinges, refreshed by the
    // engine between rounds. Equalities have none — they are eliminated.
    mu_thermal: Vec<f64>,
    mu_ang_hi: Vec<f64>,
    mu_ang_lo: Vec<f64>,
    mu_v_hi: Vec<f64>,
    mu_v_lo: Vec<f64>,
    mu_q_hi: Vec<f64>,
    mu_q_lo: Vec<f64>,
    mu_ps_hi: Vec<f64>,
    mu_ps_lo: Vec<f64>,
    // Cached network state, warm-starting each Newton solve from the last.
    state: PfState,
    lu: Option<DenseLu>,
    pf_ok: bool,
    // Scratch refreshed per evaluation.
    arc_p: Vec<f64>,
    arc_q: Vec<f64>,
    cos_d: Vec<f64>,
    sin_d: Vec<f64>,
    /// Dependent reactive output per generator.
    q_gen: Vec<f64>,
    /// Dependent active output per slack-bus generator (indexed like
    /// `slack_gens`).
    p_slack: Vec<f64>,
    p_inj: Vec<f64>,
    q_inj: Vec<f64>,
}

impl<'a> AcopfProblem<'a> {
    pub(crate) fn new(net: &'a Network, loads: &'a LoadVector, kind: ObjectiveKind) -> Self {
        let n = net.buses.len();
        let m = net.branches.len();
        assert_eq!(loads.len(), n, "load vector must match bus count");
        let slack = net.slack();
        let mut gens_at = vec![Vec::new(); n];
        for (g, gen) in net.generators.iter().enumerate() {
            gens_at[gen.bus].push(g);
        }
        assert!(!gens_at[slack].is_empty(), "slack bus must host a generator");
        let gen_buses: Vec<usize> = (0..n).filter(|&b| !gens_at[b].is_empty()).collect();
        let mut gen_bus_slot = vec![usize::MAX; n];
        for (s, &b) in gen_buses.iter().enumerate() {
            gen_bus_slot[b] = s;
        }
        let free_gens: Vec<usize> =
            (0..net.generators.len()).filter(|&g| net.generators[g].bus != slack).collect();
        let slack_gens: Vec<usize> = gens_at[slack].clone();
        let scale = match kind {
            ObjectiveKind::Cost => cost_scale(net),
            _ => 1.0,
        };
        let pf = PfModel::opf_split(net);
        let n_vfree = pf.v_free.len();
        let n_gens = net.generators.len();
        let n_slack = slack_gens.len();
        AcopfProblem {
            net,
            loads,
            kind,
            scale,
            slack,
            pf,
            outgoing: net.outgoing_arcs(),
            gen_buses,
            gen_bus_slot,
            gens_at,
            free_gens,
            slack_gens,
            mu_thermal: vec![0.0; 2 * m],
            mu_ang_hi: vec![0.0; m],
            mu_ang_lo: vec![0.0; m],
            mu_v_hi: vec![0.0; n_vfree],
            mu_v_lo: vec![0.0; n_vfree],
            mu_q_hi: vec![0.0; n_gens],
            mu_q_lo: vec![0.0; n_gens],
            mu_ps_hi: vec![0.0; n_slack],
            mu_ps_lo: vec![0.0; n_slack],
            state: PfState::flat(n),
            lu: None,
            pf_ok: false,
            arc_p: vec![0.0; 2 * m],
            arc_q: vec![0.0; 2 * m],
            cos_d: vec![0.0; m],
            sin_d: vec![0.0; m],
            q_gen: vec![0.0; n_gens],
            p_slack: vec![0.0; n_slack],
            p_inj: vec![0.0; n],
            q_inj: vec![0.0; n],
        }
    }

    pub(crate) fn network(&self) -> &'a Network {
        self.net
    }

    fn n_vctl(&self) -> usize {
        self.gen_buses.len()
    }

    fn p_col(&self, free_ix: usize) -> usize {
        self.n_vctl() + free_ix
    }

    /// Midpoint voltages and a capacity-share dispatch guess; the slack
    /// absorbs the remainder plus losses.
    pub(crate) fn flat_start(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for (s, &b) in self.gen_buses.iter().enumerate() {
            let bus = &self.net.buses[b];
            x[s] = 0.5 * (bus.v_min + bus.v_max);
        }
        let total_p = self.loads.total_p();
        let p_cap: f64 = self.net.generators.iter().map(|g| g.p_max).sum();
        for (fi, &g) in self.free_gens.iter().enumerate() {
            let gen = &self.net.generators[g];
            let p = if p_cap > 0.0 {
                total_p * gen.p_max / p_cap
            } else {
                0.5 * (gen.p_min + gen.p_max)
            };
            x[self.p_col(fi)] = p.clamp(gen.p_min, gen.p_max);
        }
        x
    }

    /// Pack an existing operating point as a warm start and seed the cached
    /// network state from it (slack angle re-referenced to zero).
    pub(crate) fn pack_point(&mut self, op: &OperatingPoint) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for (s, &b) in self.gen_buses.iter().enumerate() {
            x[s] = op.voltage[b].norm();
        }
        for (fi, &g) in self.free_gens.iter().enumerate() {
            x[self.p_col(fi)] = op.gen_injection[g].re;
        }
        let shift = op.voltage[self.slack].arg();
        for b in 0..self.net.buses.len() {
            self.state.v[b] = op.voltage[b].norm();
            self.state.th[b] = if b == self.slack { 0.0 } else { op.voltage[b].arg() - shift };
        }
        x
    }

    /// Rebuild the full operating point from the cached state at `x`, with
    /// flows recomputed from the complex voltages (so Ohm's law holds
    /// exactly on the output).
    pub(crate) fn unpack(&mut self, x: &[f64]) -> OperatingPoint {
        self.refresh(x);
        let n = self.net.buses.len();
        let voltage: Vec<Complex> =
            (0..n).map(|b| Complex64::from_polar(self.state.v[b], self.state.th[b])).collect();
        let mut gen_injection = vec![Complex::new(0.0, 0.0); self.net.generators.len()];
        for (fi, &g) in self.free_gens.iter().enumerate() {
            gen_injection[g] = Complex::new(x[self.p_col(fi)], self.q_gen[g]);
        }
        for (si, &g) in self.slack_gens.iter().enumerate() {
            gen_injection[g] = Complex::new(self.p_slack[si], self.q_gen[g]);
        }
        let flow = compute_flows(self.net, &voltage);
        OperatingPoint { voltage, gen_injection, flow }
    }

    /// Install the controls, run the warm-started Newton power flow, and on
    /// success refresh flows and dependent injections. Returns whether the
    /// power flow converged; on failure the previous cached state survives
    /// so later evaluations keep a usable warm start.
    fn refresh(&mut self, x: &[f64]) -> bool {
        let net = self.net;
        let n = net.buses.len();
        let m = net.branches.len();
        for b in 0..n {
            self.p_inj[b] = -self.loads.p[b];
            self.q_inj[b] = -self.loads.q[b];
        }
        for (fi, &g) in self.free_gens.iter().enumerate() {
            self.p_inj[net.generators[g].bus] += x[self.p_col(fi)];
        }
        let mut trial = self.state.clone();
        for (s, &b) in self.gen_buses.iter().enumerate() {
            trial.v[b] = x[s];
        }
        match self.pf.solve(&self.p_inj, &self.q_inj, &mut trial) {
            Ok(lu) => {
                self.state = trial;
                self.lu = Some(lu);
                self.pf_ok = true;
            }
            Err(_) => {
                self.lu = None;
                self.pf_ok = false;
                return false;
            }
        }
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            let (vi, vj) = (self.state.v[br.from], self.state.v[br.to]);
            let d = self.state.th[br.from] - self.state.th[br.to];
            let (s_d, c_d) = d.sin_cos();
            self.cos_d[k] = c_d;
            self.sin_d[k] = s_d;
            let vv = vi * vj;
            self.arc_p[k] = g * (vi * vi - vv * c_d) - b * vv * s_d;
            self.arc_q[k] = -g * vv * s_d - b * (vi * vi - vv * c_d);
            self.arc_p[m + k] = g * (vj * vj - vv * c_d) + b * vv * s_d;
            self.arc_q[m + k] = g * vv * s_d - b * (vj * vj - vv * c_d);
        }
        // Dependent injections: each generator bus absorbs its reactive
        // balance, split evenly among co-located units; the slack gens do
        // the same for active power.
        for &b in &self.gen_buses {
            let mut q_tot = self.loads.q[b];
            for &a in &self.outgoing[b] {
                q_tot += self.arc_q[a];
            }
            let share = q_tot / self.gens_at[b].len() as f64;
            for &g in &self.gens_at[b] {
                self.q_gen[g] = share;
            }
        }
        let mut p_tot = self.loads.p[self.slack];
        for &a in &self.outgoing[self.slack] {
            p_tot += self.arc_p[a];
        }
        let share = p_tot / self.slack_gens.len() as f64;
        for s in self.p_slack.iter_mut() {
            *s = share;
        }
        true
    }

    /// Hinge activations in fingerprint order. Used by tests to keep
    /// finite-difference stencils on one smooth piece of the merit.
    #[cfg(test)]
    pub(crate) fn hinge_activity(&mut self, x: &[f64], weight: f64) -> Vec<bool> {
        assert!(self.refresh(x), "power flow must converge for activity probe");
        let m = self.net.branches.len();
        let mut act = Vec::new();
        for a in 0..2 * m {
            let s_max = self.net.branches[a % m].s_max;
            let smag = (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
            act.push(self.mu_thermal[a] + 2.0 * weight * (smag - s_max) > 0.0);
        }
        for (k, br) in self.net.branches.iter().enumerate() {
            let d = self.state.th[br.from] - self.state.th[br.to];
            act.push(self.mu_ang_hi[k] + 2.0 * weight * (d - br.angle_max) > 0.0);
            act.push(self.mu_ang_lo[k] + 2.0 * weight * (br.angle_min - d) > 0.0);
        }
        for (s, &b) in self.pf.v_free.iter().enumerate() {
            let bus = &self.net.buses[b];
            let v = self.state.v[b];
            act.push(self.mu_v_hi[s] + 2.0 * weight * (v - bus.v_max) > 0.0);
            act.push(self.mu_v_lo[s] + 2.0 * weight * (bus.v_min - v) > 0.0);
        }
        for (g, gen) in self.net.generators.iter().enumerate() {
            act.push(self.mu_q_hi[g] + 2.0 * weight * (self.q_gen[g] - gen.q_max) > 0.0);
            act.push(self.mu_q_lo[g] + 2.0 * weight * (gen.q_min - self.q_gen[g]) > 0.0);
        }
        for (si, &g) in self.slack_gens.iter().enumerate() {
            let gen = &self.net.generators[g];
            act.push(self.mu_ps_hi[si] + 2.0 * weight * (self.p_slack[si] - gen.p_max) > 0.0);
            act.push(self.mu_ps_lo[si] + 2.0 * weight * (gen.p_min - self.p_slack[si]) > 0.0);
        }
        act
    }
}

impl PenaltyProblem for AcopfProblem<'_> {
    fn dim(&self) -> usize {
        self.n_vctl() + self.free_gens.len()
    }

    fn bounds(&self, lo: &mut [f64], hi: &mut [f64]) {
        for (s, &b) in self.gen_buses.iter().enumerate() {
            lo[s] = self.net.buses[b].v_min;
            hi[s] = self.net.buses[b].v_max;
        }
        for (fi, &g) in self.free_gens.iter().enumerate() {
            lo[self.p_col(fi)] = self.net.generators[g].p_min;
            hi[self.p_col(fi)] = self.net.generators[g].p_max;
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
        let m = net.branches.len();

        let mut objective = 0.0;
        match &self.kind {
            ObjectiveKind::Cost => {
                for (fi, &g) in self.free_gens.iter().enumerate() {
                    objective += net.generators[g].cost.eval(x[self.p_col(fi)]);
                }
                for (si, &g) in self.slack_gens.iter().enumerate() {
                    objective += net.generators[g].cost.eval(self.p_slack[si]);
                }
                objective /= self.scale;
            }
            ObjectiveKind::TrackDispatch { p, q } => {
                for (fi, &g) in self.free_gens.iter().enumerate() {
                    objective += (x[self.p_col(fi)] - p[g]).powi(2);
                }
                for (si, &g) in self.slack_gens.iter().enumerate() {
                    objective += (self.p_slack[si] - p[g]).powi(2);
                }
                for g in 0..net.generators.len() {
                    objective += (self.q_gen[g] - q[g]).powi(2);
                }
            }
        }

        // Hinge terms use the standard multiplier shift: the active force is
        // t = max(0, μ + 2w·h), contributing t²/(4w) to the merit. Each
        // active hinge is folded into a fingerprint so the engine can tell
        // when a step crosses an activation boundary.
        let mut merit = objective;
        let mut viol = 0.0f64;
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
            let smag = (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
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
            let bus = &net.buses[b];
            let v = self.state.v[b];
            let hi = hinge(v - bus.v_max, self.mu_v_hi[s]);
            let lo = hinge(bus.v_min - v, self.mu_v_lo[s]);
            t_v[s] = hi - lo;
        }
        let mut t_q = vec![0.0; net.generators.len()];
        for (g, gen) in net.generators.iter().enumerate() {
            let hi = hinge(self.q_gen[g] - gen.q_max, self.mu_q_hi[g]);
            let lo = hinge(gen.q_min - self.q_gen[g], self.mu_q_lo[g]);
            t_q[g] = hi - lo;
        }
        let mut t_ps = vec![0.0; self.slack_gens.len()];
        for (si, &g) in self.slack_gens.iter().enumerate() {
            let gen = &net.generators[g];
            let hi = hinge(self.p_slack[si] - gen.p_max, self.mu_ps_hi[si]);
            let lo = hinge(gen.p_min - self.p_slack[si], self.mu_ps_lo[si]);
            t_ps[si] = hi - lo;
        }

        let result = Eval { merit, objective, max_violation: viol, active_set };

        let Some(gbuf) = grad else { return result };
        gbuf.fill(0.0);

        // Direct objective terms on the active-power controls.
        match &self.kind {
            ObjectiveKind::Cost => {
                for (fi, &g) in self.free_gens.iter().enumerate() {
                    gbuf[self.p_col(fi)] +=
                        net.generators[g].cost.slope(x[self.p_col(fi)]) / self.scale;
                }
            }
            ObjectiveKind::TrackDispatch { p, .. } => {
                for (fi, &g) in self.free_gens.iter().enumerate() {
                    gbuf[self.p_col(fi)] += 2.0 * (x[self.p_col(fi)] - p[g]);
                }
            }
        }

        // Forces pulling on the dependent injections: reactive per generator
        // bus, active at the slack. Each dependent splits its bus total
        // evenly, so the per-generator forces average into one bus factor.
        let mut chain_q = vec![0.0; net.buses.len()];
        for &b in &self.gen_buses {
            let cnt = self.gens_at[b].len() as f64;
            let mut f = 0.0;
            for &g in &self.gens_at[b] {
                f += t_q[g];
                if let ObjectiveKind::TrackDispatch { q, .. } = &self.kind {
                    f += 2.0 * (self.q_gen[g] - q[g]);
                }
            }
            chain_q[b] = f / cnt;
        }
        let chain_p_slack = {
            let cnt = self.slack_gens.len() as f64;
            let mut f = 0.0;
            for (si, &g) in self.slack_gens.iter().enumerate() {
                f += t_ps[si];
                match &self.kind {
                    ObjectiveKind::Cost => {
                        f += net.generators[g].cost.slope(self.p_slack[si]) / self.scale;
                    }
                    ObjectiveKind::TrackDispatch { p, .. } => {
                        f += 2.0 * (self.p_slack[si] - p[g]);
                    }
                }
            }
            f / cnt
        };

        // ∂Φ/∂state and the explicit ∂Φ/∂(voltage controls), walking each
        // arc once. For the reverse arc the angle difference flips sign, so
        // sin flips while cos is unchanged.
        let mut gy = vec![0.0; self.pf.dim()];
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            for (arc, tail, head, sa) in [
                (k, br.from, br.to, self.sin_d[k]),
                (m + k, br.to, br.from, -self.sin_d[k]),
            ] {
                let ca = self.cos_d[k];
                let (p, q) = (self.arc_p[arc], self.arc_q[arc]);
                let mut wp = 0.0;
                let mut wq = 0.0;
                let t = t_thermal[arc];
                if t > 0.0 {
                    let smag = (p * p + q * q).sqrt();
                    if smag > 0.0 {
                        wp += t * p / smag;
                        wq += t * q / smag;
                    }
                }
                if tail == self.slack {
                    wp += chain_p_slack;
                }
                wq += chain_q[tail]; // zero at non-generator buses
                if wp == 0.0 && wq == 0.0 {
                    continue;
                }
                let [dp_dvt, dp_dvh, dp_dd, dq_dvt, dq_dvh, dq_dd] =
                    arc_partials(g, b, self.state.v[tail], self.state.v[head], ca, sa);
                for (bus, dv_p, dv_q) in [(tail, dp_dvt, dq_dvt), (head, dp_dvh, dq_dvh)] {
                    let contrib = wp * dv_p + wq * dv_q;
                    if self.gen_bus_slot[bus] != usize::MAX {
                        gbuf[self.gen_bus_slot[bus]] += contrib;
                    } else {
                        gy[self.pf.v_col(bus)] += contrib;
                    }
                }
                let gd = wp * dp_dd + wq * dq_dd;
                if tail != self.slack {
                    gy[self.pf.th_col(tail)] += gd;
                }
                if head != self.slack {
                    gy[self.pf.th_col(head)] -= gd;
                }
            }
        }
        for (k, br) in net.branches.iter().enumerate() {
            let gd = t_ang[k].0 - t_ang[k].1;
            if gd != 0.0 {
                if br.from != self.slack {
                    gy[self.pf.th_col(br.from)] += gd;
                }
                if br.to != self.slack {
                    gy[self.pf.th_col(br.to)] -= gd;
                }
            }
        }
        for (s, t) in t_v.iter().enumerate() {
            gy[self.pf.th_free.len() + s] += t;
        }

        // Adjoint: ψ solves Jᵀψ = −∂Φ/∂state with the power-flow Jacobian
        // already factorized at the solution.
        let lu = self.lu.as_ref().expect("refresh succeeded");
        for v in gy.iter_mut() {
            *v = -*v;
        }
        lu.solve_t(&mut gy);
        let psi = gy;

        // ψᵀ·∂F/∂u: active-power controls shift their bus's P equation by
        // +1; voltage controls enter every incident equation through the
        // flow partials (residual = injection − flows, hence the minus).
        for (fi, &g) in self.free_gens.iter().enumerate() {
            gbuf[self.p_col(fi)] += psi[self.pf.p_row(net.generators[g].bus)];
        }
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            for (tail, head, sa) in
                [(br.from, br.to, self.sin_d[k]), (br.to, br.from, -self.sin_d[k])]
            {
                let tail_ctl = self.gen_bus_slot[tail] != usize::MAX;
                let head_ctl = self.gen_bus_slot[head] != usize::MAX;
                if !tail_ctl && !head_ctl {
                    continue;
                }
                let ca = self.cos_d[k];
                let [dp_dvt, dp_dvh, _, dq_dvt, dq_dvh, _] =
                    arc_partials(g, b, self.state.v[tail], self.state.v[head], ca, sa);
                let p_row =
                    (self.pf.p_slots[tail] != usize::MAX).then(|| self.pf.p_row(tail));
                let q_row = (self.pf.v_slot[tail] != usize::MAX).then(|| self.pf.q_row(tail));
                for (row, dvt, dvh) in [(p_row, dp_dvt, dp_dvh), (q_row, dq_dvt, dq_dvh)] {
                    let Some(row) = row else { continue };
                    if tail_ctl {
                        gbuf[self.gen_bus_slot[tail]] -= psi[row] * dvt;
                    }
                    if head_ctl {
                        gbuf[self.gen_bus_slot[head]] -= psi[row] * dvh;
                    }
                }
            }
        }

        result
    }

    fn reset_multipliers(&mut self) {
        for mu in [
            &mut self.mu_thermal,
            &mut self.mu_ang_hi,
            &mut self.mu_ang_lo,
            &mut self.mu_v_hi,
            &mut self.mu_v_lo,
            &mut self.mu_q_hi,
            &mut self.mu_q_lo,
            &mut self.mu_ps_hi,
            &mut self.mu_ps_lo,
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
        for a in 0..2 * m {
            let s_max = net.branches[a % m].s_max;
            let smag = (self.arc_p[a] * self.arc_p[a] + self.arc_q[a] * self.arc_q[a]).sqrt();
            self.mu_thermal[a] = (self.mu_thermal[a] + 2.0 * weight * (smag - s_max)).max(0.0);
        }
        for (k, br) in net.branches.iter().enumerate() {
            let d = self.state.th[br.from] - self.state.th[br.to];
            self.mu_ang_hi[k] = (self.mu_ang_hi[k] + 2.0 * weight * (d - br.angle_max)).max(0.0);
            self.mu_ang_lo[k] = (self.mu_ang_lo[k] + 2.0 * weight * (br.angle_min - d)).max(0.0);
        }
        for (s, &b) in self.pf.v_free.iter().enumerate() {
            let bus = &net.buses[b];
            let v = self.state.v[b];
            self.mu_v_hi[s] = (self.mu_v_hi[s] + 2.0 * weight * (v - bus.v_max)).max(0.0);
            self.mu_v_lo[s] = (self.mu_v_lo[s] + 2.0 * weight * (bus.v_min - v)).max(0.0);
        }
        for (g, gen) in net.generators.iter().enumerate() {
            self.mu_q_hi[g] = (self.mu_q_hi[g] + 2.0 * weight * (self.q_gen[g] - gen.q_max)).max(0.0);
            self.mu_q_lo[g] = (self.mu_q_lo[g] + 2.0 * weight * (gen.q_min - self.q_gen[g])).max(0.0);
        }
        for (si, &g) in self.slack_gens.iter().enumerate() {
            let gen = &net.generators[g];
            self.mu_ps_hi[si] =
                (self.mu_ps_hi[si] + 2.0 * weight * (self.p_slack[si] - gen.p_max)).max(0.0);
            self.mu_ps_lo[si] =
                (self.mu_ps_lo[si] + 2.0 * weight * (gen.p_min - self.p_slack[si])).max(0.0);
        }
    }

    fn hessian_diag(&mut self, x: &[f64], weight: f64, diag: &mut [f64]) {
        diag.fill(1.0);
        match &self.kind {
            ObjectiveKind::Cost => {
                for (fi, &g) in self.free_gens.iter().enumerate() {
                    diag[self.p_col(fi)] += 2.0 * self.net.generators[g].cost.c2 / self.scale;
                }
            }
            ObjectiveKind::TrackDispatch { .. } => {
                for fi in 0..self.free_gens.len() {
                    diag[self.p_col(fi)] += 2.0;
                }
            }
        }
        if !self.refresh(x) {
            return;
        }
        // Gauss–Newton curvature of the active hinges whose sensitivities
        // carry admittance scales: thermal limits and the dependent
        // reactive / slack-power bounds all move with ∂flow/∂v ~ |y|, so an
        // active one adds ~2w·y² curvature that the Euclidean seed misses
        // by orders of magnitude.
        let net = self.net;
        let m = net.branches.len();
        // Count active hinges on the dependent injections per bus.
        let mut n_act_q = vec![0.0f64; net.buses.len()];
        for (g, gen) in net.generators.iter().enumerate() {
            let hi = self.mu_q_hi[g] + 2.0 * weight * (self.q_gen[g] - gen.q_max) > 0.0;
            let lo = self.mu_q_lo[g] + 2.0 * weight * (gen.q_min - self.q_gen[g]) > 0.0;
            if hi || lo {
                n_act_q[gen.bus] += 1.0;
            }
        }
        let mut n_act_ps = 0.0f64;
        for (si, &g) in self.slack_gens.iter().enumerate() {
            let gen = &net.generators[g];
            let hi = self.mu_ps_hi[si] + 2.0 * weight * (self.p_slack[si] - gen.p_max) > 0.0;
            let lo = self.mu_ps_lo[si] + 2.0 * weight * (gen.p_min - self.p_slack[si]) > 0.0;
            if hi || lo {
                n_act_ps += 1.0;
            }
        }
        let slack_cnt = self.slack_gens.len() as f64;
        if n_act_ps > 0.0 {
            // More injection anywhere backs the slack off roughly one for
            // one, so an active slack bound curves every dispatch control.
            for fi in 0..self.free_gens.len() {
                diag[self.p_col(fi)] += n_act_ps * 2.0 * weight / (slack_cnt * slack_cnt);
            }
        }
        let mut sum_dq_dvt = vec![0.0f64; net.buses.len()];
        let mut sum_dp_dvt_slack = 0.0f64;
        for (k, br) in net.branches.iter().enumerate() {
            let (g, b) = (br.admittance.re, br.admittance.im);
            for (arc, tail, head, sa) in [
                (k, br.from, br.to, self.sin_d[k]),
                (m + k, br.to, br.from, -self.sin_d[k]),
            ] {
                let [dp_dvt, dp_dvh, _, dq_dvt, dq_dvh, _] =
                    arc_partials(g, b, self.state.v[tail], self.state.v[head], self.cos_d[k], sa);
                let (p, q) = (self.arc_p[arc], self.arc_q[arc]);
                let smag = (p * p + q * q).sqrt();
                if smag > 0.0 && self.mu_thermal[arc] + 2.0 * weight * (smag - br.s_max) > 0.0 {
                    for (bus, dv_p, dv_q) in [(tail, dp_dvt, dq_dvt), (head, dp_dvh, dq_dvh)] {
                        if self.gen_bus_slot[bus] != usize::MAX {
                            let ds = (p * dv_p + q * dv_q) / smag;
                            diag[self.gen_bus_slot[bus]] += 2.0 * weight * ds * ds;
                        }
                    }
                }
                if n_act_q[tail] > 0.0 {
                    sum_dq_dvt[tail] += dq_dvt;
                    if self.gen_bus_slot[head] != usize::MAX {
                        let cnt = self.gens_at[tail].len() as f64;
                        let ds = dq_dvh / cnt;
                        diag[self.gen_bus_slot[head]] += n_act_q[tail] * 2.0 * weight * ds * ds;
                    }
                }
                if n_act_ps > 0.0 && tail == self.slack {
                    sum_dp_dvt_slack += dp_dvt;
                    if self.gen_bus_slot[head] != usize::MAX {
                        let ds = dp_dvh / slack_cnt;
                        diag[self.gen_bus_slot[head]] += n_act_ps * 2.0 * weight * ds * ds;
                    }
                }
            }
        }
        for &b in &self.gen_buses {
            if n_act_q[b] > 0.0 {
                let ds = sum_dq_dvt[b] / self.gens_at[b].len() as f64;
                diag[self.gen_bus_slot[b]] += n_act_q[b] * 2.0 * weight * ds * ds;
            }
        }
        if n_act_ps > 0.0 {
            let ds = sum_dp_dvt_slack / slack_cnt;
            diag[self.gen_bus_slot[self.slack]] += n_act_ps * 2.0 * weight * ds * ds;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::grid::power_balance_residual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perturbed_start(prob: &AcopfProblem, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = prob.flat_start();
        for v in x.iter_mut() {
            *v += rng.gen_range(-0.02..0.02);
        }
        x
    }

    /// An evaluated point must reproduce complex power-flow arithmetic: the
    /// cached per-arc flows match `compute_flows` on the unpacked voltages,
    /// and the dependent injections balance every bus — including the slack
    /// and the generator buses, whose balances are never part of the Newton
    /// system — to floating-point accuracy.
    #[test]
    fn reduced_eval_matches_complex_arithmetic() {
        for (net, loads) in [cases::case14(), cases::case30()] {
            let mut prob = AcopfProblem::new(&net, &loads, ObjectiveKind::Cost);
            let x = perturbed_start(&prob, 11);
            let e = prob.eval(&x, 10.0, None);
            assert!(e.merit < 1e20, "power flow should converge at the probe point");
            let op = prob.unpack(&x);
            for (a, f) in op.flow.iter().enumerate() {
                assert!(
                    (f.re - prob.arc_p[a]).abs() < 1e-10 && (f.im - prob.arc_q[a]).abs() < 1e-10,
                    "{}: arc {a} flow mismatch",
                    net.name
                );
            }
            let residual = power_balance_residual(&net, &op, &loads).expect("sizes match");
            for (b, r) in residual.iter().enumerate() {
                assert!(r.norm() < 1e-9, "{}: bus {b} imbalance {r}", net.name);
            }
        }
    }

    /// The adjoint gradient against central differences, across objectives,
    /// cases, penalty weights, and nonzero multipliers. Components whose
    /// stencil straddles a hinge activation are skipped — the merit is
    /// nonsmooth there by design.
    #[test]
    fn gradient_matches_finite_differences() {
        let (net14, loads14) = cases::case14();
        let (net30, loads30) = cases::case30();
        let (mut net2, loads2) = cases::case2();
        // Tighten the angle bound below the operating difference so the
        // angle hinge is exercised through the adjoint.
        net2.branches[0].angle_max = 0.04;
        net2.branches[0].angle_min = -0.04;
        let track = ObjectiveKind::TrackDispatch {
            p: vec![0.4, 0.3, 0.2, 0.1, 0.1],
            q: vec![0.1, 0.05, 0.0, 0.05, 0.1],
        };
        let problems: Vec<(&str, AcopfProblem)> = vec![
            ("case14-cost", AcopfProblem::new(&net14, &loads14, ObjectiveKind::Cost)),
            ("case14-track", AcopfProblem::new(&net14, &loads14, track)),
            ("case30-cost", AcopfProblem::new(&net30, &loads30, ObjectiveKind::Cost)),
            ("case2-angle", AcopfProblem::new(&net2, &loads2, ObjectiveKind::Cost)),
        ];
        for (label, mut prob) in problems {
            let x = perturbed_start(&prob, 23);
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
}
