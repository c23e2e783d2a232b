//! Newton power-flow solves that eliminate Kirchhoff balance exactly.
//!
//! The optimizer never sees balance residuals: every merit evaluation fixes
//! the control variables (generator-bus voltages, non-slack active dispatch)
//! and solves the remaining network state — angles everywhere, voltages at
//! buses the controls do not pin — from the balance equations themselves.
//! Two variable splits cover both uses: the OPF split leaves voltage free at
//! generator-less buses and balances reactive power there, while the
//! dispatch split (for plain power-flow queries with every injection given)
//! frees all voltages and balances reactive power at every bus.
//!
//! Systems stay tiny at this scale (tens of unknowns), so factorization is a
//! dense LU with partial pivoting — deterministic, dependency-free, and fast
//! enough that the factorization also serves the adjoint solve that backs
//! gradient evaluation.

use crate::grid::Network;

use super::acopf::arc_partials;

/// Dense LU factorization with partial pivoting of a row-major square matrix.
pub(crate) struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

/// Why a power-flow solve failed to produce a usable state.
#[derive(Debug, Clone, PartialEq)]
pub enum PfError {
    /// The Jacobian lost rank — the state hit a voltage-collapse fold or a
    /// disconnected configuration.
    Singular,
    /// Newton iterations stopped improving before reaching tolerance.
    NotConverged { residual: f64 },
}

impl DenseLu {
    pub fn factor(n: usize, a: &[f64]) -> Result<Self, PfError> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let cand = lu[r * n + k].abs();
                if cand > best {
                    best = cand;
                    p = r;
                }
            }
            if best < 1e-13 {
                return Err(PfError::Singular);
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let piv = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / piv;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    lu[r * n + c] -= f * lu[k * n + c];
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    /// Solve `A·x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let permuted: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        b.copy_from_slice(&permuted);
        for r in 1..n {
            for c in 0..r {
                b[r] -= self.lu[r * n + c] * b[c];
            }
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                b[r] -= self.lu[r * n + c] * b[c];
            }
            b[r] /= self.lu[r * n + r];
        }
    }

    /// Solve `Aᵀ·x = b` in place, reusing the same factorization — this is
    /// what the adjoint gradient needs.
    pub fn solve_t(&self, b: &mut [f64]) {
        let n = self.n;
        // PA = LU ⇒ Aᵀ = Uᵀ·Lᵀ·P: forward through Uᵀ, back through Lᵀ,
        // then undo the row permutation.
        for r in 0..n {
            for c in 0..r {
                b[r] -= self.lu[c * n + r] * b[c];
            }
            b[r] /= self.lu[r * n + r];
        }
        for r in (0..n).rev() {
            for c in r + 1..n {
                b[r] -= self.lu[c * n + r] * b[c];
            }
        }
        let mut out = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            out[p] = b[i];
        }
        b.copy_from_slice(&out);
    }
}

/// Full-length network state: voltage magnitude and angle per bus. Entries
/// the split holds fixed are inputs; the rest are solved.
#[derive(Debug, Clone)]
pub struct PfState {
    pub v: Vec<f64>,
    pub th: Vec<f64>,
}

impl PfState {
    pub fn flat(n: usize) -> Self {
        Self { v: vec![1.0; n], th: vec![0.0; n] }
    }
}

/// One variable split: which balance equations are solved and which state
/// entries are unknown. Rows are [active balance at `p_rows`, reactive
/// balance at `v_free`]; columns are [angles at `th_free`, voltages at
/// `v_free`]. The system is kept square by construction
/// (`p_rows.len() == th_free.len()`), and the slack angle is always fixed
/// at zero.
pub struct PfModel<'a> {
    pub net: &'a Network,
    /// Buses whose active-balance equation is a row, in row order.
    pub p_rows: Vec<usize>,
    /// Buses whose voltage magnitude is an unknown; these same buses carry
    /// the reactive-balance rows.
    pub v_free: Vec<usize>,
    /// Buses whose angle is an unknown, in column order.
    pub th_free: Vec<usize>,
    /// Bus index → slot in `p_rows`, or `usize::MAX`.
    pub p_slots: Vec<usize>,
    /// Bus index → slot in `th_free`, or `usize::MAX`.
    pub th_slots: Vec<usize>,
    /// Bus index → slot in `v_free`, or `usize::MAX`.
    pub v_slot: Vec<usize>,
}

/// Newton iteration cap; desk-scale cases converge in well under ten steps
/// from a warm state, so hitting this means the state is genuinely bad.
const MAX_NEWTON: usize = 40;
/// Convergence target for the worst balance residual, in per-unit power.
pub const PF_TOL: f64 = 1e-11;

impl<'a> PfModel<'a> {
    /// Split for OPF control evaluation: voltages pinned at generator buses,
    /// free elsewhere; reactive balance at generator-less buses only; active
    /// balance and free angles at every non-slack bus.
    pub fn opf_split(net: &'a Network) -> Self {
        let n = net.buses.len();
        let slack = net.slack();
        let mut has_gen = vec![false; n];
        for gen in &net.generators {
            has_gen[gen.bus] = true;
        }
        let non_slack: Vec<usize> = (0..n).filter(|&b| b != slack).collect();
        let v_free = (0..n).filter(|&b| !has_gen[b]).collect();
        Self::build(net, non_slack.clone(), non_slack, v_free)
    }

    /// Split for plain power flow with every injection given: voltages free
    /// at every non-slack bus, reactive balance there too. The slack
    /// voltage stays pinned as the reference — without it a lossless
    /// network's Jacobian is singular at flat start — and the slack
    /// generator absorbs both active and reactive mismatch.
    pub fn dispatch_split(net: &'a Network) -> Self {
        let slack = net.slack();
        let non_slack: Vec<usize> = (0..net.buses.len()).filter(|&b| b != slack).collect();
        Self::build(net, non_slack.clone(), non_slack.clone(), non_slack)
    }

    /// Split for load-embedding evaluation: state at the load buses is held
    /// by the caller, so both balances are solved — and both state entries
    /// freed — only at the remaining buses. The slack contributes its
    /// reactive balance (its voltage is unknown, its angle the reference);
    /// its active balance, if the slack is not a load bus, is left to the
    /// caller as an explicit constraint.
    pub fn embed_split(net: &'a Network, is_load_bus: &[bool]) -> Self {
        let slack = net.slack();
        let inner: Vec<usize> = (0..net.buses.len())
            .filter(|&b| !is_load_bus[b] && b != slack)
            .collect();
        let mut v_free = inner.clone();
        if !is_load_bus[slack] {
            v_free.push(slack);
            v_free.sort_unstable();
        }
        Self::build(net, inner.clone(), inner, v_free)
    }

    /// Split for state recovery under fully prescribed injections: active
    /// balance at every non-slack bus, reactive balance — and a free
    /// voltage — everywhere including the slack. Only the slack active
    /// balance is left out, so the split stays square even for load vectors
    /// that are not exactly consistent with the dispatch. Seed it away from
    /// flat start: with every voltage free, a lossless network's reactive
    /// block is singular at equal voltages and zero angles.
    pub fn full_split(net: &'a Network) -> Self {
        let slack = net.slack();
        let non_slack: Vec<usize> = (0..net.buses.len()).filter(|&b| b != slack).collect();
        let all: Vec<usize> = (0..net.buses.len()).collect();
        Self::build(net, non_slack.clone(), non_slack, all)
    }

    fn build(
        net: &'a Network,
        p_rows: Vec<usize>,
        th_free: Vec<usize>,
        v_free: Vec<usize>,
    ) -> Self {
        assert_eq!(p_rows.len(), th_free.len(), "split must stay square");
        let n = net.buses.len();
        let mut p_slots = vec![usize::MAX; n];
        for (s, &b) in p_rows.iter().enumerate() {
            p_slots[b] = s;
        }
        let mut th_slots = vec![usize::MAX; n];
        for (s, &b) in th_free.iter().enumerate() {
            th_slots[b] = s;
        }
        let mut v_slot = vec![usize::MAX; n];
        for (s, &b) in v_free.iter().enumerate() {
            v_slot[b] = s;
        }
        Self { net, p_rows, v_free, th_free, p_slots, th_slots, v_slot }
    }

    /// Number of state unknowns (= equations).
    pub fn dim(&self) -> usize {
        self.th_free.len() + self.v_free.len()
    }

    /// Column of the angle unknown at `bus` (must be in `th_free`).
    pub fn th_col(&self, bus: usize) -> usize {
        self.th_slots[bus]
    }

    /// Column of the voltage unknown at `bus` (must be in `v_free`).
    pub fn v_col(&self, bus: usize) -> usize {
        self.th_free.len() + self.v_slot[bus]
    }

    /// Row of the active-balance equation at `bus` (must be in `p_rows`).
    pub fn p_row(&self, bus: usize) -> usize {
        self.p_slots[bus]
    }

    /// Row of the reactive-balance equation at `bus` (must be in `v_free`).
    pub fn q_row(&self, bus: usize) -> usize {
        self.p_rows.len() + self.v_slot[bus]
    }

    /// Residuals at the current state: `r_p[i] = p_inj[i] − Σ outgoing p`,
    /// `r_q[i] = q_inj[i] − Σ outgoing q`, for every bus.
    fn residuals(&self, state: &PfState, p_inj: &[f64], q_inj: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rp = p_inj.to_vec();
        let mut rq = q_inj.to_vec();
        for br in &self.net.branches {
            let (g, b) = (br.admittance.re, br.admittance.im);
            let d = state.th[br.from] - state.th[br.to];
            let (sa, ca) = d.sin_cos();
            for (tail, head, sa) in [(br.from, br.to, sa), (br.to, br.from, -sa)] {
                let (vt, vh) = (state.v[tail], state.v[head]);
                let p = g * (vt * vt - vt * vh * ca) - b * vt * vh * sa;
                let q = -g * vt * vh * sa - b * (vt * vt - vt * vh * ca);
                rp[tail] -= p;
                rq[tail] -= q;
            }
        }
        (rp, rq)
    }

    /// Worst equation residual under this split.
    fn equation_norm(&self, rp: &[f64], rq: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for &b in &self.p_rows {
            worst = worst.max(rp[b].abs());
        }
        for &b in &self.v_free {
            worst = worst.max(rq[b].abs());
        }
        worst
    }

    /// Assemble the Jacobian of the equation vector with respect to the
    /// state unknowns, row-major, rows ordered [P at `p_rows`, Q at
    /// `v_free`], columns [angles at `th_free`, voltages at `v_free`].
    /// Sign convention: residual = injection − flows, so flow partials
    /// enter negated.
    fn jacobian(&self, state: &PfState) -> Vec<f64> {
        let net = self.net;
        let dim = self.dim();
        let mut jac = vec![0.0; dim * dim];
        let mut add = |row: usize, col: usize, val: f64| {
            jac[row * dim + col] -= val;
        };
        for br in &net.branches {
            let (g, b) = (br.admittance.re, br.admittance.im);
            let d = state.th[br.from] - state.th[br.to];
            let (sa, ca) = d.sin_cos();
            for (tail, head, sa) in [(br.from, br.to, sa), (br.to, br.from, -sa)] {
                let [dp_dvt, dp_dvh, dp_dd, dq_dvt, dq_dvh, dq_dd] =
                    arc_partials(g, b, state.v[tail], state.v[head], ca, sa);
                let p_row =
                    (self.p_slots[tail] != usize::MAX).then(|| self.p_row(tail));
                let q_row = (self.v_slot[tail] != usize::MAX).then(|| self.q_row(tail));
                for (row, dvt, dvh, dd) in [
                    (p_row, dp_dvt, dp_dvh, dp_dd),
                    (q_row, dq_dvt, dq_dvh, dq_dd),
                ] {
                    let Some(row) = row else { continue };
                    if self.th_slots[tail] != usize::MAX {
                        add(row, self.th_col(tail), dd);
                    }
                    if self.th_slots[head] != usize::MAX {
                        add(row, self.th_col(head), -dd);
                    }
                    if self.v_slot[tail] != usize::MAX {
                        add(row, self.v_col(tail), dvt);
                    }
                    if self.v_slot[head] != usize::MAX {
                        add(row, self.v_col(head), dvh);
                    }
                }
            }
        }
        jac
    }

    /// Damped Newton from the state in `state` (fixed voltage entries must
    /// already hold their control values). Iterates until the residual stops
    /// improving — past [`PF_TOL`] and down to the floating-point floor —
    /// because the optimizer differentiates merits of neighboring solves and
    /// any slack left in the residual shows up there as noise. On success
    /// the returned factorization is the Jacobian at the solution, ready for
    /// adjoint solves.
    pub fn solve(
        &self,
        p_inj: &[f64],
        q_inj: &[f64],
        state: &mut PfState,
    ) -> Result<DenseLu, PfError> {
        let dim = self.dim();
        let nth = self.th_free.len();
        let (mut rp, mut rq) = self.residuals(state, p_inj, q_inj);
        let mut norm = self.equation_norm(&rp, &rq);
        for _ in 0..MAX_NEWTON {
            if norm == 0.0 {
                break;
            }
            let lu = DenseLu::factor(dim, &self.jacobian(state))?;
            // Newton step d solves J·d = −F.
            let mut step = vec![0.0; dim];
            for (slot, &b) in self.p_rows.iter().enumerate() {
                step[slot] = -rp[b];
            }
            for (s, &b) in self.v_free.iter().enumerate() {
                step[self.p_rows.len() + s] = -rq[b];
            }
            lu.solve(&mut step);

            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial = state.clone();
                for (slot, &b) in self.th_free.iter().enumerate() {
                    trial.th[b] += alpha * step[slot];
                }
                for (s, &b) in self.v_free.iter().enumerate() {
                    // Keep magnitudes positive; the flow model is written
                    // for v > 0 and a sign flip is never the right branch.
                    trial.v[b] = (trial.v[b] + alpha * step[nth + s]).max(1e-3);
                }
                let (trp, trq) = self.residuals(&trial, p_inj, q_inj);
                let tnorm = self.equation_norm(&trp, &trq);
                if tnorm < norm {
                    *state = trial;
                    rp = trp;
                    rq = trq;
                    norm = tnorm;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // No step improves: either the float floor (fine if already
                // under tolerance) or a genuinely stuck iteration.
                break;
            }
        }
        if norm <= PF_TOL {
            return DenseLu::factor(dim, &self.jacobian(state));
        }
        Err(PfError::NotConverged { residual: norm })
    }
}
