//! Grid data model and raw AC power-flow arithmetic.
//!
//! Everything downstream — the OPF solver, load embedding, dataset
//! generation — operates on the immutable [`Network`] defined here. All
//! quantities are per-unit on the network's MVA base; unit conversion happens
//! once at the MATPOWER parse/serialize boundary and nowhere else.
//!
//! The branch model is deliberately simple: one series admittance per branch,
//! no transformer taps, no line charging, no bus shunts. Case files that use
//! those features are rejected at parse time rather than silently
//! approximated.

mod matpower;

pub use matpower::{parse_matpower, serialize_matpower, ParseError};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Complex per-unit quantity: voltage phasor, power `p + jq`, admittance `g + jb`.
pub type Complex = Complex64;

/// Raised when vector dimensions disagree with the network they describe.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("dimension mismatch: {0}")]
pub struct DimensionMismatch(pub String);

/// A single bus with its voltage-magnitude operating band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    /// External id from the case file (reporting only; code uses positions).
    pub id: usize,
    /// Lower voltage-magnitude bound, p.u.
    pub v_min: f64,
    /// Upper voltage-magnitude bound, p.u.
    pub v_max: f64,
    /// Reference bus whose voltage angle is pinned to zero.
    pub is_slack: bool,
}

/// Convex quadratic generation cost `c2·p² + c1·p + c0` ($/h, `p` in p.u.).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p: f64) -> f64 {
        (self.c2 * p + self.c1) * p + self.c0
    }

    /// Derivative of the cost with respect to active power.
    pub fn slope(&self, p: f64) -> f64 {
        2.0 * self.c2 * p + self.c1
    }
}

/// A dispatchable generator attached to a bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// Bus position (index into `Network::buses`, not the external id).
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub cost: CostCurve,
}

/// A transmission branch between two buses.
///
/// `admittance` is the series admittance `1/(r + jx)`; the raw `r` and `x`
/// are kept so a parsed network can be written back to a case file without
/// rounding drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    /// Tail bus position.
    pub from: usize,
    /// Head bus position.
    pub to: usize,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
    /// Series admittance `1/(r + jx)`, p.u.
    pub admittance: Complex,
    /// Apparent-power (thermal) limit applied to both flow directions, p.u.
    pub s_max: f64,
    /// Lower bound on the angle difference θ_from − θ_to, radians (≤ 0).
    pub angle_min: f64,
    /// Upper bound on the angle difference θ_from − θ_to, radians (≥ 0).
    pub angle_max: f64,
}

/// Immutable grid description: buses, generators, branches, power base.
///
/// Branch arcs are directed for flow purposes: with `m` branches, arc
/// `k < m` is branch `k` in its file direction (from → to) and arc `m + k`
/// is its reverse. Flow vectors are indexed in this arc order throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Case name from the file header, used in reports.
    pub name: String,
    /// Power base in MVA; all stored quantities are p.u. on this base.
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub generators: Vec<Generator>,
    pub branches: Vec<Branch>,
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Number of directed arcs (`2 ×` branch count).
    pub fn n_arcs(&self) -> usize {
        2 * self.branches.len()
    }

    /// Position of the slack bus.
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_slack)
            .expect("network invariant: exactly one slack bus")
    }

    /// Tail and head bus of a directed arc.
    pub fn arc_ends(&self, arc: usize) -> (usize, usize) {
        let m = self.branches.len();
        if arc < m {
            (self.branches[arc].from, self.branches[arc].to)
        } else {
            (self.branches[arc - m].to, self.branches[arc - m].from)
        }
    }

    /// Branch index underlying a directed arc.
    pub fn arc_branch(&self, arc: usize) -> usize {
        arc % self.branches.len()
    }

    /// Outgoing directed arcs per bus.
    pub fn outgoing_arcs(&self) -> Vec<Vec<usize>> {
        let m = self.branches.len();
        let mut out = vec![Vec::new(); self.buses.len()];
        for (k, br) in self.branches.iter().enumerate() {
            out[br.from].push(k);
            out[br.to].push(m + k);
        }
        out
    }

    /// Generator positions grouped by bus.
    pub fn generators_at(&self) -> Vec<Vec<usize>> {
        let mut at = vec![Vec::new(); self.buses.len()];
        for (g, gen) in self.generators.iter().enumerate() {
            at[gen.bus].push(g);
        }
        at
    }
}

/// Active/reactive load per bus, p.u. Buses without load carry exact zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl LoadVector {
    pub fn zeros(n: usize) -> Self {
        LoadVector {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Complex load `p_i + j·q_i` at one bus.
    pub fn s(&self, i: usize) -> Complex {
        Complex::new(self.p[i], self.q[i])
    }

    pub fn total_p(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn total_q(&self) -> f64 {
        self.q.iter().sum()
    }

    /// Entries with `|p_i| > tol`.
    pub fn count_nonzero_p(&self, tol: f64) -> usize {
        self.p.iter().filter(|v| v.abs() > tol).count()
    }

    /// Entries with `|q_i| > tol`.
    pub fn count_nonzero_q(&self, tol: f64) -> usize {
        self.q.iter().filter(|v| v.abs() > tol).count()
    }

    /// Every load multiplied by a common factor.
    pub fn scaled(&self, factor: f64) -> LoadVector {
        LoadVector {
            p: self.p.iter().map(|v| v * factor).collect(),
            q: self.q.iter().map(|v| v * factor).collect(),
        }
    }
}

/// One AC operating state of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Complex voltage per bus.
    pub voltage: Vec<Complex>,
    /// Complex injection per generator, in `Network::generators` order.
    pub gen_injection: Vec<Complex>,
    /// Complex flow per directed arc (length `2m`, arc order as in `Network`).
    pub flow: Vec<Complex>,
}

/// Power entering branch `(i, j)` at bus `i`: `S_ij = Y*·|V_i|² − Y*·V_i·V_j*`.
pub fn branch_flow(admittance: Complex, v_from: Complex, v_to: Complex) -> Complex {
    admittance.conj() * (Complex::new(v_from.norm_sqr(), 0.0) - v_from * v_to.conj())
}

/// Flows on every directed arc implied by a full voltage profile.
pub fn compute_flows(net: &Network, voltage: &[Complex]) -> Vec<Complex> {
    let m = net.branches.len();
    let mut flow = vec![Complex::new(0.0, 0.0); 2 * m];
    for (k, br) in net.branches.iter().enumerate() {
        flow[k] = branch_flow(br.admittance, voltage[br.from], voltage[br.to]);
        flow[m + k] = branch_flow(br.admittance, voltage[br.to], voltage[br.from]);
    }
    flow
}

/// Kirchhoff residual per bus: generation minus load minus outgoing flows.
///
/// All residuals are zero exactly when the point satisfies nodal power
/// balance with the stored flows.
pub fn power_balance_residual(
    net: &Network,
    op: &OperatingPoint,
    loads: &LoadVector,
) -> Result<Vec<Complex>, DimensionMismatch> {
    let n = net.buses.len();
    let m = net.branches.len();
    if op.voltage.len() != n {
        return Err(DimensionMismatch(format!(
            "{} voltages for {n} buses",
            op.voltage.len()
        )));
    }
    if loads.len() != n {
        return Err(DimensionMismatch(format!("{} loads for {n} buses", loads.len())));
    }
    if op.gen_injection.len() != net.generators.len() {
        return Err(DimensionMismatch(format!(
            "{} injections for {} generators",
            op.gen_injection.len(),
            net.generators.len()
        )));
    }
    if op.flow.len() != 2 * m {
        return Err(DimensionMismatch(format!(
            "{} flows for {} directed arcs",
            op.flow.len(),
            2 * m
        )));
    }

    let mut res: Vec<Complex> = (0..n).map(|i| -loads.s(i)).collect();
    for (gen, inj) in net.generators.iter().zip(&op.gen_injection) {
        res[gen.bus] += inj;
    }
    for (k, br) in net.branches.iter().enumerate() {
        res[br.from] -= op.flow[k];
        res[br.to] -= op.flow[m + k];
    }
    Ok(res)
}

/// Total generation cost of a dispatch; only active power is priced.
pub fn dispatch_cost(net: &Network, gen_injection: &[Complex]) -> f64 {
    assert_eq!(
        gen_injection.len(),
        net.generators.len(),
        "injection vector must match generator count"
    );
    net.generators
        .iter()
        .zip(gen_injection)
        .map(|(g, s)| g.cost.eval(s.re))
        .sum()
}

/// `100 × (original − reduced) / original`, the percentage shaved off a value.
pub fn reduction_percentage(original: f64, reduced: f64) -> f64 {
    assert!(original != 0.0, "reduction from zero is undefined");
    100.0 * (original - reduced) / original
}
