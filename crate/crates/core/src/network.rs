//! Electrical network connecting inverter voltage nodes through series RL
//! branches to resistive load nodes.
//!
//! Two models share one [`Topology`]:
//! * quasi-static: phasor admittances at a fixed frequency, load nodes
//!   eliminated by Kron reduction ([`QuasiStaticNetwork`]);
//! * dynamic: one inductor current per branch, load-node voltages resolved
//!   algebraically from KCL ([`DynamicNetwork`]).
//!
//! Inverter nodes are ideal controlled voltage sources. The filter capacitor
//! sits at the inverter node behind the current measurement, so its current
//! is part of the inverter output current.

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::{AlphaBetaVec, Mat2};
use crate::error::{Error, Result};

/// Endpoint of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeRef {
    Inverter(usize),
    Load(usize),
    /// Common return.
    Ground,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverterNode {
    pub id: String,
    /// Filter capacitance at the node (F).
    pub shunt_c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadNode {
    pub id: String,
    /// Load conductance to the common return (℧).
    pub conductance: f64,
}

/// Series RL element.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from: NodeRef,
    pub to: NodeRef,
    pub r: f64,
    pub l: f64,
    pub connected: bool,
}

impl Branch {
    pub fn impedance(&self, omega: f64) -> Complex64 {
        Complex64::new(self.r, omega * self.l)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Topology {
    pub inverters: Vec<InverterNode>,
    pub loads: Vec<LoadNode>,
    pub branches: Vec<Branch>,
}

impl Topology {
    /// Structural checks; reports every problem found.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut ids = std::collections::HashSet::new();
        for id in self
            .inverters
            .iter()
            .map(|n| &n.id)
            .chain(self.loads.iter().map(|n| &n.id))
        {
            if !ids.insert(id.as_str()) {
                problems.push(format!("duplicate node id '{id}'"));
            }
        }
        for inv in &self.inverters {
            if !(inv.shunt_c >= 0.0 && inv.shunt_c.is_finite()) {
                problems.push(format!("inverter '{}': shunt capacitance must be >= 0", inv.id));
            }
        }
        for load in &self.loads {
            if !(load.conductance >= 0.0 && load.conductance.is_finite()) {
                problems.push(format!("load '{}': conductance must be >= 0", load.id));
            }
        }
        let mut branch_ids = std::collections::HashSet::new();
        for br in &self.branches {
            if !branch_ids.insert(br.id.as_str()) {
                problems.push(format!("duplicate branch id '{}'", br.id));
            }
            if !(br.r >= 0.0 && br.r.is_finite()) || !(br.l >= 0.0 && br.l.is_finite()) {
                problems.push(format!("branch '{}': R and L must be finite and >= 0", br.id));
            } else if br.r == 0.0 && br.l == 0.0 {
                problems.push(format!("branch '{}': R and L cannot both be zero", br.id));
            }
            if br.from == br.to {
                problems.push(format!("branch '{}': both ends on the same node", br.id));
            }
            for end in [br.from, br.to] {
                let ok = match end {
                    NodeRef::Inverter(i) => i < self.inverters.len(),
                    NodeRef::Load(i) => i < self.loads.len(),
                    NodeRef::Ground => true,
                };
                if !ok {
                    problems.push(format!("branch '{}': unknown node {end:?}", br.id));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(problems.join("; ")))
        }
    }

    pub fn node_count(&self) -> usize {
        self.inverters.len() + self.loads.len()
    }

    /// Matrix row of a node; `None` for the common return.
    fn index(&self, node: NodeRef) -> Option<usize> {
        match node {
            NodeRef::Inverter(i) => Some(i),
            NodeRef::Load(i) => Some(self.inverters.len() + i),
            NodeRef::Ground => None,
        }
    }

    pub fn node_name(&self, node: NodeRef) -> &str {
        match node {
            NodeRef::Inverter(i) => &self.inverters[i].id,
            NodeRef::Load(i) => &self.loads[i].id,
            NodeRef::Ground => "ground",
        }
    }

    /// Loads with positive conductance that no inverter can reach through
    /// connected branches.
    pub fn islanded_loads(&self) -> Vec<usize> {
        let n = self.node_count();
        let mut reached = vec![false; n];
        let mut stack: Vec<usize> = (0..self.inverters.len()).collect();
        for &i in &stack {
            reached[i] = true;
        }
        while let Some(node) = stack.pop() {
            for br in self.branches.iter().filter(|b| b.connected) {
                let (f, t) = (self.index(br.from), self.index(br.to));
                for (a, b) in [(f, t), (t, f)] {
                    if a == Some(node) {
                        if let Some(b) = b {
                            if !reached[b] {
                                reached[b] = true;
                                stack.push(b);
                            }
                        }
                    }
                }
            }
        }
        (0..self.loads.len())
            .filter(|&k| self.loads[k].conductance > 0.0 && !reached[self.inverters.len() + k])
            .collect()
    }
}

/// Complex number `g + jb` as the 2×2 block acting on αβ vectors.
pub fn complex_to_block(y: Complex64) -> Mat2 {
    Mat2::conformal(y.re, y.im)
}

pub fn to_complex(v: AlphaBetaVec) -> Complex64 {
    Complex64::new(v.a, v.b)
}

pub fn from_complex(z: Complex64) -> AlphaBetaVec {
    AlphaBetaVec::new(z.re, z.im)
}

/// Node admittance matrix, inverter nodes first, then load nodes.
#[derive(Debug, Clone)]
pub struct Admittance {
    pub n_inverters: usize,
    pub matrix: DMatrix<Complex64>,
}

impl Admittance {
    pub fn block(&self, row: usize, col: usize) -> Mat2 {
        complex_to_block(self.matrix[(row, col)])
    }

    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Assembles the phasor admittance matrix at angular frequency `omega`.
pub fn build_admittance(topo: &Topology, omega: f64) -> Result<Admittance> {
    topo.validate()?;
    let n = topo.node_count();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in topo.branches.iter().filter(|b| b.connected) {
        let z = br.impedance(omega);
        if z.norm() == 0.0 {
            return Err(Error::Topology(format!("branch '{}' has zero impedance", br.id)));
        }
        let yb = z.inv();
        let (f, t) = (topo.index(br.from), topo.index(br.to));
        if let Some(f) = f {
            y[(f, f)] += yb;
        }
        if let Some(t) = t {
            y[(t, t)] += yb;
        }
        if let (Some(f), Some(t)) = (f, t) {
            y[(f, t)] -= yb;
            y[(t, f)] -= yb;
        }
    }
    for (i, inv) in topo.inverters.iter().enumerate() {
        y[(i, i)] += Complex64::new(0.0, omega * inv.shunt_c);
    }
    for (k, load) in topo.loads.iter().enumerate() {
        let i = topo.inverters.len() + k;
        y[(i, i)] += Complex64::new(load.conductance, 0.0);
    }
    Ok(Admittance {
        n_inverters: topo.inverters.len(),
        matrix: y,
    })
}

/// Phasor network reduced to the inverter terminals.
#[derive(Debug, Clone)]
pub struct QuasiStaticNetwork {
    pub omega: f64,
    /// Kron-reduced admittance seen by the inverters.
    pub reduced: DMatrix<Complex64>,
    /// Maps inverter voltages to load-node voltages (`V_l = M V_s`).
    load_map: DMatrix<Complex64>,
    /// Load-node indices kept in the reduction (isolated, unloaded nodes dropped).
    kept_loads: Vec<usize>,
    n_loads: usize,
    topology: Topology,
}

/// Full quasi-static solution.
#[derive(Debug, Clone)]
pub struct QuasiStaticSolution {
    pub inverter_currents: Vec<AlphaBetaVec>,
    pub load_voltages: Vec<AlphaBetaVec>,
    /// Current in each branch from `from` to `to`; zero when open.
    pub branch_currents: Vec<AlphaBetaVec>,
}

impl QuasiStaticNetwork {
    pub fn new(topo: &Topology, omega: f64) -> Result<Self> {
        let adm = build_admittance(topo, omega)?;
        let ns = topo.inverters.len();
        let kept_loads: Vec<usize> = (0..topo.loads.len())
            .filter(|&k| {
                let row = ns + k;
                (0..adm.size()).any(|c| adm.matrix[(row, c)] != Complex64::new(0.0, 0.0))
            })
            .collect();
        let nl = kept_loads.len();
        let y = &adm.matrix;
        let y_ss = y.view((0, 0), (ns, ns)).into_owned();
        let (reduced, load_map) = if nl == 0 {
            (y_ss, DMatrix::zeros(0, ns))
        } else {
            let mut y_ll = DMatrix::<Complex64>::zeros(nl, nl);
            let mut y_ls = DMatrix::<Complex64>::zeros(nl, ns);
            let mut y_sl = DMatrix::<Complex64>::zeros(ns, nl);
            for (a, &ka) in kept_loads.iter().enumerate() {
                for (b, &kb) in kept_loads.iter().enumerate() {
                    y_ll[(a, b)] = y[(ns + ka, ns + kb)];
                }
                for s in 0..ns {
                    y_ls[(a, s)] = y[(ns + ka, s)];
                    y_sl[(s, a)] = y[(s, ns + ka)];
                }
            }
            let lu = y_ll.lu();
            let solved = lu.solve(&y_ls).ok_or_else(|| {
                Error::Topology(
                    "singular network: load nodes without a path to a source or the return"
                        .into(),
                )
            })?;
            if solved.iter().any(|z| !z.is_finite()) {
                return Err(Error::Topology("singular network reduction".into()));
            }
            let load_map = -solved;
            let reduced = y_ss + &y_sl * &load_map;
            (reduced, load_map)
        };
        Ok(Self {
            omega,
            reduced,
            load_map,
            kept_loads,
            n_loads: topo.loads.len(),
            topology: topo.clone(),
        })
    }

    pub fn n_inverters(&self) -> usize {
        self.reduced.nrows()
    }

    /// Output current of every inverter for the given terminal voltages.
    pub fn currents(&self, voltages: &[AlphaBetaVec]) -> Vec<AlphaBetaVec> {
        let n = self.n_inverters();
        let mut out = Vec::with_capacity(n);
        self.currents_into(voltages, &mut out);
        out
    }

    pub fn currents_into(&self, voltages: &[AlphaBetaVec], out: &mut Vec<AlphaBetaVec>) {
        let n = self.n_inverters();
        out.clear();
        for i in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, v) in voltages.iter().enumerate().take(n) {
                acc += self.reduced[(i, j)] * to_complex(*v);
            }
            out.push(from_complex(acc));
        }
    }

    pub fn solve(&self, voltages: &[AlphaBetaVec]) -> QuasiStaticSolution {
        let vs: Vec<Complex64> = voltages.iter().map(|v| to_complex(*v)).collect();
        let mut load_v = vec![Complex64::new(0.0, 0.0); self.n_loads];
        for (a, &k) in self.kept_loads.iter().enumerate() {
            load_v[k] = (0..vs.len()).map(|s| self.load_map[(a, s)] * vs[s]).sum();
        }
        let node_v = |node: NodeRef| match node {
            NodeRef::Inverter(i) => vs[i],
            NodeRef::Load(k) => load_v[k],
            NodeRef::Ground => Complex64::new(0.0, 0.0),
        };
        let branch_currents = self
            .topology
            .branches
            .iter()
            .map(|br| {
                if br.connected {
                    from_complex((node_v(br.from) - node_v(br.to)) / br.impedance(self.omega))
                } else {
                    AlphaBetaVec::ZERO
                }
            })
            .collect();
        QuasiStaticSolution {
            inverter_currents: self.currents(voltages),
            load_voltages: load_v.into_iter().map(from_complex).collect(),
            branch_currents,
        }
    }
}

/// Output currents of all inverters for a quasi-static network at `omega`.
pub fn solve_currents_quasistatic(
    topo: &Topology,
    omega: f64,
    inverter_voltages: &[AlphaBetaVec],
) -> Result<Vec<AlphaBetaVec>> {
    if inverter_voltages.len() != topo.inverters.len() {
        return Err(Error::Topology(format!(
            "expected {} inverter voltages, got {}",
            topo.inverters.len(),
            inverter_voltages.len()
        )));
    }
    Ok(QuasiStaticNetwork::new(topo, omega)?.currents(inverter_voltages))
}

/// Inductor currents of the dynamic model, one per branch (zero when open).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkState {
    pub branch_currents: Vec<AlphaBetaVec>,
}

impl NetworkState {
    pub fn zeros(topo: &Topology) -> Self {
        Self {
            branch_currents: vec![AlphaBetaVec::ZERO; topo.branches.len()],
        }
    }

    /// Magnetic energy `Σ ½ L ‖i‖²`.
    pub fn stored_energy(&self, topo: &Topology) -> f64 {
        topo.branches
            .iter()
            .zip(&self.branch_currents)
            .map(|(b, i)| 0.5 * b.l * i.norm_sq())
            .sum()
    }
}

/// Electromagnetic-transient model of the RL branches.
#[derive(Debug, Clone)]
pub struct DynamicNetwork {
    topology: Topology,
    /// Per load node: (branch index, +1 if the branch flows into the node).
    load_incidence: Vec<Vec<(usize, f64)>>,
    /// Per inverter node: (branch index, +1 if the branch leaves the node).
    inverter_incidence: Vec<Vec<(usize, f64)>>,
}

impl DynamicNetwork {
    pub fn new(topo: &Topology) -> Result<Self> {
        topo.validate()?;
        let mut problems = Vec::new();
        let mut load_incidence = vec![Vec::new(); topo.loads.len()];
        let mut inverter_incidence = vec![Vec::new(); topo.inverters.len()];
        for (b, br) in topo.branches.iter().enumerate() {
            if !br.connected {
                continue;
            }
            if br.l <= 0.0 {
                problems.push(format!(
                    "branch '{}' has no inductance; use the quasi-static network model",
                    br.id
                ));
            }
            for (end, sign_out) in [(br.from, 1.0), (br.to, -1.0)] {
                match end {
                    NodeRef::Inverter(i) => inverter_incidence[i].push((b, sign_out)),
                    NodeRef::Load(k) => load_incidence[k].push((b, -sign_out)),
                    NodeRef::Ground => {}
                }
            }
        }
        for (k, inc) in load_incidence.iter().enumerate() {
            if !inc.is_empty() && topo.loads[k].conductance <= 0.0 {
                problems.push(format!(
                    "load node '{}' has zero conductance; its voltage is structurally undetermined in the dynamic model",
                    topo.loads[k].id
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Topology(problems.join("; ")));
        }
        Ok(Self {
            topology: topo.clone(),
            load_incidence,
            inverter_incidence,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Load-node voltages from KCL: `G v = Σ incoming currents`.
    pub fn load_voltages(&self, currents: &[AlphaBetaVec]) -> Vec<AlphaBetaVec> {
        self.load_incidence
            .iter()
            .zip(&self.topology.loads)
            .map(|(inc, load)| {
                if inc.is_empty() {
                    return AlphaBetaVec::ZERO;
                }
                let mut acc = AlphaBetaVec::ZERO;
                for &(b, sign) in inc {
                    acc += sign * currents[b];
                }
                (1.0 / load.conductance) * acc
            })
            .collect()
    }

    /// Net branch current leaving each inverter node (capacitor excluded).
    pub fn inverter_branch_currents(&self, currents: &[AlphaBetaVec]) -> Vec<AlphaBetaVec> {
        self.inverter_incidence
            .iter()
            .map(|inc| {
                let mut acc = AlphaBetaVec::ZERO;
                for &(b, sign) in inc {
                    acc += sign * currents[b];
                }
                acc
            })
            .collect()
    }

    /// `L di/dt = v_from − v_to − R i` for every connected branch.
    pub fn rhs_into(
        &self,
        currents: &[AlphaBetaVec],
        inverter_voltages: &[AlphaBetaVec],
        out: &mut [AlphaBetaVec],
    ) {
        let load_v = self.load_voltages(currents);
        let node_v = |node: NodeRef| match node {
            NodeRef::Inverter(i) => inverter_voltages[i],
            NodeRef::Load(k) => load_v[k],
            NodeRef::Ground => AlphaBetaVec::ZERO,
        };
        for ((br, i), d) in self.topology.branches.iter().zip(currents).zip(out.iter_mut()) {
            *d = if br.connected {
                (1.0 / br.l) * (node_v(br.from) - node_v(br.to) - br.r * *i)
            } else {
                AlphaBetaVec::ZERO
            };
        }
    }
}

/// Branch-current derivatives of the dynamic model.
pub fn dynamic_rhs(
    topo: &Topology,
    state: &NetworkState,
    inverter_voltages: &[AlphaBetaVec],
) -> Result<Vec<AlphaBetaVec>> {
    if state.branch_currents.len() != topo.branches.len() {
        return Err(Error::Topology("network state does not match topology".into()));
    }
    if inverter_voltages.len() != topo.inverters.len() {
        return Err(Error::Topology("inverter voltage count does not match topology".into()));
    }
    let net = DynamicNetwork::new(topo)?;
    let mut out = vec![AlphaBetaVec::ZERO; topo.branches.len()];
    net.rhs_into(&state.branch_currents, inverter_voltages, &mut out);
    Ok(out)
}

/// Timed action applied between integration steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    ConnectBranch {
        branch: usize,
    },
    DisconnectBranch {
        branch: usize,
    },
    LoadStep {
        load: usize,
        conductance: f64,
    },
    /// Controller-side update; leaves the topology untouched.
    SetPoint {
        inverter: usize,
        p_star: Option<f64>,
        q_star: Option<f64>,
        v_star: Option<f64>,
    },
}

impl Event {
    pub fn describe(&self, topo: &Topology) -> String {
        match self {
            Event::ConnectBranch { branch } => format!("connect {}", topo.branches[*branch].id),
            Event::DisconnectBranch { branch } => {
                format!("disconnect {}", topo.branches[*branch].id)
            }
            Event::LoadStep { load, conductance } => {
                format!("load {} -> {} S", topo.loads[*load].id, conductance)
            }
            Event::SetPoint {
                inverter,
                p_star,
                q_star,
                v_star,
            } => {
                let mut parts = Vec::new();
                if let Some(p) = p_star {
                    parts.push(format!("p*={p}"));
                }
                if let Some(q) = q_star {
                    parts.push(format!("q*={q}"));
                }
                if let Some(v) = v_star {
                    parts.push(format!("v*={v}"));
                }
                format!("set-point {} {}", topo.inverters[*inverter].id, parts.join(" "))
            }
        }
    }
}

/// Topology after an event, with loads newly cut off from every source.
#[derive(Debug, Clone)]
pub struct EventOutcome {
    pub topology: Topology,
    pub islanded_loads: Vec<usize>,
}

pub fn apply_event(topo: &Topology, event: &Event) -> Result<EventOutcome> {
    let mut next = topo.clone();
    match *event {
        Event::ConnectBranch { branch } | Event::DisconnectBranch { branch } => {
            let br = next
                .branches
                .get_mut(branch)
                .ok_or_else(|| Error::Topology(format!("unknown branch index {branch}")))?;
            br.connected = matches!(event, Event::ConnectBranch { .. });
        }
        Event::LoadStep { load, conductance } => {
            if !(conductance >= 0.0 && conductance.is_finite()) {
                return Err(Error::Topology(format!(
                    "load conductance must be >= 0, got {conductance}"
                )));
            }
            let node = next
                .loads
                .get_mut(load)
                .ok_or_else(|| Error::Topology(format!("unknown load index {load}")))?;
            node.conductance = conductance;
        }
        Event::SetPoint { inverter, .. } => {
            if inverter >= next.inverters.len() {
                return Err(Error::Topology(format!("unknown inverter index {inverter}")));
            }
        }
    }
    let before = topo.islanded_loads();
    let islanded: Vec<usize> = next
        .islanded_loads()
        .into_iter()
        .filter(|k| !before.contains(k))
        .collect();
    for &k in &islanded {
        warn!("load '{}' is islanded from all sources", next.loads[k].id);
    }
    Ok(EventOutcome {
        topology: next,
        islanded_loads: islanded,
    })
}

/// `(p, q) = (vᵀ i, vᵀ J i)`.
pub fn measure_power(v: AlphaBetaVec, i_o: AlphaBetaVec) -> (f64, f64) {
    (v.a * i_o.a + v.b * i_o.b, v.b * i_o.a - v.a * i_o.b)
}
