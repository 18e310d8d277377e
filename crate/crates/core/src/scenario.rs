//! Scenario documents: JSON with explicit units in key names.
//!
//! Voltages may be given as RMS (`*_vrms`) or peak (`*_vpeak`) values; this
//! module is the only place that converts between them. Internally every
//! vector is in peak units and a load of `p_w` watts is a conductance
//! `p_w / v_base_peak²`.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::{FRAC_PI_2, SQRT_2, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{DroopParams, DvocParams};
use crate::error::{Error, Result};
use crate::network::{Branch, Event, InverterNode, LoadNode, NodeRef, Topology};
use crate::sim::{
    validate_scenario, Controller, ControllerUpdate, InitialCondition, InverterSpec,
    NetworkModel, Scenario, SimConfig, TimedEvent,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub f0_hz: f64,
    /// Voltage at which `p_w` loads are rated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_base_vrms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_base_vpeak: Option<f64>,
    pub inverters: Vec<InverterFile>,
    #[serde(default)]
    pub loads: Vec<LoadFile>,
    #[serde(default)]
    pub branches: Vec<BranchFile>,
    #[serde(default)]
    pub events: Vec<EventFile>,
    #[serde(default)]
    pub sim: SimFile,
    #[serde(default)]
    pub outputs: OutputsFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterFile {
    pub id: String,
    pub control: ControlFile,
    #[serde(default)]
    pub shunt_c_farad: f64,
    #[serde(default)]
    pub initial: InitialFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlFile {
    Dvoc(DvocFile),
    Droop(DroopFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvocFile {
    pub eta: f64,
    pub alpha: f64,
    pub kappa_rad: f64,
    pub p_star_w: f64,
    pub q_star_var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star_vrms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star_vpeak: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopFile {
    pub kp_rad_s_per_w: f64,
    pub kq_vpeak_per_var: f64,
    pub p_star_w: f64,
    pub q_star_var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star_vrms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star_vpeak: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialFile {
    #[default]
    Blackstart,
    Zero,
    Voltage {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_vrms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_vpeak: Option<f64>,
        #[serde(default)]
        theta_rad: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadFile {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_siemens: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_w: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFile {
    pub id: String,
    /// Node id, or `"ground"`.
    pub from: String,
    pub to: String,
    pub r_ohm: f64,
    pub l_henry: f64,
    #[serde(default = "yes")]
    pub connected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventFile {
    pub t_s: f64,
    pub action: ActionFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionFile {
    Connect {
        branch: String,
    },
    Disconnect {
        branch: String,
    },
    LoadStep {
        load: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g_siemens: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_w: Option<f64>,
    },
    SetPoint {
        inverter: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p_star_w: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q_star_var: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_star_vrms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_star_vpeak: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateFile {
    Continuous,
    Sampled { rate_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFile {
    Quasistatic,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimFile {
    pub dt_s: f64,
    pub t_end_s: f64,
    pub controller_update: UpdateFile,
    pub network_model: ModelFile,
    pub record_decimation: usize,
    pub noise_seed: u64,
    pub noise_amplitude: f64,
    pub blackstart_fraction: f64,
}

impl Default for SimFile {
    fn default() -> Self {
        Self::from(&SimConfig::default())
    }
}

impl From<&SimConfig> for SimFile {
    fn from(c: &SimConfig) -> Self {
        Self {
            dt_s: c.dt,
            t_end_s: c.t_end,
            controller_update: match c.controller_update {
                ControllerUpdate::Continuous => UpdateFile::Continuous,
                ControllerUpdate::Sampled { rate_hz } => UpdateFile::Sampled { rate_hz },
            },
            network_model: match c.network_model {
                NetworkModel::QuasiStatic => ModelFile::Quasistatic,
                NetworkModel::Dynamic => ModelFile::Dynamic,
            },
            record_decimation: c.record_decimation,
            noise_seed: c.noise_seed,
            noise_amplitude: c.noise_amplitude,
            blackstart_fraction: c.blackstart_fraction,
        }
    }
}

impl From<&SimFile> for SimConfig {
    fn from(s: &SimFile) -> Self {
        SimConfig {
            dt: s.dt_s,
            t_end: s.t_end_s,
            controller_update: match s.controller_update {
                UpdateFile::Continuous => ControllerUpdate::Continuous,
                UpdateFile::Sampled { rate_hz } => ControllerUpdate::Sampled { rate_hz },
            },
            network_model: match s.network_model {
                ModelFile::Quasistatic => NetworkModel::QuasiStatic,
                ModelFile::Dynamic => NetworkModel::Dynamic,
            },
            record_decimation: s.record_decimation,
            noise_seed: s.noise_seed,
            noise_amplitude: s.noise_amplitude,
            blackstart_fraction: s.blackstart_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputsFile {
    pub trace: bool,
    pub metrics: bool,
}

impl Default for OutputsFile {
    fn default() -> Self {
        Self {
            trace: true,
            metrics: true,
        }
    }
}

/// Parses and validates a scenario document, reporting every unknown key and
/// every semantic problem found.
pub fn parse_scenario_str(text: &str) -> Result<ScenarioFile> {
    let mut unknown = Vec::new();
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_ignored::deserialize(de, |path| {
        unknown.push(format!("unknown key '{path}'"));
    })
    .map_err(|e| {
        let mut all = unknown.clone();
        all.push(e.to_string());
        Error::Schema(all)
    })?;
    let mut problems = unknown;
    if let Err(Error::Schema(more)) = file.check() {
        problems.extend(more);
    }
    if !problems.is_empty() {
        return Err(Error::Schema(problems));
    }
    file.resolve()?;
    Ok(file)
}

pub fn parse_scenario(path: &Path) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

fn peak(rms: Option<f64>, pk: Option<f64>, what: &str, problems: &mut Vec<String>) -> Option<f64> {
    match (rms, pk) {
        (Some(r), None) => Some(r * SQRT_2),
        (None, Some(p)) => Some(p),
        (Some(_), Some(_)) => {
            problems.push(format!("{what}: give either the rms or the peak value, not both"));
            None
        }
        (None, None) => None,
    }
}

fn positive(x: f64, what: &str, problems: &mut Vec<String>) {
    if !(x > 0.0 && x.is_finite()) {
        problems.push(format!("{what} must be > 0, got {x}"));
    }
}

fn non_negative(x: f64, what: &str, problems: &mut Vec<String>) {
    if !(x >= 0.0 && x.is_finite()) {
        problems.push(format!("{what} must be >= 0, got {x}"));
    }
}

impl ScenarioFile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    fn v_base(&self, problems: &mut Vec<String>) -> Option<f64> {
        peak(self.v_base_vrms, self.v_base_vpeak, "v_base", problems)
    }

    fn conductance(
        &self,
        g: Option<f64>,
        p: Option<f64>,
        what: &str,
        problems: &mut Vec<String>,
    ) -> f64 {
        match (g, p) {
            (Some(g), None) => {
                non_negative(g, &format!("{what} g_siemens"), problems);
                g
            }
            (None, Some(p)) => {
                non_negative(p, &format!("{what} p_w"), problems);
                match self.v_base(&mut Vec::new()) {
                    Some(v) if v > 0.0 => p / (v * v),
                    _ => {
                        problems.push(format!("{what}: p_w needs v_base_vrms or v_base_vpeak"));
                        0.0
                    }
                }
            }
            _ => {
                problems.push(format!("{what}: give exactly one of g_siemens, p_w"));
                0.0
            }
        }
    }

    /// Structural checks on ids, references, units and event order.
    fn check(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    fn build(&self) -> Result<Scenario> {
        let mut problems = Vec::new();
        positive(self.f0_hz, "f0_hz", &mut problems);
        let omega0 = TAU * self.f0_hz;
        if let Some(v) = self.v_base(&mut problems) {
            positive(v, "v_base", &mut problems);
        }

        let mut seen = BTreeSet::new();
        let mut nodes: HashMap<&str, NodeRef> = HashMap::new();
        for (k, inv) in self.inverters.iter().enumerate() {
            if !seen.insert(inv.id.as_str()) {
                problems.push(format!("duplicate node id '{}'", inv.id));
            }
            nodes.insert(&inv.id, NodeRef::Inverter(k));
        }
        for (k, load) in self.loads.iter().enumerate() {
            if !seen.insert(load.id.as_str()) {
                problems.push(format!("duplicate node id '{}'", load.id));
            }
            nodes.insert(&load.id, NodeRef::Load(k));
        }
        if seen.contains("ground") {
            problems.push("'ground' is reserved for the common return".into());
        }
        let mut branch_ids = HashMap::new();
        for (b, br) in self.branches.iter().enumerate() {
            if branch_ids.insert(br.id.as_str(), b).is_some() {
                problems.push(format!("duplicate branch id '{}'", br.id));
            }
        }

        let mut inverters = Vec::new();
        let mut inverter_nodes = Vec::new();
        for inv in &self.inverters {
            let what = format!("inverter '{}'", inv.id);
            non_negative(inv.shunt_c_farad, &format!("{what} shunt_c_farad"), &mut problems);
            let controller = match &inv.control {
                ControlFile::Dvoc(d) => {
                    let v = peak(d.v_star_vrms, d.v_star_vpeak, &format!("{what} v_star"), &mut problems);
                    if v.is_none() && d.v_star_vrms.is_none() {
                        problems.push(format!("{what}: v_star_vrms or v_star_vpeak is required"));
                    }
                    Controller::Dvoc(DvocParams {
                        eta: d.eta,
                        alpha: d.alpha,
                        kappa: d.kappa_rad,
                        p_star: d.p_star_w,
                        q_star: d.q_star_var,
                        v_star: v.unwrap_or(1.0),
                        omega0,
                    })
                }
                ControlFile::Droop(d) => {
                    let v = peak(d.v_star_vrms, d.v_star_vpeak, &format!("{what} v_star"), &mut problems);
                    if v.is_none() && d.v_star_vrms.is_none() {
                        problems.push(format!("{what}: v_star_vrms or v_star_vpeak is required"));
                    }
                    Controller::Droop(DroopParams {
                        kp: d.kp_rad_s_per_w,
                        kq: d.kq_vpeak_per_var,
                        omega0,
                        v_star: v.unwrap_or(1.0),
                        p_star: d.p_star_w,
                        q_star: d.q_star_var,
                    })
                }
            };
            if let Err(e) = controller.validate() {
                problems.push(format!("{what}: {e}"));
            }
            let initial = match &inv.initial {
                InitialFile::Blackstart => InitialCondition::BlackStart,
                InitialFile::Zero => InitialCondition::Zero,
                InitialFile::Voltage {
                    v_vrms,
                    v_vpeak,
                    theta_rad,
                } => {
                    let m = peak(*v_vrms, *v_vpeak, &format!("{what} initial"), &mut problems);
                    if v_vrms.is_none() && v_vpeak.is_none() {
                        problems.push(format!("{what}: initial voltage needs v_vrms or v_vpeak"));
                    }
                    let m = m.unwrap_or(0.0);
                    non_negative(m, &format!("{what} initial magnitude"), &mut problems);
                    InitialCondition::Voltage {
                        magnitude: m,
                        theta: *theta_rad,
                    }
                }
            };
            inverters.push(InverterSpec {
                id: inv.id.clone(),
                controller,
                initial,
            });
            inverter_nodes.push(InverterNode {
                id: inv.id.clone(),
                shunt_c: inv.shunt_c_farad,
            });
        }

        let loads: Vec<LoadNode> = self
            .loads
            .iter()
            .map(|l| LoadNode {
                id: l.id.clone(),
                conductance: self.conductance(
                    l.g_siemens,
                    l.p_w,
                    &format!("load '{}'", l.id),
                    &mut problems,
                ),
            })
            .collect();

        let node = |name: &str, problems: &mut Vec<String>, what: &str| -> NodeRef {
            if name == "ground" {
                return NodeRef::Ground;
            }
            nodes.get(name).copied().unwrap_or_else(|| {
                problems.push(format!("{what} refers to unknown node '{name}'"));
                NodeRef::Ground
            })
        };
        let mut branches = Vec::new();
        for br in &self.branches {
            let what = format!("branch '{}'", br.id);
            non_negative(br.r_ohm, &format!("{what} r_ohm"), &mut problems);
            non_negative(br.l_henry, &format!("{what} l_henry"), &mut problems);
            let from = node(&br.from, &mut problems, &what);
            let to = node(&br.to, &mut problems, &what);
            if from == to {
                problems.push(format!("{what} connects a node to itself"));
            }
            branches.push(Branch {
                id: br.id.clone(),
                from,
                to,
                r: br.r_ohm,
                l: br.l_henry,
                connected: br.connected,
            });
        }

        let inverter_index: HashMap<&str, usize> = self
            .inverters
            .iter()
            .enumerate()
            .map(|(k, i)| (i.id.as_str(), k))
            .collect();
        let load_index: HashMap<&str, usize> = self
            .loads
            .iter()
            .enumerate()
            .map(|(k, l)| (l.id.as_str(), k))
            .collect();
        let mut events = Vec::new();
        let mut last = 0.0;
        for (n, ev) in self.events.iter().enumerate() {
            let what = format!("event {n}");
            if !(ev.t_s >= 0.0 && ev.t_s.is_finite()) {
                problems.push(format!("{what}: time must be >= 0, got {}", ev.t_s));
            } else if ev.t_s < last {
                problems.push(format!("{what}: events must be sorted by time"));
            } else {
                last = ev.t_s;
            }
            let lookup = |map: &HashMap<&str, usize>, id: &str, kind: &str, problems: &mut Vec<String>| {
                map.get(id).copied().or_else(|| {
                    problems.push(format!("{what} refers to unknown {kind} '{id}'"));
                    None
                })
            };
            let event = match &ev.action {
                ActionFile::Connect { branch } => lookup(&branch_ids, branch, "branch", &mut problems)
                    .map(|branch| Event::ConnectBranch { branch }),
                ActionFile::Disconnect { branch } => {
                    lookup(&branch_ids, branch, "branch", &mut problems)
                        .map(|branch| Event::DisconnectBranch { branch })
                }
                ActionFile::LoadStep { load, g_siemens, p_w } => {
                    let g = self.conductance(*g_siemens, *p_w, &what, &mut problems);
                    lookup(&load_index, load, "load", &mut problems)
                        .map(|load| Event::LoadStep { load, conductance: g })
                }
                ActionFile::SetPoint {
                    inverter,
                    p_star_w,
                    q_star_var,
                    v_star_vrms,
                    v_star_vpeak,
                } => {
                    let v = peak(*v_star_vrms, *v_star_vpeak, &what, &mut problems);
                    if let Some(v) = v {
                        positive(v, &format!("{what} v_star"), &mut problems);
                    }
                    lookup(&inverter_index, inverter, "inverter", &mut problems).map(|inverter| {
                        Event::SetPoint {
                            inverter,
                            p_star: *p_star_w,
                            q_star: *q_star_var,
                            v_star: v,
                        }
                    })
                }
            };
            if let Some(event) = event {
                events.push(TimedEvent { t: ev.t_s, event });
            }
        }

        if !problems.is_empty() {
            return Err(Error::Schema(problems));
        }
        Ok(Scenario {
            name: self.name.clone(),
            network_omega: omega0,
            inverters,
            topology: Topology {
                inverters: inverter_nodes,
                loads,
                branches,
            },
            events,
        })
    }

    /// Core scenario and solver settings, fully validated.
    pub fn resolve(&self) -> Result<(Scenario, SimConfig)> {
        let scenario = self.build()?;
        let config = SimConfig::from(&self.sim);
        validate_scenario(&scenario, &config)?;
        Ok((scenario, config))
    }
}

/// Built-in scenario names with a one-line description.
pub const BUILTINS: &[(&str, &str)] = &[
    ("paper-fig4", "black start of one inverter under a 500 W load"),
    ("paper-fig5", "second inverter connected to a loaded 500 W bus"),
    ("paper-fig6", "two inverters, load step 250 W to 750 W"),
    ("paper-fig7", "set-point dispatch 250 W to 500 W on a 750 W load"),
    ("droop-fig2", "single inverter in per-unit, template for droop sweeps"),
];

/// `blackstart` is accepted as an alias of `paper-fig4`.
pub fn builtin(name: &str) -> Option<ScenarioFile> {
    match name {
        "paper-fig4" | "blackstart" => Some(fig4()),
        "paper-fig5" => Some(fig5()),
        "paper-fig6" => Some(fig6()),
        "paper-fig7" => Some(fig7()),
        "droop-fig2" => Some(droop_fig2()),
        _ => None,
    }
}

pub const TABLE1_ETA: f64 = 21.71;
pub const TABLE1_ALPHA: f64 = 0.9722;
pub const TABLE1_V_STAR_VRMS: f64 = 120.0;
pub const TABLE1_C_F: f64 = 24e-6;
pub const TABLE1_L_G: f64 = 0.2e-3;
/// Assumed line resistance of every built-in branch.
pub const BUILTIN_LINE_R: f64 = 0.1;

fn table1_inverter(id: &str, p_star_w: f64, initial: InitialFile) -> InverterFile {
    InverterFile {
        id: id.into(),
        control: ControlFile::Dvoc(DvocFile {
            eta: TABLE1_ETA,
            alpha: TABLE1_ALPHA,
            kappa_rad: FRAC_PI_2,
            p_star_w,
            q_star_var: -125.0,
            v_star_vrms: Some(TABLE1_V_STAR_VRMS),
            v_star_vpeak: None,
        }),
        shunt_c_farad: TABLE1_C_F,
        initial,
    }
}

fn at_v_star(theta_rad: f64) -> InitialFile {
    InitialFile::Voltage {
        v_vrms: Some(TABLE1_V_STAR_VRMS),
        v_vpeak: None,
        theta_rad,
    }
}

fn line(id: &str, from: &str, connected: bool) -> BranchFile {
    BranchFile {
        id: id.into(),
        from: from.into(),
        to: "bus".into(),
        r_ohm: BUILTIN_LINE_R,
        l_henry: TABLE1_L_G,
        connected,
    }
}

fn bus(p_w: f64) -> LoadFile {
    LoadFile {
        id: "bus".into(),
        g_siemens: None,
        p_w: Some(p_w),
    }
}

fn table1_scenario(name: &str, description: &str, t_end_s: f64) -> ScenarioFile {
    ScenarioFile {
        name: name.into(),
        description: Some(description.into()),
        f0_hz: 60.0,
        v_base_vrms: Some(TABLE1_V_STAR_VRMS),
        v_base_vpeak: None,
        inverters: vec![],
        loads: vec![],
        branches: vec![],
        events: vec![],
        sim: SimFile {
            t_end_s,
            ..SimFile::default()
        },
        outputs: OutputsFile::default(),
    }
}

fn fig4() -> ScenarioFile {
    let mut s = table1_scenario("paper-fig4", BUILTINS[0].1, 0.8);
    s.inverters = vec![table1_inverter("inv1", 500.0, InitialFile::Blackstart)];
    s.loads = vec![bus(500.0)];
    s.branches = vec![line("line1", "inv1", true)];
    s
}

fn fig5() -> ScenarioFile {
    let mut s = table1_scenario("paper-fig5", BUILTINS[1].1, 1.0);
    s.inverters = vec![
        table1_inverter("inv1", 500.0, at_v_star(0.0)),
        table1_inverter("inv2", 500.0, at_v_star(2.0)),
    ];
    s.loads = vec![bus(500.0)];
    s.branches = vec![line("line1", "inv1", true), line("line2", "inv2", false)];
    s.events = vec![EventFile {
        t_s: 0.1,
        action: ActionFile::Connect {
            branch: "line2".into(),
        },
    }];
    s
}

fn fig6() -> ScenarioFile {
    let mut s = table1_scenario("paper-fig6", BUILTINS[2].1, 0.8);
    s.inverters = vec![
        table1_inverter("inv1", 500.0, at_v_star(0.0)),
        table1_inverter("inv2", 500.0, at_v_star(0.0)),
    ];
    s.loads = vec![bus(250.0)];
    s.branches = vec![line("line1", "inv1", true), line("line2", "inv2", true)];
    s.events = vec![EventFile {
        t_s: 0.3,
        action: ActionFile::LoadStep {
            load: "bus".into(),
            g_siemens: None,
            p_w: Some(750.0),
        },
    }];
    s
}

fn fig7() -> ScenarioFile {
    let mut s = table1_scenario("paper-fig7", BUILTINS[3].1, 1.2);
    s.inverters = vec![
        table1_inverter("inv1", 250.0, at_v_star(0.0)),
        table1_inverter("inv2", 250.0, at_v_star(0.0)),
    ];
    s.loads = vec![bus(750.0)];
    s.branches = vec![line("line1", "inv1", true), line("line2", "inv2", true)];
    s.events = vec![EventFile {
        t_s: 0.4,
        action: ActionFile::SetPoint {
            inverter: "inv2".into(),
            p_star_w: Some(500.0),
            q_star_var: None,
            v_star_vrms: None,
            v_star_vpeak: None,
        },
    }];
    s
}

fn droop_fig2() -> ScenarioFile {
    ScenarioFile {
        name: "droop-fig2".into(),
        description: Some(BUILTINS[4].1.into()),
        f0_hz: 60.0,
        v_base_vrms: None,
        v_base_vpeak: Some(1.0),
        inverters: vec![InverterFile {
            id: "inv1".into(),
            control: ControlFile::Dvoc(DvocFile {
                eta: 43.43,
                alpha: 0.9722,
                kappa_rad: FRAC_PI_2,
                p_star_w: 0.5,
                q_star_var: 0.0,
                v_star_vrms: None,
                v_star_vpeak: Some(1.0),
            }),
            shunt_c_farad: 0.0,
            initial: InitialFile::Voltage {
                v_vrms: None,
                v_vpeak: Some(1.0),
                theta_rad: 0.0,
            },
        }],
        loads: vec![bus(0.5)],
        branches: vec![BranchFile {
            id: "line1".into(),
            from: "inv1".into(),
            to: "bus".into(),
            r_ohm: 1e-3,
            l_henry: 0.0,
            connected: true,
        }],
        events: vec![],
        sim: SimFile {
            t_end_s: 0.3,
            network_model: ModelFile::Quasistatic,
            ..SimFile::default()
        },
        outputs: OutputsFile::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_errors(text: &str) -> Vec<String> {
        match parse_scenario_str(text) {
            Err(Error::Schema(v)) => v,
            other => panic!("expected schema errors, got {other:?}"),
        }
    }

    #[test]
    fn builtins_resolve() {
        for (name, _) in BUILTINS {
            let f = builtin(name).unwrap();
            f.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert_eq!(builtin("blackstart"), builtin("paper-fig4"));
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn blackstart_builtin_contents() {
        let (sc, _) = builtin("blackstart").unwrap().resolve().unwrap();
        assert_eq!(sc.inverters.len(), 1);
        let Controller::Dvoc(p) = sc.inverters[0].controller else {
            panic!()
        };
        assert_eq!((p.eta, p.alpha, p.p_star, p.q_star), (21.71, 0.9722, 500.0, -125.0));
        assert!((p.v_star - 120.0 * SQRT_2).abs() < 1e-12);
        let g = sc.topology.loads[0].conductance;
        assert!((g * p.v_star * p.v_star - 500.0).abs() < 1e-9);
        assert_eq!(sc.inverters[0].initial, InitialCondition::BlackStart);
    }

    #[test]
    fn round_trip_is_identity() {
        for (name, _) in BUILTINS {
            let f = builtin(name).unwrap();
            let again = parse_scenario_str(&f.to_json()).unwrap();
            assert_eq!(again, f);
            assert_eq!(again.resolve().unwrap(), f.resolve().unwrap());
        }
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let mut v: serde_json::Value = serde_json::from_str(&builtin("paper-fig7").unwrap().to_json()).unwrap();
        v["inverters"][0]["control"]["dvoc"]["etta"] = 1.0.into();
        v["branches"][1]["r_ohms"] = 0.1.into();
        v["color"] = "red".into();
        let errs = schema_errors(&v.to_string());
        assert_eq!(errs.len(), 3, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("etta")));
        assert!(errs.iter().any(|e| e.contains("r_ohms")));
    }

    #[test]
    fn negative_event_time_rejected() {
        let mut f = builtin("paper-fig6").unwrap();
        f.events[0].t_s = -0.1;
        let errs = schema_errors(&f.to_json());
        assert!(errs.iter().any(|e| e.contains("time must be >= 0")));
    }

    #[test]
    fn duplicate_ids_and_bad_refs_are_collected() {
        let mut f = builtin("paper-fig5").unwrap();
        f.inverters[1].id = "inv1".into();
        f.branches[0].to = "nowhere".into();
        f.events.push(EventFile {
            t_s: 0.05,
            action: ActionFile::Disconnect {
                branch: "ghost".into(),
            },
        });
        let errs = schema_errors(&f.to_json());
        assert!(errs.iter().any(|e| e.contains("duplicate node id 'inv1'")));
        assert!(errs.iter().any(|e| e.contains("unknown node 'nowhere'")));
        assert!(errs.iter().any(|e| e.contains("unknown branch 'ghost'")));
        assert!(errs.iter().any(|e| e.contains("sorted")));
    }

    #[test]
    fn voltage_units() {
        let mut f = builtin("paper-fig7").unwrap();
        if let ControlFile::Dvoc(d) = &mut f.inverters[0].control {
            d.v_star_vpeak = Some(170.0);
        }
        let errs = schema_errors(&f.to_json());
        assert!(errs.iter().any(|e| e.contains("not both")));

        let mut f = builtin("paper-fig7").unwrap();
        f.v_base_vrms = None;
        let errs = schema_errors(&f.to_json());
        assert!(errs.iter().any(|e| e.contains("needs v_base")));
    }

    #[test]
    fn malformed_json_is_a_schema_error() {
        assert!(matches!(parse_scenario_str("{"), Err(Error::Schema(_))));
        assert!(matches!(
            parse_scenario_str(r#"{"name": "x"}"#),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn semantic_errors_surface_from_resolve() {
        let mut f = builtin("paper-fig7").unwrap();
        f.branches[0].l_henry = 0.0;
        f.sim.network_model = ModelFile::Dynamic;
        f.sim.dt_s = 1e-6;
        assert!(matches!(parse_scenario_str(&f.to_json()), Err(Error::Topology(_))));
        f.sim.network_model = ModelFile::Quasistatic;
        parse_scenario_str(&f.to_json()).unwrap();
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let text = r#"{
            "name": "tiny",
            "f0_hz": 50,
            "inverters": [{"id": "a", "control": {"dvoc": {
                "eta": 10, "alpha": 1, "kappa_rad": 1.5707963267948966,
                "p_star_w": 0, "q_star_var": 0, "v_star_vpeak": 1}}}]
        }"#;
        let f = parse_scenario_str(text).unwrap();
        let (sc, cfg) = f.resolve().unwrap();
        assert_eq!(cfg, SimConfig::default());
        assert_eq!(sc.inverters[0].initial, InitialCondition::BlackStart);
        assert!((sc.network_omega - TAU * 50.0).abs() < 1e-12);
    }
}
