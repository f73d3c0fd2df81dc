//! The scenario file format: a TOML document describing units, lines,
//! events, the secondary layer, and solver settings, convertible to and from
//! the in-memory [`Scenario`] without loss. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use dcgrid_core::consensus::{LeaderReference, SecondaryGains};
use dcgrid_core::control::{CdguGains, MgGains, References, UnitGains};
use dcgrid_core::lyapunov::{CertificateConfig, P22Choice};
use dcgrid_core::model::{CdguParams, ElectricalGraph, Line, Load, MgParams, UnitId, UnitParams};
use dcgrid_core::sim::{
    validate_scenario, Channel, Event, LoadChange, RefChange, Scenario, SecondaryConfig,
    SolverSettings,
};
use serde::{Deserialize, Serialize};

/// What can go wrong reading or writing a scenario file. The remedy differs
/// by class: `Io` and `Schema` mean the file itself is unusable, `Shape`
/// means the document structure is off, `Semantic` means the described
/// scenario is invalid (bad gains, unknown unit in an event, and so on).
#[derive(Debug)]
pub enum FileError {
    Io(std::io::Error),
    /// TOML-level problem; the message carries line positions.
    Schema(Box<toml::de::Error>),
    /// Structurally broken document: duplicate ids, missing or extraneous
    /// per-kind fields, events with no (or several) actions.
    Shape(String),
    Semantic(dcgrid_core::Error),
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileError::Io(e) => write!(f, "{e}"),
            FileError::Schema(e) => write!(f, "{e}"),
            FileError::Shape(msg) => write!(f, "{msg}"),
            FileError::Semantic(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FileError {}

impl From<dcgrid_core::Error> for FileError {
    fn from(e: dcgrid_core::Error) -> Self {
        FileError::Semantic(e)
    }
}

fn shape(msg: impl Into<String>) -> FileError {
    FileError::Shape(msg.into())
}

// ---------------------------------------------------------------------------
// Document structs. These mirror the TOML layout one to one; all semantic
// checking happens in the conversion to the core types.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindDoc {
    Mg,
    Cdgu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ChannelDoc {
    Voltage,
    Current,
}

impl From<ChannelDoc> for Channel {
    fn from(c: ChannelDoc) -> Channel {
        match c {
            ChannelDoc::Voltage => Channel::Voltage,
            ChannelDoc::Current => Channel::Current,
        }
    }
}

impl From<Channel> for ChannelDoc {
    fn from(c: Channel) -> ChannelDoc {
        match c {
            Channel::Voltage => ChannelDoc::Voltage,
            Channel::Current => ChannelDoc::Current,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitDoc {
    id: u32,
    kind: KindDoc,
    c_t: f64,
    l_tc: f64,
    r_tc: f64,
    i_cap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    l_tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_tv: Option<f64>,
    /// Resistive load in ohms; omit for none.
    #[serde(skip_serializing_if = "Option::is_none")]
    r_load: Option<f64>,
    /// Constant current draw in amps.
    #[serde(default)]
    i_load: f64,
    v_ref: f64,
    i_ref_pu: f64,
    k1c: f64,
    k2c: f64,
    k3c: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    k1v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k2v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k3v: Option<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDoc {
    a: u32,
    b: u32,
    r: f64,
    l: f64,
}

impl From<&Line> for LineDoc {
    fn from(line: &Line) -> Self {
        LineDoc { a: line.a.0, b: line.b.0, r: line.r, l: line.l }
    }
}

impl From<LineDoc> for Line {
    fn from(doc: LineDoc) -> Self {
        Line { a: UnitId(doc.a), b: UnitId(doc.b), r: doc.r, l: doc.l }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverDoc {
    #[serde(default = "default_dt")]
    dt: f64,
    duration: f64,
    #[serde(default = "default_decimation")]
    decimation: f64,
    #[serde(default)]
    seed: u64,
}

fn default_dt() -> f64 {
    SolverSettings::default().dt
}

fn default_decimation() -> f64 {
    SolverSettings::default().decimation
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SecondaryDoc {
    period: f64,
    kp_v: f64,
    ki_v: f64,
    kp_c: f64,
    ki_c: f64,
    leader_v: f64,
    leader_i_pu: f64,
    edges: Vec<(u32, u32)>,
    pinned: Vec<u32>,
    #[serde(default)]
    voltage_enabled: bool,
    #[serde(default)]
    current_enabled: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertificateDoc {
    #[serde(default = "default_sigma_bar")]
    sigma_bar: f64,
    /// Fixed p22C value; omit to use the coupling relation.
    #[serde(skip_serializing_if = "Option::is_none")]
    p22c: Option<f64>,
    #[serde(default = "default_psd_tol")]
    psd_tol: f64,
    #[serde(default = "default_margin_tol")]
    stability_margin_tol: f64,
}

fn default_sigma_bar() -> f64 {
    CertificateConfig::default().sigma_bar
}

fn default_psd_tol() -> f64 {
    CertificateConfig::default().psd_tol
}

fn default_margin_tol() -> f64 {
    CertificateConfig::default().stability_margin_tol
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitValueDoc {
    unit: u32,
    value: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RLoadDoc {
    unit: u32,
    /// New resistance; omit to remove the resistive branch.
    #[serde(skip_serializing_if = "Option::is_none")]
    ohms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConnectDoc {
    unit: UnitDoc,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    lines: Vec<LineDoc>,
}

/// One timeline entry: the instant plus exactly one action field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventDoc {
    t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    connect: Option<ConnectDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    disconnect: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    set_v_ref: Option<UnitValueDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    set_i_ref_pu: Option<UnitValueDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    set_leader_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    set_leader_i_pu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    enable: Option<ChannelDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    disable: Option<ChannelDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    set_i_load: Option<UnitValueDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    set_r_load: Option<RLoadDoc>,
}

impl EventDoc {
    fn empty(t: f64) -> Self {
        EventDoc {
            t,
            connect: None,
            disconnect: None,
            set_v_ref: None,
            set_i_ref_pu: None,
            set_leader_v: None,
            set_leader_i_pu: None,
            enable: None,
            disable: None,
            set_i_load: None,
            set_r_load: None,
        }
    }

    fn action_count(&self) -> usize {
        [
            self.connect.is_some(),
            self.disconnect.is_some(),
            self.set_v_ref.is_some(),
            self.set_i_ref_pu.is_some(),
            self.set_leader_v.is_some(),
            self.set_leader_i_pu.is_some(),
            self.enable.is_some(),
            self.disable.is_some(),
            self.set_i_load.is_some(),
            self.set_r_load.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    solver: Option<SolverDoc>,
    units: Vec<UnitDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    lines: Vec<LineDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    events: Vec<EventDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    secondary: Option<SecondaryDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certificate: Option<CertificateDoc>,
}

// ---------------------------------------------------------------------------
// Document -> core.

fn unit_from_doc(doc: &UnitDoc) -> Result<(UnitId, UnitParams, UnitGains, References), FileError> {
    let id = doc.id;
    let cdgu = CdguParams {
        c_t: doc.c_t,
        l_tc: doc.l_tc,
        r_tc: doc.r_tc,
        i_cap: doc.i_cap,
        load: Load { r_l: doc.r_load, i_l: doc.i_load },
    };
    let current = CdguGains { k1: doc.k1c, k2: doc.k2c, k3: doc.k3c };
    let refs = References { v_ref: doc.v_ref, i_ref_pu: doc.i_ref_pu, i_cap: doc.i_cap };

    let voltage_fields =
        [("l_tv", doc.l_tv), ("r_tv", doc.r_tv), ("k1v", doc.k1v), ("k2v", doc.k2v), ("k3v", doc.k3v)];
    match doc.kind {
        KindDoc::Cdgu => {
            if let Some((name, _)) = voltage_fields.iter().find(|(_, v)| v.is_some()) {
                return Err(shape(format!(
                    "unit {id}: {name} is set but kind = \"cdgu\" has no grid-forming converter"
                )));
            }
            Ok((UnitId(id), UnitParams::Cdgu(cdgu), UnitGains::Cdgu(current), refs))
        }
        KindDoc::Mg => {
            let need = |field: usize| {
                let (name, v) = voltage_fields[field];
                v.ok_or_else(|| shape(format!("unit {id}: kind = \"mg\" requires {name}")))
            };
            let params = MgParams { cdgu, l_tv: need(0)?, r_tv: need(1)? };
            let gains = MgGains { current, k1v: need(2)?, k2v: need(3)?, k3v: need(4)? };
            Ok((UnitId(id), UnitParams::Mg(params), UnitGains::Mg(gains), refs))
        }
    }
}

fn event_from_doc(doc: &EventDoc) -> Result<(f64, Event), FileError> {
    if doc.action_count() != 1 {
        return Err(shape(format!(
            "event at t = {}: exactly one action field required, found {}",
            doc.t,
            doc.action_count()
        )));
    }
    let event = if let Some(c) = &doc.connect {
        let (id, params, gains, refs) = unit_from_doc(&c.unit)?;
        let lines = c.lines.iter().map(|&l| Line::from(l)).collect();
        Event::ConnectUnit { id, params, gains, refs, lines }
    } else if let Some(id) = doc.disconnect {
        Event::DisconnectUnit { id: UnitId(id) }
    } else if let Some(sv) = doc.set_v_ref {
        Event::SetPrimaryRef { id: UnitId(sv.unit), change: RefChange::Voltage(sv.value) }
    } else if let Some(si) = doc.set_i_ref_pu {
        Event::SetPrimaryRef { id: UnitId(si.unit), change: RefChange::CurrentPu(si.value) }
    } else if let Some(v) = doc.set_leader_v {
        Event::SetLeaderRef { change: RefChange::Voltage(v) }
    } else if let Some(pu) = doc.set_leader_i_pu {
        Event::SetLeaderRef { change: RefChange::CurrentPu(pu) }
    } else if let Some(ch) = doc.enable {
        Event::EnableSecondary { channel: ch.into() }
    } else if let Some(ch) = doc.disable {
        Event::DisableSecondary { channel: ch.into() }
    } else if let Some(sl) = doc.set_i_load {
        Event::SetLoad { id: UnitId(sl.unit), change: LoadChange::CurrentDraw(sl.value) }
    } else if let Some(rl) = doc.set_r_load {
        Event::SetLoad { id: UnitId(rl.unit), change: LoadChange::Resistance(rl.ohms) }
    } else {
        unreachable!("action_count() == 1 guarantees one branch matches");
    };
    Ok((doc.t, event))
}

fn scenario_from_doc(doc: &ScenarioDoc) -> Result<Scenario, FileError> {
    let mut units = BTreeMap::new();
    let mut gains = BTreeMap::new();
    let mut refs = BTreeMap::new();
    for unit_doc in &doc.units {
        let (id, params, unit_gains, unit_refs) = unit_from_doc(unit_doc)?;
        if units.insert(id, params).is_some() {
            return Err(shape(format!("unit {id} is declared twice")));
        }
        gains.insert(id, unit_gains);
        refs.insert(id, unit_refs);
    }
    let lines: Vec<Line> = doc.lines.iter().map(|&l| Line::from(l)).collect();
    let graph = ElectricalGraph::new(units, lines)?;

    let events = doc.events.iter().map(event_from_doc).collect::<Result<Vec<_>, _>>()?;

    let solver = match doc.solver {
        Some(s) => SolverSettings { dt: s.dt, duration: s.duration, decimation: s.decimation, seed: s.seed },
        None => SolverSettings::default(),
    };

    let secondary = doc.secondary.as_ref().map(|s| SecondaryConfig {
        edges: s.edges.iter().map(|&(a, b)| (UnitId(a), UnitId(b))).collect(),
        pinned: s.pinned.iter().map(|&p| UnitId(p)).collect(),
        gains: SecondaryGains { kp_v: s.kp_v, ki_v: s.ki_v, kp_c: s.kp_c, ki_c: s.ki_c },
        leader: LeaderReference { v_ref: s.leader_v, i_ref_pu: s.leader_i_pu },
        period: s.period,
        voltage_enabled: s.voltage_enabled,
        current_enabled: s.current_enabled,
    });

    let certificate = match doc.certificate {
        Some(c) => CertificateConfig {
            sigma_bar: c.sigma_bar,
            p22c: match c.p22c {
                Some(v) => P22Choice::Fixed(v),
                None => P22Choice::Auto,
            },
            psd_tol: c.psd_tol,
            stability_margin_tol: c.stability_margin_tol,
        },
        None => CertificateConfig::default(),
    };

    let scenario = Scenario { graph, gains, refs, events, solver, secondary, certificate };
    validate_scenario(&scenario)?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// Core -> document.

fn unit_to_doc(
    id: UnitId,
    params: &UnitParams,
    gains: &UnitGains,
    refs: &References,
) -> Result<UnitDoc, FileError> {
    let cdgu = params.cdgu();
    let mut doc = UnitDoc {
        id: id.0,
        kind: KindDoc::Cdgu,
        c_t: cdgu.c_t,
        l_tc: cdgu.l_tc,
        r_tc: cdgu.r_tc,
        i_cap: cdgu.i_cap,
        l_tv: None,
        r_tv: None,
        r_load: cdgu.load.r_l,
        i_load: cdgu.load.i_l,
        v_ref: refs.v_ref,
        i_ref_pu: refs.i_ref_pu,
        k1c: 0.0,
        k2c: 0.0,
        k3c: 0.0,
        k1v: None,
        k2v: None,
        k3v: None,
    };
    match (params, gains) {
        (UnitParams::Cdgu(_), UnitGains::Cdgu(g)) => {
            doc.k1c = g.k1;
            doc.k2c = g.k2;
            doc.k3c = g.k3;
        }
        (UnitParams::Mg(p), UnitGains::Mg(g)) => {
            doc.kind = KindDoc::Mg;
            doc.l_tv = Some(p.l_tv);
            doc.r_tv = Some(p.r_tv);
            doc.k1c = g.current.k1;
            doc.k2c = g.current.k2;
            doc.k3c = g.current.k3;
            doc.k1v = Some(g.k1v);
            doc.k2v = Some(g.k2v);
            doc.k3v = Some(g.k3v);
        }
        _ => {
            return Err(shape(format!("unit {id}: parameter and gain kinds disagree")));
        }
    }
    if refs.i_cap != cdgu.i_cap {
        return Err(shape(format!("unit {id}: reference I_cap differs from the rated capacity")));
    }
    Ok(doc)
}

fn event_to_doc(t: f64, event: &Event) -> Result<EventDoc, FileError> {
    let mut doc = EventDoc::empty(t);
    match event {
        Event::ConnectUnit { id, params, gains, refs, lines } => {
            doc.connect = Some(ConnectDoc {
                unit: unit_to_doc(*id, params, gains, refs)?,
                lines: lines.iter().map(LineDoc::from).collect(),
            });
        }
        Event::DisconnectUnit { id } => doc.disconnect = Some(id.0),
        Event::SetPrimaryRef { id, change: RefChange::Voltage(v) } => {
            doc.set_v_ref = Some(UnitValueDoc { unit: id.0, value: *v });
        }
        Event::SetPrimaryRef { id, change: RefChange::CurrentPu(pu) } => {
            doc.set_i_ref_pu = Some(UnitValueDoc { unit: id.0, value: *pu });
        }
        Event::SetLeaderRef { change: RefChange::Voltage(v) } => doc.set_leader_v = Some(*v),
        Event::SetLeaderRef { change: RefChange::CurrentPu(pu) } => {
            doc.set_leader_i_pu = Some(*pu);
        }
        Event::EnableSecondary { channel } => doc.enable = Some((*channel).into()),
        Event::DisableSecondary { channel } => doc.disable = Some((*channel).into()),
        Event::SetLoad { id, change: LoadChange::CurrentDraw(amps) } => {
            doc.set_i_load = Some(UnitValueDoc { unit: id.0, value: *amps });
        }
        Event::SetLoad { id, change: LoadChange::Resistance(ohms) } => {
            doc.set_r_load = Some(RLoadDoc { unit: id.0, ohms: *ohms });
        }
    }
    Ok(doc)
}

fn scenario_to_doc(scenario: &Scenario) -> Result<ScenarioDoc, FileError> {
    let mut units = Vec::new();
    for (&id, params) in scenario.graph.units() {
        let gains = scenario
            .gains
            .get(&id)
            .ok_or_else(|| shape(format!("unit {id} has no gains entry")))?;
        let refs = scenario
            .refs
            .get(&id)
            .ok_or_else(|| shape(format!("unit {id} has no references entry")))?;
        units.push(unit_to_doc(id, params, gains, refs)?);
    }
    let events =
        scenario.events.iter().map(|(t, e)| event_to_doc(*t, e)).collect::<Result<Vec<_>, _>>()?;
    Ok(ScenarioDoc {
        solver: Some(SolverDoc {
            dt: scenario.solver.dt,
            duration: scenario.solver.duration,
            decimation: scenario.solver.decimation,
            seed: scenario.solver.seed,
        }),
        units,
        lines: scenario.graph.lines().iter().map(LineDoc::from).collect(),
        events,
        secondary: scenario.secondary.as_ref().map(|s| SecondaryDoc {
            period: s.period,
            kp_v: s.gains.kp_v,
            ki_v: s.gains.ki_v,
            kp_c: s.gains.kp_c,
            ki_c: s.gains.ki_c,
            leader_v: s.leader.v_ref,
            leader_i_pu: s.leader.i_ref_pu,
            edges: s.edges.iter().map(|&(a, b)| (a.0, b.0)).collect(),
            pinned: s.pinned.iter().map(|p| p.0).collect(),
            voltage_enabled: s.voltage_enabled,
            current_enabled: s.current_enabled,
        }),
        certificate: Some(CertificateDoc {
            sigma_bar: scenario.certificate.sigma_bar,
            p22c: match scenario.certificate.p22c {
                P22Choice::Auto => None,
                P22Choice::Fixed(v) => Some(v),
            },
            psd_tol: scenario.certificate.psd_tol,
            stability_margin_tol: scenario.certificate.stability_margin_tol,
        }),
    })
}

// ---------------------------------------------------------------------------
// Public entry points.

/// Parses and fully validates a scenario document.
pub fn parse_scenario_str(text: &str) -> Result<Scenario, FileError> {
    let doc: ScenarioDoc = toml::from_str(text).map_err(|e| FileError::Schema(Box::new(e)))?;
    scenario_from_doc(&doc)
}

/// Reads, parses, and fully validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario, FileError> {
    let text = std::fs::read_to_string(path).map_err(FileError::Io)?;
    parse_scenario_str(&text)
}

/// Renders a scenario as a TOML document that [`parse_scenario_str`] maps
/// back to an equal scenario.
pub fn emit_scenario(scenario: &Scenario) -> Result<String, FileError> {
    let doc = scenario_to_doc(scenario)?;
    toml::to_string_pretty(&doc)
        .map_err(|e| shape(format!("scenario not representable as a document: {e}")))
}
