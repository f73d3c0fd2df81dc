//! Scenario-driven simulation of the closed-loop cluster.
//!
//! A scenario is an initial cluster plus a time-ordered event list. Between
//! boundaries (events, secondary-layer ticks, output samples) the dynamics
//! are linear time-invariant, so the engine integrates `ẋ = F x + M d` with
//! fixed-step RK4 on each segment and rebuilds `F`, `M`, `d` only when an
//! event changes them. Segment spans are divided into a whole number of equal
//! steps, which keeps the step size from drifting against the boundary grid.
//!
//! Plug events change the topology, never the surviving states: a unit the
//! cluster has not seen before joins at the equilibrium it would hold in
//! isolation (units are started separately, then connected), and a plugged-out
//! unit keeps running standalone on its own primary controller, severed from
//! the lines and from the communication graph, until it is plugged back in
//! with its state intact. Everything about a run is deterministic: same
//! scenario, same trace, bit for bit.
//!
//! The secondary layer runs on its own fixed period. Ticks land on the
//! global grid `k·period`; at each tick the live communication graph (the
//! subgraph induced by live units) produces consensus errors, the PI filters
//! produce reference corrections, and those corrections shift the primary
//! references until the next tick (zero-order hold).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::consensus::{
    check_lg_pd, consensus_errors, pi_update, CommGraph, LeaderReference, SecondaryGains,
    SecondaryState,
};
use crate::control::{
    assemble_augmented, check_unit_gains, control_input, disturbance_vector, require_valid_gains,
    AugmentedCluster, References, UnitGains,
};
use crate::error::Error;
use crate::lyapunov::{verify_global_stability, CertificateConfig, StabilityReport};
use crate::model::{ClusterKind, ElectricalGraph, Line, UnitId, UnitParams};
use crate::Result;

/// Any state magnitude beyond this halts the run as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// A primary reference change for one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefChange {
    Voltage(f64),
    CurrentPu(f64),
}

/// A local load change for one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadChange {
    CurrentDraw(f64),
    /// `None` removes the resistive branch.
    Resistance(Option<f64>),
}

/// Secondary-layer channel selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Voltage,
    Current,
}

/// Timeline event. Times are carried alongside in the scenario's event list.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    ConnectUnit {
        id: UnitId,
        params: UnitParams,
        gains: UnitGains,
        refs: References,
        lines: Vec<Line>,
    },
    DisconnectUnit {
        id: UnitId,
    },
    SetPrimaryRef {
        id: UnitId,
        change: RefChange,
    },
    SetLeaderRef {
        change: RefChange,
    },
    EnableSecondary {
        channel: Channel,
    },
    DisableSecondary {
        channel: Channel,
    },
    SetLoad {
        id: UnitId,
        change: LoadChange,
    },
}

/// Fixed-step solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// RK4 step, seconds.
    pub dt: f64,
    /// Total simulated time, seconds.
    pub duration: f64,
    /// Output sampling period, seconds.
    pub decimation: f64,
    /// Recorded with the run for reproducibility bookkeeping; the integration
    /// itself draws no random numbers.
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { dt: 1e-5, duration: 1.0, decimation: 1e-3, seed: 0 }
    }
}

/// Secondary-layer configuration.
///
/// `edges` and `pinned` describe the full communication topology over every
/// unit id the scenario can ever contain; at any instant the layer runs on
/// the subgraph induced by the live units, so a replugged unit gets its links
/// back automatically.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryConfig {
    pub edges: Vec<(UnitId, UnitId)>,
    pub pinned: Vec<UnitId>,
    pub gains: SecondaryGains,
    pub leader: LeaderReference,
    /// Communication period, seconds.
    pub period: f64,
    /// Channel states at t = 0.
    pub voltage_enabled: bool,
    pub current_enabled: bool,
}

/// A full simulation input: cluster, controllers, timeline, solver.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub graph: ElectricalGraph,
    pub gains: BTreeMap<UnitId, UnitGains>,
    pub refs: BTreeMap<UnitId, References>,
    pub events: Vec<(f64, Event)>,
    pub solver: SolverSettings,
    pub secondary: Option<SecondaryConfig>,
    pub certificate: CertificateConfig,
}

/// One unit's signals at a sample instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSample {
    pub id: UnitId,
    pub v: f64,
    pub i_c: f64,
    pub i_c_pu: f64,
    /// Grid-forming current; absent for grid-feeding units.
    pub i_v: Option<f64>,
    pub u_c: f64,
    pub u_v: Option<f64>,
    /// Secondary corrections and consensus errors; zero while the layer is
    /// off or the unit has no channel.
    pub delta_v: f64,
    pub delta_i_pu: f64,
    pub e_v: f64,
    pub e_c: f64,
}

/// All units' signals at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: f64,
    pub units: Vec<UnitSample>,
}

/// A maximal stretch of the run with a fixed unit set.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEpoch {
    pub unit_ids: Vec<UnitId>,
    pub records: Vec<TraceRecord>,
}

/// The whole run's output samples, split at topology changes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub epochs: Vec<TraceEpoch>,
}

impl Trace {
    pub fn records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.epochs.iter().flat_map(|e| e.records.iter())
    }

    pub fn last_record(&self) -> Option<&TraceRecord> {
        self.epochs.iter().rev().find_map(|e| e.records.last())
    }

    pub fn record_count(&self) -> usize {
        self.epochs.iter().map(|e| e.records.len()).sum()
    }
}

/// Result of a run: the trace, the stability report of the (final) topology,
/// and the full final state for equilibrium comparisons.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub report: StabilityReport,
    pub final_ids: Vec<UnitId>,
    pub final_state: DVector<f64>,
}

/// The live cluster during a run: topology, per-unit controllers and
/// references, the stacked augmented state, and the set of units currently
/// plugged out (still simulated, but cut off from lines and communication).
#[derive(Debug, Clone)]
pub struct LiveState {
    graph: ElectricalGraph,
    gains: BTreeMap<UnitId, UnitGains>,
    refs: BTreeMap<UnitId, References>,
    cluster: Option<AugmentedCluster>,
    x: DVector<f64>,
    detached: BTreeSet<UnitId>,
}

impl LiveState {
    /// Builds the starting state: every unit at the equilibrium it holds in
    /// isolation under its own references.
    pub fn new(
        graph: ElectricalGraph,
        gains: BTreeMap<UnitId, UnitGains>,
        refs: BTreeMap<UnitId, References>,
    ) -> Result<Self> {
        let mut live = Self {
            graph,
            gains,
            refs,
            cluster: None,
            x: DVector::zeros(0),
            detached: BTreeSet::new(),
        };
        let mut blocks = Vec::new();
        for id in live.graph.unit_ids() {
            let params = live.graph.unit(id)?;
            let g = live
                .gains
                .get(&id)
                .ok_or_else(|| Error::Topology(format!("no gains provided for unit {id}")))?;
            let r = live
                .refs
                .get(&id)
                .ok_or_else(|| Error::Topology(format!("no references provided for unit {id}")))?;
            blocks.push(standalone_equilibrium(params, g, r)?);
        }
        let total: usize = blocks.iter().map(|b| b.len()).sum();
        let mut x = DVector::zeros(total);
        let mut at = 0;
        for b in blocks {
            x.rows_mut(at, b.len()).copy_from(&b);
            at += b.len();
        }
        live.x = x;
        live.rebuild()?;
        Ok(live)
    }

    fn rebuild(&mut self) -> Result<()> {
        self.cluster = if self.graph.is_empty() {
            None
        } else {
            Some(assemble_augmented(&self.graph, &self.gains)?)
        };
        Ok(())
    }

    pub fn ids(&self) -> Vec<UnitId> {
        self.graph.unit_ids()
    }

    /// Units that belong to the cluster proper (not plugged out); these are
    /// the secondary layer's communication nodes.
    pub fn attached_ids(&self) -> Vec<UnitId> {
        self.graph
            .unit_ids()
            .into_iter()
            .filter(|id| !self.detached.contains(id))
            .collect()
    }

    pub fn is_detached(&self, id: UnitId) -> bool {
        self.detached.contains(&id)
    }

    pub fn graph(&self) -> &ElectricalGraph {
        &self.graph
    }

    pub fn refs(&self) -> &BTreeMap<UnitId, References> {
        &self.refs
    }

    pub fn gains(&self) -> &BTreeMap<UnitId, UnitGains> {
        &self.gains
    }

    pub fn cluster(&self) -> Option<&AugmentedCluster> {
        self.cluster.as_ref()
    }

    pub fn state_vector(&self) -> &DVector<f64> {
        &self.x
    }

    /// State block of one live unit.
    pub fn unit_state(&self, id: UnitId) -> Result<DVector<f64>> {
        let cluster = self
            .cluster
            .as_ref()
            .ok_or_else(|| Error::Topology("empty cluster has no unit state".into()))?;
        let off = cluster.offset_of(id)?;
        Ok(self.x.rows(off, cluster.unit_dim).clone_owned())
    }
}

/// Equilibrium of a configuration: state and converter commands.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub ids: Vec<UnitId>,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub state_labels: Vec<String>,
}

/// Equilibrium one unit holds in isolation (own load, no lines) under its
/// own references.
///
/// A grid-feeding unit without a resistive load has no isolated equilibrium
/// (its bus has nowhere to send the commanded current), which surfaces here
/// as a singular solve.
pub fn standalone_equilibrium(
    params: &UnitParams,
    gains: &UnitGains,
    refs: &References,
) -> Result<DVector<f64>> {
    refs.validate()?;
    let check = check_unit_gains(gains, params)?;
    require_valid_gains("standalone unit", &check)?;
    if refs.i_cap != params.cdgu().i_cap {
        return Err(Error::ParamDomain {
            name: "I_cap (references)".into(),
            requirement: "must equal the unit's rated capacity",
            value: refs.i_cap,
        });
    }

    let (f, m, d) = match (params, gains) {
        (UnitParams::Cdgu(p), UnitGains::Cdgu(g)) => {
            let aug = crate::control::augment_cdgu(&crate::model::build_cdgu_local(p, &[])?);
            let f3 = crate::control::closed_loop_cdgu(&aug, g) + aug.a_load;
            let f = DMatrix::from_fn(3, 3, |i, j| f3[(i, j)]);
            let m = DMatrix::from_fn(3, 2, |i, j| aug.m[(i, j)]);
            let d = DVector::from_vec(vec![p.load.i_l, refs.z_ref_current()]);
            (f, m, d)
        }
        (UnitParams::Mg(p), UnitGains::Mg(g)) => {
            let aug = crate::control::augment_mg(&crate::model::build_mg_local(p, &[])?);
            let f5 = crate::control::closed_loop_mg(&aug, g) + aug.a_load;
            let f = DMatrix::from_fn(5, 5, |i, j| f5[(i, j)]);
            let m = DMatrix::from_fn(5, 3, |i, j| aug.m[(i, j)]);
            let d = DVector::from_vec(vec![p.cdgu.load.i_l, refs.z_ref_current(), refs.v_ref]);
            (f, m, d)
        }
        _ => unreachable!("flavor mismatch caught by check_unit_gains"),
    };
    f.lu()
        .solve(&(-(&m * &d)))
        .ok_or_else(|| Error::Singular("isolated closed loop (grid-feeding units need a resistive load)".into()))
}

/// Solves the cluster equilibrium `0 = F x̄ + M d̄` and the matching commands
/// `ū = K x̄`. The integrator rows force the controlled signals onto their
/// references exactly.
pub fn steady_state(
    graph: &ElectricalGraph,
    gains: &BTreeMap<UnitId, UnitGains>,
    refs: &BTreeMap<UnitId, References>,
) -> Result<Equilibrium> {
    let cluster = assemble_augmented(graph, gains)?;
    let d = disturbance_vector(graph, refs)?;
    let rhs = -(&cluster.m * &d);
    let x = cluster
        .f
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("closed-loop equilibrium system".into()))?;
    let u = &cluster.k * &x;
    Ok(Equilibrium {
        ids: cluster.ids.clone(),
        x,
        u,
        state_labels: cluster.state_labels.clone(),
    })
}

/// Connects a unit to the cluster. An id the simulation has never seen joins
/// as a new unit at its isolated equilibrium; an id that was plugged out
/// rejoins with its running state intact (it is the same hardware, so its
/// electrical parameters must match the known record) and fresh gains and
/// references from the payload. Existing blocks are preserved bit for bit
/// either way.
pub fn plug_in(
    state: &LiveState,
    id: UnitId,
    params: UnitParams,
    gains: UnitGains,
    refs: References,
    lines: &[Line],
) -> Result<LiveState> {
    let check = check_unit_gains(&gains, &params)?;
    require_valid_gains(&format!("unit {id}"), &check)?;
    refs.validate()?;
    if refs.i_cap != params.cdgu().i_cap {
        return Err(Error::ParamDomain {
            name: format!("I_cap (unit {id} references)"),
            requirement: "must equal the unit's rated capacity",
            value: refs.i_cap,
        });
    }
    if !state.graph.is_empty() {
        let kind = state.graph.unit(state.ids()[0])?.kind();
        if params.kind() != kind {
            return Err(Error::Topology(format!(
                "cannot plug a {} unit into a {kind} cluster",
                params.kind()
            )));
        }
    }
    for line in lines {
        if !line.touches(id) {
            return Err(Error::Topology(format!(
                "line ({}, {}) does not touch the plugged unit {id}",
                line.a, line.b
            )));
        }
        let other = line.other(id).expect("line touches id");
        if state.detached.contains(&other) {
            return Err(Error::Topology(format!(
                "line endpoint {other} is itself plugged out"
            )));
        }
    }

    if state.graph.unit(id).is_ok() {
        // a plugged-out unit rejoining
        if !state.detached.contains(&id) {
            return Err(Error::DuplicateUnit(id));
        }
        if *state.graph.unit(id)? != params {
            return Err(Error::Topology(format!(
                "unit {id} rejoined with different electrical parameters"
            )));
        }
        let graph = state.graph.with_lines_added(lines)?;
        let mut gains_map = state.gains.clone();
        gains_map.insert(id, gains);
        let mut refs_map = state.refs.clone();
        refs_map.insert(id, refs);
        let mut detached = state.detached.clone();
        detached.remove(&id);
        let mut live = LiveState {
            graph,
            gains: gains_map,
            refs: refs_map,
            cluster: None,
            x: state.x.clone(),
            detached,
        };
        live.rebuild()?;
        return Ok(live);
    }

    let new_block = standalone_equilibrium(&params, &gains, &refs)?;
    let graph = state.graph.with_unit_added(id, params, lines)?;

    let mut gains_map = state.gains.clone();
    gains_map.insert(id, gains);
    let mut refs_map = state.refs.clone();
    refs_map.insert(id, refs);

    let dim = new_block.len();
    let old_ids = state.ids();
    let new_ids = graph.unit_ids();
    let mut x = DVector::zeros(new_ids.len() * dim);
    let mut at = 0;
    for &uid in &new_ids {
        if uid == id {
            x.rows_mut(at, dim).copy_from(&new_block);
        } else {
            let old_idx = old_ids.iter().position(|&u| u == uid).expect("surviving unit");
            x.rows_mut(at, dim).copy_from(&state.x.rows(old_idx * dim, dim));
        }
        at += dim;
    }

    let mut live = LiveState {
        graph,
        gains: gains_map,
        refs: refs_map,
        cluster: None,
        x,
        detached: state.detached.clone(),
    };
    live.rebuild()?;
    Ok(live)
}

/// Plugs a unit out of the cluster: severs its lines and drops it from the
/// secondary layer's reach. The unit itself keeps running standalone on its
/// primary controller, so every state is preserved bit for bit and split
/// components keep integrating independently.
pub fn plug_out(state: &LiveState, id: UnitId) -> Result<LiveState> {
    state.graph.unit(id)?;
    if state.detached.contains(&id) {
        return Err(Error::Topology(format!("unit {id} is already plugged out")));
    }
    let graph = state.graph.with_lines_severed(id)?;
    let mut detached = state.detached.clone();
    detached.insert(id);
    let mut live = LiveState {
        graph,
        gains: state.gains.clone(),
        refs: state.refs.clone(),
        cluster: None,
        x: state.x.clone(),
        detached,
    };
    live.rebuild()?;
    Ok(live)
}

/// Structural and semantic validation of a scenario, run before any
/// integration: solver domains, event ordering, id liveness at event times,
/// gain validity for every unit that ever appears (the plug-and-play
/// contract), reference capacities, and secondary-layer coherence.
pub fn validate_scenario(scenario: &Scenario) -> Result<()> {
    let s = &scenario.solver;
    for (name, v, req) in [
        ("dt", s.dt, "finite and > 0"),
        ("decimation", s.decimation, "finite and > 0"),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::ParamDomain { name: name.into(), requirement: req, value: v });
        }
    }
    if !(s.duration.is_finite() && s.duration >= 0.0) {
        return Err(Error::ParamDomain {
            name: "duration".into(),
            requirement: "finite and >= 0",
            value: s.duration,
        });
    }
    scenario.certificate.validate()?;

    if scenario.graph.is_empty() {
        return Err(Error::Scenario("initial cluster has no units".into()));
    }
    let kind = scenario.graph.unit(scenario.graph.unit_ids()[0])?.kind();
    for (&id, params) in scenario.graph.units() {
        if params.kind() != kind {
            return Err(Error::Scenario(format!(
                "unit {id} is a {} record in a {kind} cluster",
                params.kind()
            )));
        }
        let g = scenario
            .gains
            .get(&id)
            .ok_or_else(|| Error::Scenario(format!("no gains provided for unit {id}")))?;
        require_valid_gains(&format!("unit {id}"), &check_unit_gains(g, params)?)?;
    }
    disturbance_vector(&scenario.graph, &scenario.refs)?;

    // replay the timeline over the evolving topology
    let mut known: BTreeMap<UnitId, UnitParams> = scenario.graph.units().clone();
    let mut detached: BTreeSet<UnitId> = BTreeSet::new();
    let mut line_keys: BTreeSet<(UnitId, UnitId)> =
        scenario.graph.lines().iter().map(|l| l.key()).collect();
    let mut prev_t = 0.0;
    for (t, event) in &scenario.events {
        if !(t.is_finite() && *t >= 0.0) {
            return Err(Error::Scenario(format!("event time {t} is not a finite nonnegative instant")));
        }
        if *t < prev_t {
            return Err(Error::Scenario(format!(
                "events are not time-sorted ({t} after {prev_t})"
            )));
        }
        prev_t = *t;
        if *t > s.duration {
            return Err(Error::Scenario(format!(
                "event at {t} lies beyond the duration {}",
                s.duration
            )));
        }
        match event {
            Event::ConnectUnit { id, params, gains, refs, lines } => {
                params.validate()?;
                if params.kind() != kind {
                    return Err(Error::Scenario(format!(
                        "connect event at {t} plugs a {} unit into a {kind} cluster",
                        params.kind()
                    )));
                }
                require_valid_gains(&format!("unit {id}"), &check_unit_gains(gains, params)?)?;
                refs.validate()?;
                if refs.i_cap != params.cdgu().i_cap {
                    return Err(Error::Scenario(format!(
                        "connect event at {t}: references carry I_cap {} but unit {id} is rated {}",
                        refs.i_cap,
                        params.cdgu().i_cap
                    )));
                }
                match known.get(id) {
                    Some(_) if !detached.contains(id) => {
                        return Err(Error::Scenario(format!(
                            "connect event at {t} duplicates connected unit {id}"
                        )));
                    }
                    Some(existing) if existing != params => {
                        return Err(Error::Scenario(format!(
                            "connect event at {t} rejoins unit {id} with different \
                             electrical parameters"
                        )));
                    }
                    _ => {}
                }
                for line in lines {
                    line.validate()?;
                    if !line.touches(*id) {
                        return Err(Error::Scenario(format!(
                            "connect event at {t}: line ({}, {}) does not touch unit {id}",
                            line.a, line.b
                        )));
                    }
                    let other = line.other(*id).expect("line touches id");
                    if !known.contains_key(&other) || detached.contains(&other) || other == *id {
                        return Err(Error::Scenario(format!(
                            "connect event at {t}: line endpoint {other} is not a connected unit"
                        )));
                    }
                    if !line_keys.insert(line.key()) {
                        return Err(Error::Scenario(format!(
                            "connect event at {t}: duplicate line between {} and {}",
                            line.a, line.b
                        )));
                    }
                }
                known.insert(*id, *params);
                detached.remove(id);
            }
            Event::DisconnectUnit { id } => {
                if !known.contains_key(id) {
                    return Err(Error::Scenario(format!(
                        "disconnect event at {t} references unknown unit {id}"
                    )));
                }
                if !detached.insert(*id) {
                    return Err(Error::Scenario(format!(
                        "disconnect event at {t}: unit {id} is already plugged out"
                    )));
                }
                line_keys.retain(|&(a, b)| a != *id && b != *id);
            }
            Event::SetPrimaryRef { id, change } => {
                if !known.contains_key(id) {
                    return Err(Error::Scenario(format!(
                        "reference event at {t} references unknown unit {id}"
                    )));
                }
                let v = match change {
                    RefChange::Voltage(v) | RefChange::CurrentPu(v) => *v,
                };
                if !v.is_finite() {
                    return Err(Error::Scenario(format!(
                        "reference event at {t} carries a non-finite value"
                    )));
                }
            }
            Event::SetLeaderRef { change } => {
                if scenario.secondary.is_none() {
                    return Err(Error::Scenario(format!(
                        "leader event at {t} but no secondary layer is configured"
                    )));
                }
                let v = match change {
                    RefChange::Voltage(v) | RefChange::CurrentPu(v) => *v,
                };
                if !v.is_finite() {
                    return Err(Error::Scenario(format!(
                        "leader event at {t} carries a non-finite value"
                    )));
                }
            }
            Event::EnableSecondary { .. } | Event::DisableSecondary { .. } => {
                if scenario.secondary.is_none() {
                    return Err(Error::Scenario(format!(
                        "secondary event at {t} but no secondary layer is configured"
                    )));
                }
            }
            Event::SetLoad { id, change } => {
                if !known.contains_key(id) {
                    return Err(Error::Scenario(format!(
                        "load event at {t} references unknown unit {id}"
                    )));
                }
                match change {
                    LoadChange::CurrentDraw(i) if !i.is_finite() => {
                        return Err(Error::Scenario(format!(
                            "load event at {t} carries a non-finite draw"
                        )));
                    }
                    LoadChange::Resistance(Some(r)) if !(r.is_finite() && *r > 0.0) => {
                        return Err(Error::Scenario(format!(
                            "load event at {t} carries a non-positive resistance"
                        )));
                    }
                    _ => {}
                }
            }
        }
    }

    if let Some(sec) = &scenario.secondary {
        if kind != ClusterKind::MgCluster {
            return Err(Error::Scenario(
                "the secondary layer shifts voltage references, which grid-feeding-only \
                 clusters do not have"
                    .into(),
            ));
        }
        sec.gains.validate()?;
        sec.leader.validate()?;
        if !(sec.period.is_finite() && sec.period > 0.0) {
            return Err(Error::ParamDomain {
                name: "secondary period".into(),
                requirement: "finite and > 0",
                value: sec.period,
            });
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &sec.edges {
            if a == b {
                return Err(Error::Scenario(format!("communication self-loop at unit {a}")));
            }
            for end in [a, b] {
                if !known.contains_key(&end) {
                    return Err(Error::Scenario(format!(
                        "communication edge ({a}, {b}) references unknown unit {end}"
                    )));
                }
            }
            let key = if a <= b { (a, b) } else { (b, a) };
            if !seen.insert(key) {
                return Err(Error::Scenario(format!(
                    "duplicate communication edge between {a} and {b}"
                )));
            }
        }
        for p in &sec.pinned {
            if !known.contains_key(p) {
                return Err(Error::Scenario(format!(
                    "pinned unit {p} never exists in this scenario"
                )));
            }
        }
    }
    Ok(())
}

/// Live secondary layer: configuration, per-channel PI state mapped onto the
/// current unit set, and the latest outputs.
struct SecondaryRuntime {
    edges: Vec<(UnitId, UnitId)>,
    pinned: Vec<UnitId>,
    gains: SecondaryGains,
    leader: LeaderReference,
    period: f64,
    voltage_on: bool,
    current_on: bool,
    node_ids: Vec<UnitId>,
    comm: Option<CommGraph>,
    state: SecondaryState,
    last_e_v: DVector<f64>,
    last_e_c: DVector<f64>,
}

impl SecondaryRuntime {
    fn new(cfg: &SecondaryConfig, live_ids: &[UnitId]) -> Result<Self> {
        let mut rt = Self {
            edges: cfg.edges.clone(),
            pinned: cfg.pinned.clone(),
            gains: cfg.gains,
            leader: cfg.leader,
            period: cfg.period,
            voltage_on: cfg.voltage_enabled,
            current_on: cfg.current_enabled,
            node_ids: Vec::new(),
            comm: None,
            state: SecondaryState::new(0),
            last_e_v: DVector::zeros(0),
            last_e_c: DVector::zeros(0),
        };
        rt.rebuild_for(live_ids)?;
        Ok(rt)
    }

    fn any_on(&self) -> bool {
        self.voltage_on || self.current_on
    }

    /// Re-derives the induced communication graph after a topology change,
    /// carrying surviving units' integrators over and starting newcomers at
    /// zero.
    fn rebuild_for(&mut self, live_ids: &[UnitId]) -> Result<()> {
        let old_ids = std::mem::take(&mut self.node_ids);
        let old_state = std::mem::replace(&mut self.state, SecondaryState::new(live_ids.len()));
        self.node_ids = live_ids.to_vec();

        for (new_idx, id) in self.node_ids.iter().enumerate() {
            if let Some(old_idx) = old_ids.iter().position(|u| u == id) {
                self.state.voltage.copy_entry_from(&old_state.voltage, new_idx, old_idx);
                self.state.current.copy_entry_from(&old_state.current, new_idx, old_idx);
            }
        }

        self.comm = if self.node_ids.is_empty() {
            None
        } else {
            let index_of: BTreeMap<UnitId, usize> =
                self.node_ids.iter().copied().zip(0..).collect();
            let edges: Vec<(usize, usize)> = self
                .edges
                .iter()
                .filter_map(|&(a, b)| Some((*index_of.get(&a)?, *index_of.get(&b)?)))
                .collect();
            let pinned: Vec<usize> = self
                .pinned
                .iter()
                .filter_map(|p| index_of.get(p).copied())
                .collect();
            Some(CommGraph::new(self.node_ids.len(), &edges, &pinned)?)
        };
        self.last_e_v = DVector::zeros(self.node_ids.len());
        self.last_e_c = DVector::zeros(self.node_ids.len());
        self.require_coverage_if_on()
    }

    /// An enabled layer must be able to steer every live unit: the induced
    /// graph needs a pinned node in every component.
    fn require_coverage_if_on(&self) -> Result<()> {
        if !self.any_on() {
            return Ok(());
        }
        let comm = self.comm.as_ref().ok_or_else(|| {
            Error::CommGraph("secondary layer enabled but no units are live".into())
        })?;
        let verdict = check_lg_pd(comm);
        if verdict.positive_definite {
            Ok(())
        } else {
            Err(Error::CommGraph(format!(
                "secondary layer cannot steer the live cluster: {}",
                verdict.diagnosis.unwrap_or_default()
            )))
        }
    }

    /// Flips one channel. Disabling zeroes that channel's integrator and
    /// correction, so the primary references take over immediately.
    fn set_channel(&mut self, channel: Channel, on: bool) -> Result<()> {
        let n = self.node_ids.len();
        match channel {
            Channel::Voltage => {
                self.voltage_on = on;
                if !on {
                    self.state.voltage = crate::consensus::ChannelState::new(n);
                    self.last_e_v = DVector::zeros(n);
                }
            }
            Channel::Current => {
                self.current_on = on;
                if !on {
                    self.state.current = crate::consensus::ChannelState::new(n);
                    self.last_e_c = DVector::zeros(n);
                }
            }
        }
        self.require_coverage_if_on()
    }

    /// One communication round: consensus errors from the live measurements,
    /// PI update, corrections held until the next round. Disabled channels
    /// see a zero error, keeping their state at rest.
    fn tick(&mut self, live: &LiveState) -> Result<()> {
        if !self.any_on() {
            return Ok(());
        }
        let comm = self.comm.as_ref().expect("coverage checked on enable");
        let cluster = live.cluster().expect("live units exist when comm exists");
        let n = self.node_ids.len();
        let mut v = DVector::zeros(n);
        let mut i_pu = DVector::zeros(n);
        for (idx, id) in self.node_ids.iter().enumerate() {
            let off = cluster.offset_of(*id)?;
            let i_cap = live.graph.unit(*id)?.cdgu().i_cap;
            v[idx] = live.x[off];
            i_pu[idx] = live.x[off + 1] / i_cap;
        }
        let (e_v, e_c) = consensus_errors(comm, &v, &i_pu, &self.leader)?;
        let masked_v = if self.voltage_on { e_v.clone() } else { DVector::zeros(n) };
        let masked_c = if self.current_on { e_c.clone() } else { DVector::zeros(n) };
        let (_, _, next) = pi_update(&self.state, &masked_v, &masked_c, &self.gains, self.period)?;
        self.state = next;
        self.last_e_v = masked_v;
        self.last_e_c = masked_c;
        Ok(())
    }

    fn delta_for(&self, id: UnitId) -> (f64, f64) {
        match self.node_ids.iter().position(|u| *u == id) {
            Some(i) => (self.state.voltage.delta[i], self.state.current.delta[i]),
            None => (0.0, 0.0),
        }
    }

    fn errors_for(&self, id: UnitId) -> (f64, f64) {
        match self.node_ids.iter().position(|u| *u == id) {
            Some(i) => (self.last_e_v[i], self.last_e_c[i]),
            None => (0.0, 0.0),
        }
    }
}

/// Preallocated RK4 work space for `ẋ = F x + c`.
struct Rk4 {
    k1: DVector<f64>,
    k2: DVector<f64>,
    k3: DVector<f64>,
    k4: DVector<f64>,
    tmp: DVector<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k1: DVector::zeros(n),
            k2: DVector::zeros(n),
            k3: DVector::zeros(n),
            k4: DVector::zeros(n),
            tmp: DVector::zeros(n),
        }
    }

    fn step(&mut self, f: &DMatrix<f64>, c: &DVector<f64>, x: &mut DVector<f64>, h: f64) {
        self.k1.copy_from(c);
        self.k1.gemv(1.0, f, x, 1.0);
        self.tmp.copy_from(x);
        self.tmp.axpy(h / 2.0, &self.k1, 1.0);
        self.k2.copy_from(c);
        self.k2.gemv(1.0, f, &self.tmp, 1.0);
        self.tmp.copy_from(x);
        self.tmp.axpy(h / 2.0, &self.k2, 1.0);
        self.k3.copy_from(c);
        self.k3.gemv(1.0, f, &self.tmp, 1.0);
        self.tmp.copy_from(x);
        self.tmp.axpy(h, &self.k3, 1.0);
        self.k4.copy_from(c);
        self.k4.gemv(1.0, f, &self.tmp, 1.0);
        x.axpy(h / 6.0, &self.k1, 1.0);
        x.axpy(h / 3.0, &self.k2, 1.0);
        x.axpy(h / 3.0, &self.k3, 1.0);
        x.axpy(h / 6.0, &self.k4, 1.0);
    }
}

/// The effective references seen by the primary layer: primary values plus
/// the held secondary corrections.
fn effective_refs(
    live: &LiveState,
    sec: Option<&SecondaryRuntime>,
) -> BTreeMap<UnitId, References> {
    let mut out = live.refs.clone();
    if let Some(sec) = sec {
        for (id, r) in out.iter_mut() {
            let (dv, dc) = sec.delta_for(*id);
            r.v_ref += dv;
            r.i_ref_pu += dc;
        }
    }
    out
}

/// The constant forcing term `M d` of the current segment.
fn drive_term(live: &LiveState, sec: Option<&SecondaryRuntime>) -> Result<DVector<f64>> {
    match live.cluster() {
        Some(cluster) => {
            let refs = effective_refs(live, sec);
            let d = disturbance_vector(&live.graph, &refs)?;
            Ok(&cluster.m * d)
        }
        None => Ok(DVector::zeros(0)),
    }
}

fn sample(live: &LiveState, sec: Option<&SecondaryRuntime>, t: f64) -> Result<TraceRecord> {
    let mut units = Vec::new();
    if let Some(cluster) = live.cluster() {
        for &id in &cluster.ids {
            let off = cluster.offset_of(id)?;
            let params = live.graph.unit(id)?;
            let gains = &live.gains[&id];
            let block = live.x.rows(off, cluster.unit_dim).clone_owned();
            let u = control_input(gains, &block)?;
            let i_cap = params.cdgu().i_cap;
            let (delta_v, delta_i_pu) = sec.map_or((0.0, 0.0), |s| s.delta_for(id));
            let (e_v, e_c) = sec.map_or((0.0, 0.0), |s| s.errors_for(id));
            let mg = matches!(params, UnitParams::Mg(_));
            units.push(UnitSample {
                id,
                v: block[0],
                i_c: block[1],
                i_c_pu: block[1] / i_cap,
                i_v: mg.then(|| block[3]),
                u_c: u[0],
                u_v: mg.then(|| u[1]),
                delta_v,
                delta_i_pu,
                e_v,
                e_c,
            });
        }
    }
    Ok(TraceRecord { t, units })
}

/// Merged, sorted, deduplicated boundary instants of a run.
fn boundaries(scenario: &Scenario) -> Vec<f64> {
    let duration = scenario.solver.duration;
    let mut times = vec![0.0, duration];
    for (t, _) in &scenario.events {
        times.push(*t);
    }
    let mut push_grid = |step: f64| {
        let mut k = 0u64;
        loop {
            let t = k as f64 * step;
            if t > duration {
                break;
            }
            times.push(t);
            k += 1;
        }
    };
    push_grid(scenario.solver.decimation);
    if let Some(sec) = &scenario.secondary {
        push_grid(sec.period);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite boundary times"));
    times.dedup();
    times
}

/// Runs a scenario end to end.
///
/// At every boundary instant the order is fixed: apply the events scheduled
/// there, rebuild what they touched, run a secondary round if the instant is
/// on the communication grid, then sample. A topology change starts a new
/// trace epoch.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    validate_scenario(scenario)?;
    let duration = scenario.solver.duration;
    let dt = scenario.solver.dt;

    let mut live = LiveState::new(
        scenario.graph.clone(),
        scenario.gains.clone(),
        scenario.refs.clone(),
    )?;
    let mut sec = match &scenario.secondary {
        Some(cfg) => Some(SecondaryRuntime::new(cfg, &live.attached_ids())?),
        None => None,
    };

    let mut trace = Trace::default();
    trace.epochs.push(TraceEpoch { unit_ids: live.ids(), records: Vec::new() });
    let emit_records = duration > 0.0;

    let bounds = boundaries(scenario);
    let mut ev_idx = 0;
    let mut rk4 = Rk4::new(live.x.len());

    let mut next_tick = 0u64;
    let mut next_sample = 0u64;
    let tick_period = scenario.secondary.as_ref().map(|s| s.period);

    for (bi, &t) in bounds.iter().enumerate() {
        // integrate up to this boundary
        if bi > 0 {
            let t_prev = bounds[bi - 1];
            let span = t - t_prev;
            if span > 0.0 && live.cluster.is_some() {
                let c = drive_term(&live, sec.as_ref())?;
                let steps = (span / dt).round().max(1.0) as u64;
                let h = span / steps as f64;
                let LiveState { cluster, x, .. } = &mut live;
                let cluster = cluster.as_ref().expect("checked above");
                for s in 0..steps {
                    rk4.step(&cluster.f, &c, x, h);
                    let peak = x.amax();
                    if peak > DIVERGENCE_LIMIT || peak.is_nan() {
                        let idx = (0..x.len())
                            .max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()))
                            .unwrap_or(0);
                        return Err(Error::Diverged {
                            t: t_prev + (s + 1) as f64 * h,
                            label: cluster.state_labels[idx].clone(),
                            value: x[idx],
                            limit: DIVERGENCE_LIMIT,
                        });
                    }
                }
            }
        }

        // events scheduled exactly here
        let mut topology_changed = false;
        while ev_idx < scenario.events.len() && scenario.events[ev_idx].0 <= t {
            let event = scenario.events[ev_idx].1.clone();
            ev_idx += 1;
            match event {
                Event::ConnectUnit { id, params, gains, refs, lines } => {
                    live = plug_in(&live, id, params, gains, refs, &lines)?;
                    topology_changed = true;
                }
                Event::DisconnectUnit { id } => {
                    live = plug_out(&live, id)?;
                    topology_changed = true;
                }
                Event::SetPrimaryRef { id, change } => {
                    let r = live.refs.get_mut(&id).ok_or(Error::UnknownUnit(id))?;
                    match change {
                        RefChange::Voltage(v) => r.v_ref = v,
                        RefChange::CurrentPu(v) => r.i_ref_pu = v,
                    }
                }
                Event::SetLeaderRef { change } => {
                    let sec = sec.as_mut().expect("validated: secondary configured");
                    match change {
                        RefChange::Voltage(v) => sec.leader.v_ref = v,
                        RefChange::CurrentPu(v) => sec.leader.i_ref_pu = v,
                    }
                }
                Event::EnableSecondary { channel } => {
                    sec.as_mut()
                        .expect("validated: secondary configured")
                        .set_channel(channel, true)?;
                }
                Event::DisableSecondary { channel } => {
                    sec.as_mut()
                        .expect("validated: secondary configured")
                        .set_channel(channel, false)?;
                }
                Event::SetLoad { id, change } => {
                    let mut load = live.graph.unit(id)?.cdgu().load;
                    match change {
                        LoadChange::CurrentDraw(i) => load.i_l = i,
                        LoadChange::Resistance(r) => load.r_l = r,
                    }
                    live.graph = live.graph.with_load(id, load)?;
                    live.rebuild()?;
                }
            }
        }

        if topology_changed {
            if let Some(sec) = sec.as_mut() {
                sec.rebuild_for(&live.attached_ids())?;
            }
            if rk4.k1.len() != live.x.len() {
                rk4 = Rk4::new(live.x.len());
            }
            let ids = live.ids();
            if trace.epochs.last().map(|e| &e.unit_ids) != Some(&ids) {
                trace.epochs.push(TraceEpoch { unit_ids: ids, records: Vec::new() });
            }
        }

        // secondary round on its grid
        if let Some(period) = tick_period {
            let tick_t = next_tick as f64 * period;
            if t == tick_t {
                if let Some(sec) = sec.as_mut() {
                    if live.cluster().is_some() {
                        sec.tick(&live)?;
                    }
                }
                next_tick += 1;
            }
        }

        // sample on the decimation grid, at epoch starts, and at the end
        let sample_t = next_sample as f64 * scenario.solver.decimation;
        let on_sample_grid = t == sample_t;
        if on_sample_grid {
            next_sample += 1;
        }
        if emit_records && (on_sample_grid || topology_changed || t == duration) {
            let record = sample(&live, sec.as_ref(), t)?;
            trace.epochs.last_mut().expect("epoch exists").records.push(record);
        }
    }

    // units are never destroyed, so the final graph is always non-empty
    let report = verify_global_stability(&live.graph, &live.gains, &scenario.certificate)?;

    Ok(RunOutput {
        report,
        final_ids: live.ids(),
        final_state: live.x.clone(),
        trace,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::CdguGains;
    use crate::model::{CdguParams, Load};
    use crate::presets::{self, table};

    fn close_rel(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol * b.abs().max(1.0), "{a} vs {b}");
    }

    fn single_mg_scenario() -> Scenario {
        let mut units = BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Mg(table::mg_params(5.0)));
        let graph = ElectricalGraph::new(units, vec![]).unwrap();
        let mut gains = BTreeMap::new();
        gains.insert(UnitId(1), UnitGains::Mg(table::mg_gains()));
        let mut refs = BTreeMap::new();
        refs.insert(UnitId(1), References { v_ref: 48.0, i_ref_pu: 0.2, i_cap: 5.0 });
        Scenario {
            graph,
            gains,
            refs,
            events: vec![],
            solver: SolverSettings { duration: 1.0, ..Default::default() },
            secondary: None,
            certificate: CertificateConfig::default(),
        }
    }

    #[test]
    fn standalone_equilibrium_matches_hand_solve() {
        let x = standalone_equilibrium(
            &UnitParams::Mg(table::mg_params(5.0)),
            &UnitGains::Mg(table::mg_gains()),
            &References { v_ref: 48.0, i_ref_pu: 0.2, i_cap: 5.0 },
        )
        .unwrap();
        let expect = [48.0, 1.0, 1.271762644239, 1.4, 2.325537117334];
        for (got, want) in x.iter().zip(expect) {
            close_rel(*got, want, 1e-9);
        }
        let u = control_input(&UnitGains::Mg(table::mg_gains()), &x).unwrap();
        close_rel(u[0], 48.2, 1e-9);
        close_rel(u[1], 48.14, 1e-9);
    }

    #[test]
    fn loadless_grid_feeder_has_no_isolated_equilibrium() {
        let params = UnitParams::Cdgu(CdguParams {
            load: Load { r_l: None, i_l: 0.0 },
            ..table::cdgu_params(5.0)
        });
        let out = standalone_equilibrium(
            &params,
            &UnitGains::Cdgu(table::cdgu_gains()),
            &References { v_ref: 48.0, i_ref_pu: 0.2, i_cap: 5.0 },
        );
        assert!(matches!(out, Err(Error::Singular(_))));
    }

    #[test]
    fn unit_at_equilibrium_stays_put() {
        let out = run(&single_mg_scenario()).unwrap();
        let first = out.trace.records().next().unwrap().clone();
        for rec in out.trace.records() {
            assert!((rec.units[0].v - first.units[0].v).abs() < 1e-9);
            assert!((rec.units[0].i_c - first.units[0].i_c).abs() < 1e-9);
            assert!((rec.units[0].i_v.unwrap() - first.units[0].i_v.unwrap()).abs() < 1e-9);
        }
        assert_eq!(out.trace.record_count(), 1001);
        assert!(out.report.certified);
    }

    #[test]
    fn ring_steady_state_matches_kirchhoff() {
        let graph = presets::ring_graph();
        let gains = presets::ring_gains();
        let mut refs = BTreeMap::new();
        for (i, (v, cap)) in [(48.0, 5.0), (47.9, 10.0), (48.1, 15.0), (47.95, 20.0)]
            .iter()
            .enumerate()
        {
            refs.insert(
                UnitId(i as u32 + 1),
                References { v_ref: *v, i_ref_pu: 0.2, i_cap: *cap },
            );
        }
        let eq = steady_state(&graph, &gains, &refs).unwrap();
        let expect_unit2 = [47.9, 2.0, 1.341078862823, -0.271666666666, 2.309376107108];
        for (k, want) in expect_unit2.iter().enumerate() {
            close_rel(eq.x[5 + k], *want, 1e-9);
        }
        // voltage integrators pin the buses exactly
        for (i, v) in [48.0, 47.9, 48.1, 47.95].iter().enumerate() {
            close_rel(eq.x[5 * i], *v, 1e-12);
        }
        // node balance: injections equal load plus line flows
        for (i, id) in graph.unit_ids().iter().enumerate() {
            let v_i = eq.x[5 * i];
            let mut inj = eq.x[5 * i + 1] + eq.x[5 * i + 3] - v_i / 20.0;
            for line in graph.neighbor_lines(*id) {
                let other = line.other(*id).unwrap();
                let j = graph.unit_ids().iter().position(|u| *u == other).unwrap();
                inj += (eq.x[5 * j] - v_i) / line.r;
            }
            assert!(inj.abs() < 1e-10, "node {id} imbalance {inj}");
        }
    }

    #[test]
    fn plug_events_preserve_states_bit_for_bit() {
        let s = single_mg_scenario();
        let live = LiveState::new(s.graph.clone(), s.gains.clone(), s.refs.clone()).unwrap();
        let before = live.unit_state(UnitId(1)).unwrap();

        let payload = (
            UnitParams::Mg(table::mg_params(10.0)),
            UnitGains::Mg(table::mg_gains()),
            References { v_ref: 47.9, i_ref_pu: 0.2, i_cap: 10.0 },
            [Line { a: UnitId(2), b: UnitId(1), r: 0.3, l: 1.8e-3 }],
        );
        let grown = plug_in(&live, UnitId(2), payload.0, payload.1, payload.2, &payload.3)
            .unwrap();
        assert_eq!(grown.unit_state(UnitId(1)).unwrap(), before);
        assert_eq!(grown.ids(), vec![UnitId(1), UnitId(2)]);
        assert!(grown.graph().is_connected());

        // plugging out severs the lines but keeps the unit running
        let severed = plug_out(&grown, UnitId(2)).unwrap();
        assert_eq!(severed.ids(), vec![UnitId(1), UnitId(2)]);
        assert!(severed.is_detached(UnitId(2)));
        assert_eq!(severed.attached_ids(), vec![UnitId(1)]);
        assert!(severed.graph().neighbor_lines(UnitId(2)).is_empty());
        assert_eq!(severed.state_vector(), grown.state_vector());
        assert!(matches!(
            plug_out(&severed, UnitId(2)),
            Err(Error::Topology(_))
        ));
        assert!(matches!(
            plug_out(&severed, UnitId(9)),
            Err(Error::UnknownUnit(_))
        ));

        // rejoining keeps the running state instead of re-initializing
        let back = plug_in(&severed, UnitId(2), payload.0, payload.1, payload.2, &payload.3)
            .unwrap();
        assert_eq!(back.state_vector(), severed.state_vector());
        assert!(!back.is_detached(UnitId(2)));
        assert!(back.graph().is_connected());
        assert!(matches!(
            plug_in(&back, UnitId(2), payload.0, payload.1, payload.2, &payload.3),
            Err(Error::DuplicateUnit(_))
        ));
    }

    #[test]
    fn plugged_pair_converges_to_the_joint_equilibrium() {
        let mut s = single_mg_scenario();
        s.solver = SolverSettings { dt: 2e-5, duration: 3.0, ..Default::default() };
        s.events = vec![(
            0.5,
            Event::ConnectUnit {
                id: UnitId(2),
                params: UnitParams::Mg(table::mg_params(10.0)),
                gains: UnitGains::Mg(table::mg_gains()),
                refs: References { v_ref: 47.9, i_ref_pu: 0.3, i_cap: 10.0 },
                lines: vec![Line { a: UnitId(2), b: UnitId(1), r: 0.3, l: 1.8e-3 }],
            },
        )];
        let out = run(&s).unwrap();
        assert_eq!(out.trace.epochs.len(), 2);

        let mut graph = s.graph.clone();
        graph = graph
            .with_unit_added(
                UnitId(2),
                UnitParams::Mg(table::mg_params(10.0)),
                &[Line { a: UnitId(2), b: UnitId(1), r: 0.3, l: 1.8e-3 }],
            )
            .unwrap();
        let mut gains = s.gains.clone();
        gains.insert(UnitId(2), UnitGains::Mg(table::mg_gains()));
        let mut refs = s.refs.clone();
        refs.insert(UnitId(2), References { v_ref: 47.9, i_ref_pu: 0.3, i_cap: 10.0 });
        let eq = steady_state(&graph, &gains, &refs).unwrap();
        for k in 0..10 {
            close_rel(out.final_state[k], eq.x[k], 1e-6);
        }
    }

    #[test]
    fn reference_step_keeps_the_state_continuous() {
        let mut with_step = single_mg_scenario();
        with_step.solver = SolverSettings { dt: 1e-4, duration: 1.5, ..Default::default() };
        with_step.events = vec![(
            0.3,
            Event::SetPrimaryRef { id: UnitId(1), change: RefChange::CurrentPu(0.5) },
        )];
        let without = Scenario { events: vec![], ..with_step.clone() };

        let a = run(&with_step).unwrap();
        let b = run(&without).unwrap();
        let at = |out: &RunOutput, t: f64| {
            out.trace
                .records()
                .find(|r| r.t == t)
                .unwrap_or_else(|| panic!("no record at {t}"))
                .clone()
        };
        // identical up to and including the event instant
        assert_eq!(at(&a, 0.3).units, at(&b, 0.3).units);
        // diverging afterwards
        assert_ne!(at(&a, 0.4).units[0].i_c, at(&b, 0.4).units[0].i_c);
        // and settling on the new current reference
        let last = a.trace.last_record().unwrap();
        close_rel(last.units[0].i_c, 2.5, 1e-6);
    }

    #[test]
    fn no_op_event_changes_nothing() {
        let mut with_noop = single_mg_scenario();
        with_noop.solver.dt = 1e-4;
        with_noop.events = vec![(
            0.5,
            Event::SetPrimaryRef { id: UnitId(1), change: RefChange::CurrentPu(0.2) },
        )];
        let without = Scenario { events: vec![], ..with_noop.clone() };
        let a = run(&with_noop).unwrap();
        let b = run(&without).unwrap();
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn runs_are_bit_identical() {
        let mut s = single_mg_scenario();
        s.solver.dt = 1e-4;
        s.events = vec![(
            0.25,
            Event::SetPrimaryRef { id: UnitId(1), change: RefChange::Voltage(48.5) },
        )];
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn load_change_shifts_the_equilibrium() {
        let mut s = single_mg_scenario();
        s.solver = SolverSettings { dt: 2e-5, duration: 2.0, ..Default::default() };
        s.events = vec![(0.5, Event::SetLoad { id: UnitId(1), change: LoadChange::CurrentDraw(2.0) })];
        let out = run(&s).unwrap();
        // voltage integrator still pins the bus; the feeder current picks up
        // the draw since the references did not move
        let last = out.trace.last_record().unwrap();
        close_rel(last.units[0].v, 48.0, 1e-6);
        let i_total = last.units[0].i_c + last.units[0].i_v.unwrap();
        close_rel(i_total, 48.0 / 20.0 + 2.0, 1e-5);
    }

    #[test]
    fn divergence_guard_names_the_signal() {
        let mut s = single_mg_scenario();
        s.solver = SolverSettings { dt: 1e-4, duration: 2.0, ..Default::default() };
        s.events = vec![(
            0.1,
            Event::SetPrimaryRef { id: UnitId(1), change: RefChange::Voltage(5e6) },
        )];
        match run(&s) {
            Err(Error::Diverged { t, label, .. }) => {
                assert!(t > 0.1 && t <= 2.0, "diverged at {t}");
                assert!(label.contains("[1]"), "{label}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_duration_yields_an_empty_trace() {
        let mut s = single_mg_scenario();
        s.solver.duration = 0.0;
        let out = run(&s).unwrap();
        assert_eq!(out.trace.epochs.len(), 1);
        assert_eq!(out.trace.record_count(), 0);
        assert_eq!(out.trace.epochs[0].unit_ids, vec![UnitId(1)]);
    }

    #[test]
    fn secondary_pair_tracks_the_leader() {
        let mut units = BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Mg(table::mg_params(5.0)));
        units.insert(UnitId(2), UnitParams::Mg(table::mg_params(10.0)));
        let graph = ElectricalGraph::new(
            units,
            vec![Line { a: UnitId(1), b: UnitId(2), r: 0.3, l: 1.8e-3 }],
        )
        .unwrap();
        let mut gains = BTreeMap::new();
        gains.insert(UnitId(1), UnitGains::Mg(table::mg_gains()));
        gains.insert(UnitId(2), UnitGains::Mg(table::mg_gains()));
        let mut refs = BTreeMap::new();
        refs.insert(UnitId(1), References { v_ref: 47.9, i_ref_pu: 0.2, i_cap: 5.0 });
        refs.insert(UnitId(2), References { v_ref: 48.1, i_ref_pu: 0.3, i_cap: 10.0 });
        let s = Scenario {
            graph,
            gains,
            refs,
            events: vec![],
            solver: SolverSettings { dt: 2e-5, duration: 3.0, ..Default::default() },
            secondary: Some(SecondaryConfig {
                edges: vec![(UnitId(1), UnitId(2))],
                pinned: vec![UnitId(1)],
                gains: table::secondary_gains(),
                leader: LeaderReference { v_ref: 48.0, i_ref_pu: 0.25 },
                period: 0.01,
                voltage_enabled: true,
                current_enabled: true,
            }),
            certificate: CertificateConfig::default(),
        };
        let out = run(&s).unwrap();
        let last = out.trace.last_record().unwrap();
        for u in &last.units {
            close_rel(u.v, 48.0, 2e-4);
            close_rel(u.i_c_pu, 0.25, 2e-4);
            assert!(u.delta_v.abs() > 1e-6 || u.delta_i_pu.abs() > 1e-6);
        }
    }

    #[test]
    fn unsteerable_secondary_halts_the_run() {
        let mut s = single_mg_scenario();
        s.secondary = Some(SecondaryConfig {
            edges: vec![],
            pinned: vec![],
            gains: table::secondary_gains(),
            leader: LeaderReference { v_ref: 48.0, i_ref_pu: 0.2 },
            period: 0.01,
            voltage_enabled: true,
            current_enabled: false,
        });
        assert!(matches!(run(&s), Err(Error::CommGraph(_))));
    }

    #[test]
    fn validation_rejects_malformed_scenarios() {
        let base = single_mg_scenario();

        let mut s = base.clone();
        s.solver.dt = 0.0;
        assert!(validate_scenario(&s).is_err());

        let mut s = base.clone();
        s.events = vec![
            (0.8, Event::SetPrimaryRef { id: UnitId(1), change: RefChange::Voltage(48.0) }),
            (0.2, Event::SetPrimaryRef { id: UnitId(1), change: RefChange::Voltage(48.0) }),
        ];
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));

        let mut s = base.clone();
        s.events = vec![(
            2.0,
            Event::SetPrimaryRef { id: UnitId(1), change: RefChange::Voltage(48.0) },
        )];
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));

        let mut s = base.clone();
        s.events = vec![(
            0.5,
            Event::SetPrimaryRef { id: UnitId(9), change: RefChange::Voltage(48.0) },
        )];
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));

        let mut s = base.clone();
        s.events = vec![(0.5, Event::EnableSecondary { channel: Channel::Voltage })];
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));

        let mut s = base.clone();
        if let Some(r) = s.refs.get_mut(&UnitId(1)) {
            r.i_cap = 7.0;
        }
        assert!(validate_scenario(&s).is_err());

        let mut s = base.clone();
        if let Some(UnitGains::Mg(g)) = s.gains.get_mut(&UnitId(1)) {
            g.k3v = -1.0;
        }
        match validate_scenario(&s) {
            Err(Error::GainsRejected { who, .. }) => assert!(who.contains('1')),
            other => panic!("expected gains rejection, got {other:?}"),
        }

        // grid-feeding-only cluster cannot host the secondary layer
        let mut units = BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Cdgu(table::cdgu_params(5.0)));
        let graph = ElectricalGraph::new(units, vec![]).unwrap();
        let mut gains = BTreeMap::new();
        gains.insert(UnitId(1), UnitGains::Cdgu(CdguGains { ..table::cdgu_gains() }));
        let mut refs = BTreeMap::new();
        refs.insert(UnitId(1), References { v_ref: 48.0, i_ref_pu: 0.2, i_cap: 5.0 });
        let s = Scenario {
            graph,
            gains,
            refs,
            events: vec![],
            solver: SolverSettings::default(),
            secondary: base.secondary.clone().or(Some(SecondaryConfig {
                edges: vec![],
                pinned: vec![UnitId(1)],
                gains: table::secondary_gains(),
                leader: LeaderReference { v_ref: 48.0, i_ref_pu: 0.2 },
                period: 0.01,
                voltage_enabled: false,
                current_enabled: false,
            })),
            certificate: CertificateConfig::default(),
        };
        assert!(matches!(validate_scenario(&s), Err(Error::Scenario(_))));
    }

    #[test]
    fn grid_feeding_cluster_runs_standalone() {
        let mut units = BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Cdgu(table::cdgu_params(5.0)));
        let graph = ElectricalGraph::new(units, vec![]).unwrap();
        let mut gains = BTreeMap::new();
        gains.insert(UnitId(1), UnitGains::Cdgu(table::cdgu_gains()));
        let mut refs = BTreeMap::new();
        refs.insert(UnitId(1), References { v_ref: 48.0, i_ref_pu: 0.2, i_cap: 5.0 });
        let s = Scenario {
            graph,
            gains,
            refs,
            events: vec![],
            solver: SolverSettings { dt: 1e-4, duration: 1.0, ..Default::default() },
            secondary: None,
            certificate: CertificateConfig::default(),
        };
        let out = run(&s).unwrap();
        let last = out.trace.last_record().unwrap();
        close_rel(last.units[0].i_c, 1.0, 1e-9);
        assert!(last.units[0].i_v.is_none());
        assert!(last.units[0].u_v.is_none());
    }
}
