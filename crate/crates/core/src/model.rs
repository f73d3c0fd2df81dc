//! Electrical models of converter units and their interconnection.
//!
//! Units sit on a DC bus with capacitance `C_t` and feed it through an RL
//! filter. A grid-feeding unit (here `Cdgu`) contributes two states, bus
//! voltage `V` and converter current `I_t^C`. A microgrid module (`Mg`) adds a
//! grid-forming converter on the same bus and a third state `I_t^V`. Units
//! couple through resistive lines under the quasi-stationary approximation:
//! the line inductance is kept in the data model (it is real hardware data)
//! but does not enter the state equations.
//!
//! Sign conventions follow the per-unit bus balance
//!
//! ```text
//! C_t dV/dt = I_t^C (+ I_t^V) + sum_j (V_j - V)/R_ij - I_L - V/R_L
//! ```
//!
//! so line coupling appears twice in an assembled system: a positive
//! `1/(R_ij C_t)` pull toward each neighbor voltage and the matching drain on
//! the unit's own diagonal.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, Matrix2, Matrix2x3, Matrix3, Matrix3x2, RowVector2, Vector2, Vector3};

use crate::error::Error;
use crate::Result;

/// Stable identifier of a converter unit.
///
/// Ids survive plug-in/out events; matrix positions are always recomputed
/// from the sorted set of live ids and never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitId(pub u32);

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Local load on a unit's bus: optional resistive branch plus a constant
/// current draw. "No resistive load" is an absent branch, not an infinite
/// resistance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Load {
    /// Resistive branch in ohms, if present.
    pub r_l: Option<f64>,
    /// Constant current draw in amps (enters as a disturbance).
    pub i_l: f64,
}

impl Load {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.r_l {
            positive("R_L", r)?;
        }
        finite("I_L", self.i_l)
    }
}

/// Electrical constants of a grid-feeding unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdguParams {
    /// Bus capacitance in farads.
    pub c_t: f64,
    /// Converter filter inductance in henries.
    pub l_tc: f64,
    /// Converter filter resistance in ohms.
    pub r_tc: f64,
    /// Rated current capacity in amps (per-unit base for `I_t^C`).
    pub i_cap: f64,
    /// Local load.
    pub load: Load,
}

impl CdguParams {
    pub fn validate(&self) -> Result<()> {
        positive("C_t", self.c_t)?;
        positive("L_tC", self.l_tc)?;
        positive("R_tC", self.r_tc)?;
        positive("I_cap", self.i_cap)?;
        self.load.validate()
    }
}

/// Electrical constants of a microgrid module: the grid-feeding branch plus a
/// grid-forming converter on the same bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgParams {
    pub cdgu: CdguParams,
    /// Grid-forming filter inductance in henries.
    pub l_tv: f64,
    /// Grid-forming filter resistance in ohms.
    pub r_tv: f64,
}

impl MgParams {
    pub fn validate(&self) -> Result<()> {
        self.cdgu.validate()?;
        positive("L_tV", self.l_tv)?;
        positive("R_tV", self.r_tv)
    }
}

/// Parameter record of one unit, either flavor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnitParams {
    Cdgu(CdguParams),
    Mg(MgParams),
}

impl UnitParams {
    /// The grid-feeding constants, shared by both flavors.
    pub fn cdgu(&self) -> &CdguParams {
        match self {
            UnitParams::Cdgu(p) => p,
            UnitParams::Mg(p) => &p.cdgu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            UnitParams::Cdgu(p) => p.validate(),
            UnitParams::Mg(p) => p.validate(),
        }
    }

    /// Number of physical (unaugmented) states.
    pub fn raw_dim(&self) -> usize {
        match self {
            UnitParams::Cdgu(_) => 2,
            UnitParams::Mg(_) => 3,
        }
    }

    pub fn kind(&self) -> ClusterKind {
        match self {
            UnitParams::Cdgu(_) => ClusterKind::CdguOnly,
            UnitParams::Mg(_) => ClusterKind::MgCluster,
        }
    }
}

/// Which unit flavor populates a cluster. Clusters are homogeneous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterKind {
    CdguOnly,
    MgCluster,
}

impl fmt::Display for ClusterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterKind::CdguOnly => write!(f, "cdgu-only"),
            ClusterKind::MgCluster => write!(f, "mg-cluster"),
        }
    }
}

/// Resistive line between two units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub a: UnitId,
    pub b: UnitId,
    /// Line resistance in ohms (enters the dynamics).
    pub r: f64,
    /// Line inductance in henries (carried, unused by the dynamics).
    pub l: f64,
}

impl Line {
    pub fn validate(&self) -> Result<()> {
        if self.a == self.b {
            return Err(Error::Topology(format!(
                "line endpoints must be distinct, got ({}, {})",
                self.a, self.b
            )));
        }
        positive("R_ij", self.r)?;
        if !self.l.is_finite() || self.l < 0.0 {
            return Err(Error::ParamDomain {
                name: "L_ij".into(),
                requirement: "finite and >= 0",
                value: self.l,
            });
        }
        Ok(())
    }

    pub fn touches(&self, id: UnitId) -> bool {
        self.a == id || self.b == id
    }

    /// The other endpoint, if `id` is one of them.
    pub fn other(&self, id: UnitId) -> Option<UnitId> {
        if self.a == id {
            Some(self.b)
        } else if self.b == id {
            Some(self.a)
        } else {
            None
        }
    }

    /// Endpoint pair in canonical order, the identity a line is deduplicated
    /// by.
    pub fn key(&self) -> (UnitId, UnitId) {
        if self.a <= self.b {
            (self.a, self.b)
        } else {
            (self.b, self.a)
        }
    }
}

/// Undirected electrical graph: unit parameter records plus lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalGraph {
    units: BTreeMap<UnitId, UnitParams>,
    lines: Vec<Line>,
}

impl ElectricalGraph {
    /// Builds a validated graph. Rejects invalid parameters, dangling line
    /// endpoints, self-loops, and duplicate lines between the same pair.
    pub fn new(units: BTreeMap<UnitId, UnitParams>, lines: Vec<Line>) -> Result<Self> {
        for (id, p) in &units {
            p.validate().map_err(|e| match e {
                Error::ParamDomain { name, requirement, value } => Error::ParamDomain {
                    name: format!("{name} (unit {id})"),
                    requirement,
                    value,
                },
                other => other,
            })?;
        }
        let mut seen = BTreeSet::new();
        for line in &lines {
            line.validate()?;
            for end in [line.a, line.b] {
                if !units.contains_key(&end) {
                    return Err(Error::Topology(format!(
                        "line ({}, {}) references missing unit {end}",
                        line.a, line.b
                    )));
                }
            }
            if !seen.insert(line.key()) {
                return Err(Error::Topology(format!(
                    "duplicate line between {} and {}",
                    line.a, line.b
                )));
            }
        }
        Ok(Self { units, lines })
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    /// Live unit ids in ascending order. This order defines block positions
    /// in every assembled matrix.
    pub fn unit_ids(&self) -> Vec<UnitId> {
        self.units.keys().copied().collect()
    }

    pub fn unit(&self, id: UnitId) -> Result<&UnitParams> {
        self.units.get(&id).ok_or(Error::UnknownUnit(id))
    }

    pub fn units(&self) -> &BTreeMap<UnitId, UnitParams> {
        &self.units
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    /// Lines incident to `id`, in stored order.
    pub fn neighbor_lines(&self, id: UnitId) -> Vec<&Line> {
        self.lines.iter().filter(|l| l.touches(id)).collect()
    }

    /// Replaces the load of one unit (the rest of the record is immutable).
    pub fn with_load(&self, id: UnitId, load: Load) -> Result<Self> {
        load.validate()?;
        let mut units = self.units.clone();
        match units.get_mut(&id) {
            Some(UnitParams::Cdgu(p)) => p.load = load,
            Some(UnitParams::Mg(p)) => p.cdgu.load = load,
            None => return Err(Error::UnknownUnit(id)),
        }
        Ok(Self { units, lines: self.lines.clone() })
    }

    /// Adds a unit together with its lines into the existing cluster.
    pub fn with_unit_added(
        &self,
        id: UnitId,
        params: UnitParams,
        lines: &[Line],
    ) -> Result<Self> {
        if self.units.contains_key(&id) {
            return Err(Error::DuplicateUnit(id));
        }
        for line in lines {
            if !line.touches(id) {
                return Err(Error::Topology(format!(
                    "line ({}, {}) does not touch the plugged unit {id}",
                    line.a, line.b
                )));
            }
        }
        let mut units = self.units.clone();
        units.insert(id, params);
        let mut all_lines = self.lines.clone();
        all_lines.extend_from_slice(lines);
        Self::new(units, all_lines)
    }

    /// Removes a unit and every line touching it.
    pub fn with_unit_removed(&self, id: UnitId) -> Result<Self> {
        if !self.units.contains_key(&id) {
            return Err(Error::UnknownUnit(id));
        }
        let mut units = self.units.clone();
        units.remove(&id);
        let lines = self
            .lines
            .iter()
            .copied()
            .filter(|l| !l.touches(id))
            .collect();
        Ok(Self { units, lines })
    }

    /// Severs every line touching `id`, leaving the unit in place as an
    /// island.
    pub fn with_lines_severed(&self, id: UnitId) -> Result<Self> {
        if !self.units.contains_key(&id) {
            return Err(Error::UnknownUnit(id));
        }
        let lines = self
            .lines
            .iter()
            .copied()
            .filter(|l| !l.touches(id))
            .collect();
        Ok(Self { units: self.units.clone(), lines })
    }

    /// Adds lines between existing units.
    pub fn with_lines_added(&self, new_lines: &[Line]) -> Result<Self> {
        let mut all_lines = self.lines.clone();
        all_lines.extend_from_slice(new_lines);
        Self::new(self.units.clone(), all_lines)
    }

    /// Connected components as sorted id lists, themselves sorted by their
    /// smallest member.
    pub fn components(&self) -> Vec<Vec<UnitId>> {
        let mut remaining: BTreeSet<UnitId> = self.units.keys().copied().collect();
        let mut components = Vec::new();
        while let Some(&start) = remaining.iter().next() {
            let mut component = Vec::new();
            let mut queue = VecDeque::from([start]);
            remaining.remove(&start);
            while let Some(u) = queue.pop_front() {
                component.push(u);
                for line in &self.lines {
                    if let Some(v) = line.other(u) {
                        if remaining.remove(&v) {
                            queue.push_back(v);
                        }
                    }
                }
            }
            component.sort();
            components.push(component);
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() <= 1
    }
}

/// Connectivity verdict for a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Connectivity {
    Connected,
    /// The connected components, each sorted, when there are two or more.
    Partitioned(Vec<Vec<UnitId>>),
}

/// Reports whether the electrical graph is one component. A disconnected
/// cluster is not an error: simulation and stability analysis proceed per
/// component, since a block-structured system has exactly the union of the
/// component dynamics.
pub fn validate_connectivity(graph: &ElectricalGraph) -> Connectivity {
    let components = graph.components();
    if components.len() <= 1 {
        Connectivity::Connected
    } else {
        Connectivity::Partitioned(components)
    }
}

/// Dense state-space matrices with human-readable signal labels.
///
/// `x' = A x + B u + M d`, `z = H x`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub disturbance_labels: Vec<String>,
    pub output_labels: Vec<String>,
}

impl StateSpace {
    /// Checks the mutual dimension constraints.
    pub fn validate_dims(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(Error::Dimension { context: "A square", expected: n, got: self.a.ncols() });
        }
        for (name, rows) in [("B", self.b.nrows()), ("M", self.m.nrows())] {
            if rows != n {
                let _ = name;
                return Err(Error::Dimension { context: "B/M row count", expected: n, got: rows });
            }
        }
        if self.h.ncols() != n {
            return Err(Error::Dimension { context: "H column count", expected: n, got: self.h.ncols() });
        }
        Ok(())
    }
}

/// Local state-space pieces of a grid-feeding unit: state `[V, I_t^C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdguLocal {
    /// Isolated unit dynamics.
    pub a_ii: Matrix2<f64>,
    /// Resistive-load contribution (zero when the load branch is absent).
    pub a_load: Matrix2<f64>,
    /// One coupling block per neighbor line, in argument order.
    pub a_lines: Vec<Matrix2<f64>>,
    /// Input map for the converter voltage command.
    pub b: Vector2<f64>,
    /// Disturbance map for the load current draw.
    pub m: Vector2<f64>,
    /// Output map selecting the controlled signal `I_t^C`.
    pub h: RowVector2<f64>,
}

/// Builds the grid-feeding unit's local matrices.
///
/// `neighbor_lines` lists the resistances of the lines at this unit; each
/// yields the coupling block `[[1/(R_ij C_t), 0], [0, 0]]` acting on the
/// neighbor's state. The matching diagonal drain is added at assembly time.
pub fn build_cdgu_local(params: &CdguParams, neighbor_lines: &[f64]) -> Result<CdguLocal> {
    params.validate()?;
    let c = params.c_t;
    let a_ii = Matrix2::new(
        0.0, 1.0 / c,
        -1.0 / params.l_tc, -params.r_tc / params.l_tc,
    );
    let a_load = match params.load.r_l {
        Some(r_l) => Matrix2::new(-1.0 / (r_l * c), 0.0, 0.0, 0.0),
        None => Matrix2::zeros(),
    };
    let mut a_lines = Vec::with_capacity(neighbor_lines.len());
    for &r in neighbor_lines {
        positive("R_ij", r)?;
        a_lines.push(Matrix2::new(1.0 / (r * c), 0.0, 0.0, 0.0));
    }
    Ok(CdguLocal {
        a_ii,
        a_load,
        a_lines,
        b: Vector2::new(0.0, 1.0 / params.l_tc),
        m: Vector2::new(-1.0 / c, 0.0),
        h: RowVector2::new(0.0, 1.0),
    })
}

/// Local state-space pieces of a microgrid module: state `[V, I_t^C, I_t^V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MgLocal {
    pub a_ii: Matrix3<f64>,
    pub a_load: Matrix3<f64>,
    pub a_lines: Vec<Matrix3<f64>>,
    /// Input map, one column per converter command `[V_t^C, V_t^V]`.
    pub b: Matrix3x2<f64>,
    pub m: Vector3<f64>,
    /// Output map selecting the controlled signals `[I_t^C, V]`.
    pub h: Matrix2x3<f64>,
}

/// Builds the microgrid module's local matrices.
pub fn build_mg_local(params: &MgParams, neighbor_lines: &[f64]) -> Result<MgLocal> {
    params.validate()?;
    let c = params.cdgu.c_t;
    let (l_c, r_c) = (params.cdgu.l_tc, params.cdgu.r_tc);
    let (l_v, r_v) = (params.l_tv, params.r_tv);
    let a_ii = Matrix3::new(
        0.0, 1.0 / c, 1.0 / c,
        -1.0 / l_c, -r_c / l_c, 0.0,
        -1.0 / l_v, 0.0, -r_v / l_v,
    );
    let a_load = match params.cdgu.load.r_l {
        Some(r_l) => {
            let mut m = Matrix3::zeros();
            m[(0, 0)] = -1.0 / (r_l * c);
            m
        }
        None => Matrix3::zeros(),
    };
    let mut a_lines = Vec::with_capacity(neighbor_lines.len());
    for &r in neighbor_lines {
        positive("R_ij", r)?;
        let mut m = Matrix3::zeros();
        m[(0, 0)] = 1.0 / (r * c);
        a_lines.push(m);
    }
    let mut b = Matrix3x2::zeros();
    b[(1, 0)] = 1.0 / l_c;
    b[(2, 1)] = 1.0 / l_v;
    Ok(MgLocal {
        a_ii,
        a_load,
        a_lines,
        b,
        m: Vector3::new(-1.0 / c, 0.0, 0.0),
        h: Matrix2x3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0),
    })
}

/// Assembles the cluster-wide physical (unaugmented) state space.
///
/// Block layout follows ascending unit id. Diagonal blocks are
/// `A_ii + A_load,i` minus the coupling drain `sum_j 1/(R_ij C_t)` on the
/// voltage state; off-diagonal blocks hold `1/(R_ij C_t)` for each line.
/// Every unit record must match `kind`.
pub fn assemble_global(graph: &ElectricalGraph, kind: ClusterKind) -> Result<StateSpace> {
    if graph.is_empty() {
        return Err(Error::Topology("cannot assemble an empty cluster".into()));
    }
    let ids = graph.unit_ids();
    let dim: usize = match kind {
        ClusterKind::CdguOnly => 2,
        ClusterKind::MgCluster => 3,
    };
    let n_inputs = match kind {
        ClusterKind::CdguOnly => 1,
        ClusterKind::MgCluster => 2,
    };
    let n = ids.len();

    let mut a = DMatrix::zeros(n * dim, n * dim);
    let mut b = DMatrix::zeros(n * dim, n * n_inputs);
    let mut m = DMatrix::zeros(n * dim, n);
    let mut h = DMatrix::zeros(n * n_inputs, n * dim);
    let mut state_labels = Vec::new();
    let mut input_labels = Vec::new();
    let mut disturbance_labels = Vec::new();
    let mut output_labels = Vec::new();

    for (idx, &id) in ids.iter().enumerate() {
        let params = graph.unit(id)?;
        if params.kind() != kind {
            return Err(Error::Topology(format!(
                "unit {id} is a {} record but the assembly kind is {kind}",
                params.kind()
            )));
        }
        let row = idx * dim;
        match params {
            UnitParams::Cdgu(p) => {
                let local = build_cdgu_local(p, &[])?;
                let diag = local.a_ii + local.a_load;
                a.view_mut((row, row), (2, 2)).copy_from(&diag);
                b.view_mut((row, idx), (2, 1)).copy_from(&local.b);
                m.view_mut((row, idx), (2, 1)).copy_from(&local.m);
                h.view_mut((idx, row), (1, 2)).copy_from(&local.h);
                state_labels.push(format!("V[{id}]"));
                state_labels.push(format!("ItC[{id}]"));
                input_labels.push(format!("VtC[{id}]"));
                output_labels.push(format!("ItC[{id}]"));
            }
            UnitParams::Mg(p) => {
                let local = build_mg_local(p, &[])?;
                let diag = local.a_ii + local.a_load;
                a.view_mut((row, row), (3, 3)).copy_from(&diag);
                b.view_mut((row, idx * 2), (3, 2)).copy_from(&local.b);
                m.view_mut((row, idx), (3, 1)).copy_from(&local.m);
                h.view_mut((idx * 2, row), (2, 3)).copy_from(&local.h);
                state_labels.push(format!("V[{id}]"));
                state_labels.push(format!("ItC[{id}]"));
                state_labels.push(format!("ItV[{id}]"));
                input_labels.push(format!("VtC[{id}]"));
                input_labels.push(format!("VtV[{id}]"));
                output_labels.push(format!("ItC[{id}]"));
                output_labels.push(format!("V[{id}]"));
            }
        }
        disturbance_labels.push(format!("IL[{id}]"));
    }

    // Line coupling: pull toward each neighbor voltage plus the matching
    // drain on the unit's own voltage state.
    let index_of: BTreeMap<UnitId, usize> = ids.iter().copied().zip(0..).collect();
    for line in graph.lines() {
        let ia = index_of[&line.a];
        let ib = index_of[&line.b];
        let ca = graph.unit(line.a)?.cdgu().c_t;
        let cb = graph.unit(line.b)?.cdgu().c_t;
        let (ra, rb) = (ia * dim, ib * dim);
        a[(ra, rb)] += 1.0 / (line.r * ca);
        a[(ra, ra)] -= 1.0 / (line.r * ca);
        a[(rb, ra)] += 1.0 / (line.r * cb);
        a[(rb, rb)] -= 1.0 / (line.r * cb);
    }

    Ok(StateSpace {
        a,
        b,
        m,
        h,
        state_labels,
        input_labels,
        disturbance_labels,
        output_labels,
    })
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::ParamDomain {
            name: name.into(),
            requirement: "finite and > 0",
            value,
        })
    }
}

fn finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::ParamDomain {
            name: name.into(),
            requirement: "finite",
            value,
        })
    }
}

// ---------------------------------------------------------------------------
