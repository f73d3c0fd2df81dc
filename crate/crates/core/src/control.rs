//! Decentralized primary control: integrator-augmented unit models, the gain
//! region that guarantees plug-and-play stability, seeded gain sampling, and
//! the state-feedback law itself.
//!
//! Each controlled signal gets an integrator state, so a grid-feeding unit
//! grows from `[V, I_t^C]` to `[V, I_t^C, v^C]` and a microgrid module from
//! `[V, I_t^C, I_t^V]` to `[V, I_t^C, v^C, I_t^V, v^V]`. References enter the
//! augmented model as disturbances driving the integrators, which pins the
//! closed-loop equilibrium at the reference exactly.
//!
//! Augmentation is enforced at the type level: `augment_cdgu` maps
//! [`CdguLocal`] to the distinct [`AugCdgu`], so it cannot be applied twice.
//!
//! The admissible gain sets are open orthant-like regions described by strict
//! inequalities; [`check_gains_cdgu`] and [`check_gains_mg`] evaluate them
//! exactly (tolerance zero) and report signed distances to every boundary for
//! diagnostics.

use std::collections::BTreeMap;

use nalgebra::{
    DMatrix, DVector, Matrix2x5, Matrix3, Matrix3x2, Matrix5, Matrix5x2, Matrix5x3, RowVector3,
    Vector3,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::model::{
    CdguLocal, ClusterKind, ElectricalGraph, MgLocal, UnitId, UnitParams, build_cdgu_local,
    build_mg_local,
};
use crate::Result;

/// Feedback coefficients of a grid-feeding current controller:
/// `u = k1·V + k2·I_t^C + k3·v^C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdguGains {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

/// Feedback coefficients of a microgrid module: the current triple plus the
/// grid-forming voltage triple `k1V·V + k2V·I_t^V + k3V·v^V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgGains {
    pub current: CdguGains,
    pub k1v: f64,
    pub k2v: f64,
    pub k3v: f64,
}

/// Gains of one unit, either flavor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnitGains {
    Cdgu(CdguGains),
    Mg(MgGains),
}

impl UnitGains {
    pub fn kind(&self) -> ClusterKind {
        match self {
            UnitGains::Cdgu(_) => ClusterKind::CdguOnly,
            UnitGains::Mg(_) => ClusterKind::MgCluster,
        }
    }
}

/// Primary reference set of one unit.
///
/// The current reference is per-unit; `z_ref_current` converts it to amps at
/// the integrator input using the rated capacity. Grid-feeding units ignore
/// `v_ref` (they have no voltage integrator).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct References {
    /// Bus voltage reference in volts.
    pub v_ref: f64,
    /// Output current reference as a fraction of rated capacity.
    pub i_ref_pu: f64,
    /// Rated capacity in amps; must match the unit's electrical record.
    pub i_cap: f64,
}

impl References {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("V_ref", self.v_ref), ("I_ref_pu", self.i_ref_pu)] {
            if !v.is_finite() {
                return Err(Error::ParamDomain {
                    name: name.into(),
                    requirement: "finite",
                    value: v,
                });
            }
        }
        if !(self.i_cap.is_finite() && self.i_cap > 0.0) {
            return Err(Error::ParamDomain {
                name: "I_cap".into(),
                requirement: "finite and > 0",
                value: self.i_cap,
            });
        }
        Ok(())
    }

    /// Current reference in amps, as seen by the current integrator.
    pub fn z_ref_current(&self) -> f64 {
        self.i_ref_pu * self.i_cap
    }
}

/// Integrator-augmented grid-feeding unit, state `[V, I_t^C, v^C]`.
///
/// Disturbance order is `[I_L, z_ref^C]` with the current reference in amps.
#[derive(Debug, Clone, PartialEq)]
pub struct AugCdgu {
    pub a_ii: Matrix3<f64>,
    pub a_load: Matrix3<f64>,
    pub a_lines: Vec<Matrix3<f64>>,
    pub b: Vector3<f64>,
    pub m: Matrix3x2<f64>,
    pub h: RowVector3<f64>,
}

/// Augments the grid-feeding model with the current integrator
/// `v̇^C = z_ref^C − I_t^C`.
pub fn augment_cdgu(local: &CdguLocal) -> AugCdgu {
    let mut a_ii = Matrix3::zeros();
    a_ii.view_mut((0, 0), (2, 2)).copy_from(&local.a_ii);
    a_ii[(2, 0)] = -local.h[(0, 0)];
    a_ii[(2, 1)] = -local.h[(0, 1)];

    let mut a_load = Matrix3::zeros();
    a_load.view_mut((0, 0), (2, 2)).copy_from(&local.a_load);

    let a_lines = local
        .a_lines
        .iter()
        .map(|blk| {
            let mut m = Matrix3::zeros();
            m.view_mut((0, 0), (2, 2)).copy_from(blk);
            m
        })
        .collect();

    let mut m = Matrix3x2::zeros();
    m[(0, 0)] = local.m[0];
    m[(1, 0)] = local.m[1];
    m[(2, 1)] = 1.0;

    AugCdgu {
        a_ii,
        a_load,
        a_lines,
        b: Vector3::new(local.b[0], local.b[1], 0.0),
        m,
        h: RowVector3::new(local.h[(0, 0)], local.h[(0, 1)], 0.0),
    }
}

/// Integrator-augmented microgrid module, state
/// `[V, I_t^C, v^C, I_t^V, v^V]`.
///
/// Disturbance order is `[I_L, z_ref^C, V_ref]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugMg {
    pub a_ii: Matrix5<f64>,
    pub a_load: Matrix5<f64>,
    pub a_lines: Vec<Matrix5<f64>>,
    pub b: Matrix5x2<f64>,
    pub m: Matrix5x3<f64>,
    pub h: Matrix2x5<f64>,
}

/// Physical-state indices of the 3-state module inside the 5-state augmented
/// layout (the integrators land at 2 and 4).
const MG_EMBED: [usize; 3] = [0, 1, 3];

/// Augments the microgrid module with the current integrator
/// `v̇^C = z_ref^C − I_t^C` and the voltage integrator `v̇^V = V_ref − V`.
pub fn augment_mg(local: &MgLocal) -> AugMg {
    let mut a_ii = Matrix5::zeros();
    for (io, &ia) in MG_EMBED.iter().enumerate() {
        for (jo, &ja) in MG_EMBED.iter().enumerate() {
            a_ii[(ia, ja)] = local.a_ii[(io, jo)];
        }
    }
    // integrator rows carry −H: v^C tracks output 0 (I_t^C), v^V output 1 (V)
    for (out_row, int_idx) in [(0usize, 2usize), (1, 4)] {
        for (jo, &ja) in MG_EMBED.iter().enumerate() {
            a_ii[(int_idx, ja)] = -local.h[(out_row, jo)];
        }
    }

    let mut a_load = Matrix5::zeros();
    a_load[(0, 0)] = local.a_load[(0, 0)];

    let a_lines = local
        .a_lines
        .iter()
        .map(|blk| {
            let mut m = Matrix5::zeros();
            m[(0, 0)] = blk[(0, 0)];
            m
        })
        .collect();

    let mut b = Matrix5x2::zeros();
    for (io, &ia) in MG_EMBED.iter().enumerate() {
        b[(ia, 0)] = local.b[(io, 0)];
        b[(ia, 1)] = local.b[(io, 1)];
    }

    let mut m = Matrix5x3::zeros();
    for (io, &ia) in MG_EMBED.iter().enumerate() {
        m[(ia, 0)] = local.m[io];
    }
    m[(2, 1)] = 1.0;
    m[(4, 2)] = 1.0;

    let mut h = Matrix2x5::zeros();
    for (jo, &ja) in MG_EMBED.iter().enumerate() {
        h[(0, ja)] = local.h[(0, jo)];
        h[(1, ja)] = local.h[(1, jo)];
    }

    AugMg { a_ii, a_load, a_lines, b, m, h }
}

/// Signed distance from one gain to one boundary of the admissible set.
/// Positive means strictly inside.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMargin {
    pub constraint: &'static str,
    pub distance: f64,
}

/// Verdict of a gain check: the violated inequalities (empty when valid) and
/// the signed distance to every boundary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GainCheck {
    pub violations: Vec<String>,
    pub margins: Vec<BoundaryMargin>,
}

impl GainCheck {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violation_summary(&self) -> String {
        self.violations.join("; ")
    }

    fn require(&mut self, constraint: &'static str, distance: f64, got: f64) {
        self.margins.push(BoundaryMargin { constraint, distance });
        if distance <= 0.0 || distance.is_nan() {
            self.violations.push(format!("{constraint} violated (got {got})"));
        }
    }
}

/// Checks the grid-feeding gain triple: `k1 < 1`, `k2 < R_tC`, `k3 > 0`, all
/// strict with zero tolerance. Violations are reported, never raised.
pub fn check_gains_cdgu(g: &CdguGains, r_tc: f64) -> Result<GainCheck> {
    positive("R_tC", r_tc)?;
    let mut check = GainCheck::default();
    push_current_triple(&mut check, g, r_tc);
    Ok(check)
}

fn push_current_triple(check: &mut GainCheck, g: &CdguGains, r_tc: f64) {
    check.require("k1C < 1", 1.0 - g.k1, g.k1);
    check.require("k2C < R_tC", r_tc - g.k2, g.k2);
    check.require("k3C > 0", g.k3, g.k3);
}

/// Upper admissible bound for the grid-forming integral gain, given the other
/// two voltage coefficients. Positive exactly when `k1V < 1` and `k2V < R_tV`.
pub fn k3v_upper_bound(k1v: f64, k2v: f64, r_tv: f64, l_tv: f64) -> f64 {
    (k1v - 1.0) * (k2v - r_tv) / l_tv
}

/// Checks all six microgrid inequalities: the current triple against `R_tC`
/// plus `k1V < 1`, `k2V < R_tV`, and `0 < k3V < (k1V−1)(k2V−R_tV)/L_tV`.
pub fn check_gains_mg(g: &MgGains, r_tc: f64, r_tv: f64, l_tv: f64) -> Result<GainCheck> {
    positive("R_tC", r_tc)?;
    positive("R_tV", r_tv)?;
    positive("L_tV", l_tv)?;
    let mut check = GainCheck::default();
    push_current_triple(&mut check, &g.current, r_tc);
    check.require("k1V < 1", 1.0 - g.k1v, g.k1v);
    check.require("k2V < R_tV", r_tv - g.k2v, g.k2v);
    check.require("k3V > 0", g.k3v, g.k3v);
    let bound = k3v_upper_bound(g.k1v, g.k2v, r_tv, l_tv);
    check.require("k3V < (k1V-1)(k2V-R_tV)/L_tV", bound - g.k3v, g.k3v);
    Ok(check)
}

/// Checks a unit's gains against its own electrical record; the flavors must
/// match.
pub fn check_unit_gains(gains: &UnitGains, params: &UnitParams) -> Result<GainCheck> {
    match (gains, params) {
        (UnitGains::Cdgu(g), UnitParams::Cdgu(p)) => check_gains_cdgu(g, p.r_tc),
        (UnitGains::Mg(g), UnitParams::Mg(p)) => {
            check_gains_mg(g, p.cdgu.r_tc, p.r_tv, p.l_tv)
        }
        (g, p) => Err(Error::Topology(format!(
            "{} gains supplied for a {} unit",
            g.kind(),
            p.kind()
        ))),
    }
}

/// Turns a failed check into an error naming the offender; no-op when valid.
pub fn require_valid_gains(who: &str, check: &GainCheck) -> Result<()> {
    if check.is_valid() {
        Ok(())
    } else {
        Err(Error::GainsRejected {
            who: who.into(),
            violations: check.violation_summary(),
        })
    }
}

/// Draws a valid grid-feeding gain triple, deterministically from `seed`,
/// keeping at least `margin` (relative, per boundary scale) away from every
/// boundary. `margin` must lie in (0, 1).
pub fn sample_gains_cdgu(r_tc: f64, seed: u64, margin: f64) -> Result<CdguGains> {
    positive("R_tC", r_tc)?;
    margin_in(margin, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_current_triple(&mut rng, r_tc, margin))
}

fn sample_current_triple(rng: &mut ChaCha8Rng, r_tc: f64, margin: f64) -> CdguGains {
    CdguGains {
        k1: 1.0 - margin - rng.gen::<f64>() * 2.0,
        k2: r_tc - margin * r_tc.abs() - rng.gen::<f64>() * 3.0,
        k3: margin + rng.gen::<f64>() * 50.0,
    }
}

/// Draws a valid microgrid gain set, deterministically from `seed`. The
/// integral gain `k3V` is sampled strictly inside its interval with `margin`
/// measured from both ends, so `margin` must lie in (0, 0.5).
pub fn sample_gains_mg(
    r_tc: f64,
    r_tv: f64,
    l_tv: f64,
    seed: u64,
    margin: f64,
) -> Result<MgGains> {
    positive("R_tC", r_tc)?;
    positive("R_tV", r_tv)?;
    positive("L_tV", l_tv)?;
    margin_in(margin, 0.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let current = sample_current_triple(&mut rng, r_tc, margin);
    let k1v = 1.0 - margin - rng.gen::<f64>() * 2.0;
    let k2v = r_tv - margin * r_tv.abs() - rng.gen::<f64>();
    let bound = k3v_upper_bound(k1v, k2v, r_tv, l_tv);
    let k3v = bound * (margin + rng.gen::<f64>() * (1.0 - 2.0 * margin));
    Ok(MgGains { current, k1v, k2v, k3v })
}

fn margin_in(margin: f64, upper: f64) -> Result<()> {
    if margin.is_finite() && margin > 0.0 && margin < upper {
        Ok(())
    } else {
        Err(Error::ParamDomain {
            name: "margin".into(),
            requirement: if upper < 1.0 { "in (0, 0.5)" } else { "in (0, 1)" },
            value: margin,
        })
    }
}

/// Gain row of a grid-feeding unit: `u = K x̂`.
pub fn k_row_cdgu(g: &CdguGains) -> RowVector3<f64> {
    RowVector3::new(g.k1, g.k2, g.k3)
}

/// Gain matrix of a microgrid module. Both rows share the bus voltage; the
/// current row never reads the grid-forming states and vice versa, so
/// positions (0,3), (0,4), (1,1), (1,2) are structural zeros.
pub fn k_matrix_mg(g: &MgGains) -> Matrix2x5<f64> {
    Matrix2x5::new(
        g.current.k1, g.current.k2, g.current.k3, 0.0, 0.0,
        g.k1v, 0.0, 0.0, g.k2v, g.k3v,
    )
}

/// Evaluates the feedback law `u = K x̂` for one unit.
pub fn control_input(gains: &UnitGains, x: &DVector<f64>) -> Result<DVector<f64>> {
    match gains {
        UnitGains::Cdgu(g) => {
            expect_len("control input state (grid-feeding)", x, 3)?;
            Ok(DVector::from_vec(vec![g.k1 * x[0] + g.k2 * x[1] + g.k3 * x[2]]))
        }
        UnitGains::Mg(g) => {
            expect_len("control input state (microgrid)", x, 5)?;
            let u_c = g.current.k1 * x[0] + g.current.k2 * x[1] + g.current.k3 * x[2];
            let u_v = g.k1v * x[0] + g.k2v * x[3] + g.k3v * x[4];
            Ok(DVector::from_vec(vec![u_c, u_v]))
        }
    }
}

fn expect_len(context: &'static str, x: &DVector<f64>, n: usize) -> Result<()> {
    if x.len() == n {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected: n, got: x.len() })
    }
}

/// Isolated closed loop of a grid-feeding unit (no load or line terms; those
/// enter the cluster-level analysis separately).
pub fn closed_loop_cdgu(aug: &AugCdgu, g: &CdguGains) -> Matrix3<f64> {
    aug.a_ii + aug.b * k_row_cdgu(g)
}

/// Isolated closed loop of a microgrid module.
pub fn closed_loop_mg(aug: &AugMg, g: &MgGains) -> Matrix5<f64> {
    aug.a_ii + aug.b * k_matrix_mg(g)
}

/// Cluster-wide augmented model under decentralized feedback.
///
/// Block order follows ascending unit id. `a_open` includes load and line
/// terms; `f = a_open + b·k` is the matrix actually integrated, and `m` maps
/// the stacked per-unit disturbances (see [`disturbance_vector`]).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedCluster {
    pub ids: Vec<UnitId>,
    pub kind: ClusterKind,
    /// Augmented states per unit (3 or 5).
    pub unit_dim: usize,
    /// Disturbance entries per unit (2 or 3).
    pub dist_dim: usize,
    pub a_open: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub state_labels: Vec<String>,
}

impl AugmentedCluster {
    pub fn n_units(&self) -> usize {
        self.ids.len()
    }

    pub fn n_states(&self) -> usize {
        self.ids.len() * self.unit_dim
    }

    /// First state index of a unit's block.
    pub fn offset_of(&self, id: UnitId) -> Result<usize> {
        self.ids
            .iter()
            .position(|&u| u == id)
            .map(|i| i * self.unit_dim)
            .ok_or(Error::UnknownUnit(id))
    }
}

/// Assembles the cluster-wide augmented closed loop from per-unit gains.
///
/// Every unit needs a gains entry of the matching flavor. Validity of the
/// gains is not enforced here; callers that promise stability run the checks
/// first.
pub fn assemble_augmented(
    graph: &ElectricalGraph,
    gains: &BTreeMap<UnitId, UnitGains>,
) -> Result<AugmentedCluster> {
    if graph.is_empty() {
        return Err(Error::Topology("cannot assemble an empty cluster".into()));
    }
    let ids = graph.unit_ids();
    let kind = graph.unit(ids[0])?.kind();
    let (unit_dim, dist_dim, inputs) = match kind {
        ClusterKind::CdguOnly => (3, 2, 1),
        ClusterKind::MgCluster => (5, 3, 2),
    };
    let n = ids.len();
    let mut a_open = DMatrix::zeros(n * unit_dim, n * unit_dim);
    let mut b = DMatrix::zeros(n * unit_dim, n * inputs);
    let mut k = DMatrix::zeros(n * inputs, n * unit_dim);
    let mut m = DMatrix::zeros(n * unit_dim, n * dist_dim);
    let mut state_labels = Vec::with_capacity(n * unit_dim);

    for (idx, &id) in ids.iter().enumerate() {
        let params = graph.unit(id)?;
        if params.kind() != kind {
            return Err(Error::Topology(format!(
                "unit {id} is a {} record in a {kind} cluster",
                params.kind()
            )));
        }
        let g = gains
            .get(&id)
            .ok_or_else(|| Error::Topology(format!("no gains provided for unit {id}")))?;
        let row = idx * unit_dim;
        match (params, g) {
            (UnitParams::Cdgu(p), UnitGains::Cdgu(g)) => {
                let aug = augment_cdgu(&build_cdgu_local(p, &[])?);
                let diag = aug.a_ii + aug.a_load;
                a_open.view_mut((row, row), (3, 3)).copy_from(&diag);
                b.view_mut((row, idx), (3, 1)).copy_from(&aug.b);
                k.view_mut((idx, row), (1, 3)).copy_from(&k_row_cdgu(g));
                m.view_mut((row, idx * 2), (3, 2)).copy_from(&aug.m);
                for s in ["V", "ItC", "vC"] {
                    state_labels.push(format!("{s}[{id}]"));
                }
            }
            (UnitParams::Mg(p), UnitGains::Mg(g)) => {
                let aug = augment_mg(&build_mg_local(p, &[])?);
                let diag = aug.a_ii + aug.a_load;
                a_open.view_mut((row, row), (5, 5)).copy_from(&diag);
                b.view_mut((row, idx * 2), (5, 2)).copy_from(&aug.b);
                k.view_mut((idx * 2, row), (2, 5)).copy_from(&k_matrix_mg(g));
                m.view_mut((row, idx * 3), (5, 3)).copy_from(&aug.m);
                for s in ["V", "ItC", "vC", "ItV", "vV"] {
                    state_labels.push(format!("{s}[{id}]"));
                }
            }
            (p, g) => {
                return Err(Error::Topology(format!(
                    "{} gains supplied for {} unit {id}",
                    g.kind(),
                    p.kind()
                )))
            }
        }
    }

    let index_of: BTreeMap<UnitId, usize> = ids.iter().copied().zip(0..).collect();
    for line in graph.lines() {
        let ia = index_of[&line.a];
        let ib = index_of[&line.b];
        let ca = graph.unit(line.a)?.cdgu().c_t;
        let cb = graph.unit(line.b)?.cdgu().c_t;
        let (ra, rb) = (ia * unit_dim, ib * unit_dim);
        a_open[(ra, rb)] += 1.0 / (line.r * ca);
        a_open[(ra, ra)] -= 1.0 / (line.r * ca);
        a_open[(rb, ra)] += 1.0 / (line.r * cb);
        a_open[(rb, rb)] -= 1.0 / (line.r * cb);
    }

    let f = &a_open + &b * &k;
    Ok(AugmentedCluster {
        ids,
        kind,
        unit_dim,
        dist_dim,
        a_open,
        b,
        k,
        f,
        m,
        state_labels,
    })
}

/// Stacks the per-unit disturbances `[I_L, z_ref^C]` (grid-feeding) or
/// `[I_L, z_ref^C, V_ref]` (microgrid) in unit-id order.
///
/// The rated capacity inside each [`References`] must equal the unit's
/// electrical record; mismatches would silently rescale the current loop.
pub fn disturbance_vector(
    graph: &ElectricalGraph,
    refs: &BTreeMap<UnitId, References>,
) -> Result<DVector<f64>> {
    let ids = graph.unit_ids();
    let mut entries = Vec::new();
    for id in ids {
        let params = graph.unit(id)?;
        let r = refs
            .get(&id)
            .ok_or_else(|| Error::Topology(format!("no references provided for unit {id}")))?;
        r.validate()?;
        if r.i_cap != params.cdgu().i_cap {
            return Err(Error::ParamDomain {
                name: format!("I_cap (unit {id} references)"),
                requirement: "must equal the unit's rated capacity",
                value: r.i_cap,
            });
        }
        entries.push(params.cdgu().load.i_l);
        entries.push(r.z_ref_current());
        if matches!(params, UnitParams::Mg(_)) {
            entries.push(r.v_ref);
        }
    }
    Ok(DVector::from_vec(entries))
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

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::{self, table};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    fn table_aug_cdgu() -> AugCdgu {
        augment_cdgu(&build_cdgu_local(&table::cdgu_params(5.0), &[]).unwrap())
    }

    fn table_aug_mg() -> AugMg {
        augment_mg(&build_mg_local(&table::mg_params(5.0), &[]).unwrap())
    }

    #[test]
    fn cdgu_augmentation_structure() {
        let aug = table_aug_cdgu();
        assert_eq!(aug.a_ii.row(2), RowVector3::new(0.0, -1.0, 0.0));
        assert_eq!(aug.b, Vector3::new(0.0, 1.0 / 0.018, 0.0));
        assert_eq!(aug.m[(0, 0)], -1.0 / 2.2e-3);
        assert_eq!(aug.m[(2, 1)], 1.0);
        assert_eq!(aug.m.column(1).sum(), 1.0);
        assert_eq!(aug.h, RowVector3::new(0.0, 1.0, 0.0));
    }

    #[test]
    fn cdgu_charge_mode_is_uncontrollable_until_loaded() {
        // In an isolated loadless current loop the combination C_t·V + v^C is
        // conserved (its derivative is I_t^C - I_t^C), so the converter
        // command reaches only a 2-dimensional subspace. The local resistive
        // load drains the bus and restores full controllability.
        let aug = table_aug_cdgu();
        let ctrb = |a: Matrix3<f64>| {
            let c0 = aug.b;
            let c1 = a * c0;
            let c2 = a * c1;
            Matrix3::from_columns(&[c0, c1, c2])
        };
        let isolated = ctrb(aug.a_ii);
        assert_eq!(isolated.rank(1e-9), 2);
        let conserved = RowVector3::new(2.2e-3, 0.0, 1.0);
        assert!((conserved * isolated).amax() < 1e-12);
        assert!((conserved * aug.a_ii).amax() < 1e-12);

        assert_eq!(ctrb(aug.a_ii + aug.a_load).rank(1e-9), 3);
    }

    #[test]
    fn mg_augmentation_structure() {
        let aug = table_aug_mg();
        let r2: Vec<f64> = aug.a_ii.row(2).iter().copied().collect();
        let r4: Vec<f64> = aug.a_ii.row(4).iter().copied().collect();
        assert_eq!(r2, vec![0.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r4, vec![-1.0, 0.0, 0.0, 0.0, 0.0]);
        // converter command columns use +1/L on the current rows
        close(aug.b.column(0).sum(), 1.0 / 0.018);
        close(aug.b.column(1).sum(), 1.0 / 0.0018);
        assert_eq!(aug.b[(1, 0)], 1.0 / 0.018);
        assert_eq!(aug.b[(3, 1)], 1.0 / 0.0018);
        assert_eq!(aug.m[(2, 1)], 1.0);
        assert_eq!(aug.m[(4, 2)], 1.0);
        assert_eq!(aug.m[(0, 0)], -1.0 / 2.2e-3);
        // physics embeds at [0, 1, 3]
        close(aug.a_ii[(0, 3)], 1.0 / 2.2e-3);
        close(aug.a_ii[(3, 0)], -1.0 / 0.0018);
        close(aug.a_ii[(3, 3)], -0.1 / 0.0018);
        let mut ctrb = DMatrix::zeros(5, 10);
        let b = DMatrix::from_fn(5, 2, |i, j| aug.b[(i, j)]);
        let a = DMatrix::from_fn(5, 5, |i, j| aug.a_ii[(i, j)]);
        let mut block = b.clone();
        for p in 0..5 {
            ctrb.view_mut((0, 2 * p), (5, 2)).copy_from(&block);
            block = &a * &block;
        }
        assert_eq!(ctrb.rank(1e-9), 5);
    }

    #[test]
    fn table_gains_pass_and_boundaries_flip() {
        let g = table::cdgu_gains();
        assert!(check_gains_cdgu(&g, 0.2).unwrap().is_valid());
        for bad in [
            CdguGains { k1: 1.0, ..g },
            CdguGains { k2: 0.2, ..g },
            CdguGains { k3: 0.0, ..g },
        ] {
            let check = check_gains_cdgu(&bad, 0.2).unwrap();
            assert_eq!(check.violations.len(), 1, "{:?}", check.violations);
        }

        let m = table::mg_gains();
        let check = check_gains_mg(&m, 0.2, 0.1, 0.0018).unwrap();
        assert!(check.is_valid(), "{}", check.violation_summary());
        close(k3v_upper_bound(m.k1v, m.k2v, 0.1, 0.0018), 171.02222222222224);
        for bad in [
            MgGains { k1v: 1.0, ..m },
            MgGains { k2v: 0.1, ..m },
            MgGains { k3v: 0.0, ..m },
            MgGains { k3v: 200.0, ..m },
        ] {
            assert!(!check_gains_mg(&bad, 0.2, 0.1, 0.0018).unwrap().is_valid());
        }
    }

    #[test]
    fn margins_report_distances() {
        let check = check_gains_cdgu(&table::cdgu_gains(), 0.2).unwrap();
        assert_eq!(check.margins.len(), 3);
        close(check.margins[0].distance, 1.01);
        close(check.margins[1].distance, 0.2 + 2.7015);
        close(check.margins[2].distance, 40.4018);
        let mg = check_gains_mg(&table::mg_gains(), 0.2, 0.1, 0.0018).unwrap();
        assert_eq!(mg.margins.len(), 7);
        close(mg.margins[6].distance, 171.02222222222224 - 30.673);
    }

    #[test]
    fn nan_gains_are_reported_not_raised() {
        let g = CdguGains { k1: f64::NAN, k2: 0.0, k3: 1.0 };
        let check = check_gains_cdgu(&g, 0.2).unwrap();
        assert!(!check.is_valid());
    }

    #[test]
    fn samplers_are_deterministic_and_valid() {
        let a = sample_gains_cdgu(0.2, 42, 0.1).unwrap();
        let b = sample_gains_cdgu(0.2, 42, 0.1).unwrap();
        assert_eq!(a, b);
        for seed in 0..64 {
            let g = sample_gains_cdgu(0.2, seed, 0.1).unwrap();
            assert!(check_gains_cdgu(&g, 0.2).unwrap().is_valid());
            let m = sample_gains_mg(0.2, 0.1, 0.0018, seed, 0.1).unwrap();
            let check = check_gains_mg(&m, 0.2, 0.1, 0.0018).unwrap();
            assert!(check.is_valid(), "seed {seed}: {}", check.violation_summary());
        }
    }

    #[test]
    fn sampler_honors_margin_scales() {
        let g = sample_gains_cdgu(0.2, 7, 0.5).unwrap();
        assert!(g.k1 <= 1.0 - 0.5);
        assert!(g.k2 <= 0.2 - 0.5 * 0.2);
        assert!(g.k3 >= 0.5);
        let m = sample_gains_mg(0.2, 0.1, 0.0018, 7, 0.25).unwrap();
        let bound = k3v_upper_bound(m.k1v, m.k2v, 0.1, 0.0018);
        assert!(m.k3v >= 0.25 * bound && m.k3v <= 0.75 * bound);
    }

    #[test]
    fn sampler_margin_domain() {
        assert!(sample_gains_cdgu(0.2, 0, 0.0).is_err());
        assert!(sample_gains_cdgu(0.2, 0, 1.0).is_err());
        assert!(sample_gains_mg(0.2, 0.1, 0.0018, 0, 0.5).is_err());
    }

    #[test]
    fn feedback_law_values_and_structure() {
        let g = UnitGains::Mg(table::mg_gains());
        let zero = control_input(&g, &DVector::zeros(5)).unwrap();
        assert_eq!(zero, DVector::from_vec(vec![0.0, 0.0]));

        let mut e1 = DVector::zeros(5);
        e1[0] = 1.0;
        let u = control_input(&g, &e1).unwrap();
        assert_eq!(u[0], -0.01);
        assert_eq!(u[1], -0.480);

        // current command ignores the grid-forming states
        let mut x = DVector::zeros(5);
        x[3] = 123.0;
        x[4] = -7.0;
        let u = control_input(&g, &x).unwrap();
        assert_eq!(u[0], 0.0);
        assert_ne!(u[1], 0.0);

        assert!(matches!(
            control_input(&g, &DVector::zeros(3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn closed_loop_entries_match_hand_arithmetic() {
        let f = closed_loop_cdgu(&table_aug_cdgu(), &table::cdgu_gains());
        close(f[(1, 0)], (-0.01 - 1.0) / 0.018);
        close(f[(1, 1)], (-2.7015 - 0.2) / 0.018);
        close(f[(1, 2)], 40.4018 / 0.018);
        assert_eq!(f.row(2), RowVector3::new(0.0, -1.0, 0.0));

        let f = closed_loop_mg(&table_aug_mg(), &table::mg_gains());
        close(f[(3, 0)], (-0.480 - 1.0) / 0.0018);
        close(f[(3, 3)], (-0.108 - 0.1) / 0.0018);
        close(f[(3, 4)], 30.673 / 0.0018);
        assert_eq!(f[(3, 1)], 0.0);
        assert_eq!(f[(3, 2)], 0.0);
    }

    #[test]
    fn standalone_module_closed_loop_is_stable() {
        let mut units = std::collections::BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Mg(table::mg_params(5.0)));
        let graph = ElectricalGraph::new(units, vec![]).unwrap();
        let mut gains = BTreeMap::new();
        gains.insert(UnitId(1), UnitGains::Mg(table::mg_gains()));
        let cluster = assemble_augmented(&graph, &gains).unwrap();
        let max_re = cluster
            .f
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((max_re - -17.17066913228905).abs() < 1e-8, "max Re {max_re}");
    }

    #[test]
    fn ring_assembly_layout() {
        let graph = presets::ring_graph();
        let cluster = assemble_augmented(&graph, &presets::ring_gains()).unwrap();
        assert_eq!(cluster.n_states(), 20);
        assert_eq!(cluster.unit_dim, 5);
        assert_eq!(cluster.state_labels[5], "V[2]");
        assert_eq!(cluster.offset_of(UnitId(3)).unwrap(), 10);
        // line (1,2) with R = 0.3 couples the voltage rows both ways
        close(cluster.f[(0, 5)], 1.0 / (0.3 * 2.2e-3));
        close(cluster.f[(5, 0)], 1.0 / (0.3 * 2.2e-3));
        // unit 1 diagonal drains into its load and its two lines
        let drain = -1.0 / (20.0 * 2.2e-3) - (1.0 / 0.3 + 1.0 / 0.7) / 2.2e-3;
        close(cluster.a_open[(0, 0)], drain);
        // feedback never crosses unit blocks
        let k_off = cluster.k.view((0, 5), (2, 15));
        assert!(k_off.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn disturbance_vector_layout_and_capacity_check() {
        let graph = presets::ring_graph();
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
        let d = disturbance_vector(&graph, &refs).unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert_eq!(d[2], 48.0);
        assert_eq!(d[4], 2.0);
        assert_eq!(d[11], 47.95);

        refs.get_mut(&UnitId(2)).unwrap().i_cap = 9.0;
        assert!(matches!(
            disturbance_vector(&graph, &refs),
            Err(Error::ParamDomain { .. })
        ));
    }

    proptest! {
        // lowering k1 or k2 never leaves the admissible set
        #[test]
        fn current_gain_set_is_downward_closed(
            k1 in -5.0..0.9f64,
            k2 in -5.0..0.1f64,
            k3 in 1e-6..100.0f64,
            d1 in 0.0..5.0f64,
            d2 in 0.0..5.0f64,
        ) {
            let base = CdguGains { k1, k2, k3 };
            prop_assert!(check_gains_cdgu(&base, 0.2).unwrap().is_valid());
            let lower = CdguGains { k1: k1 - d1, k2: k2 - d2, k3 };
            prop_assert!(check_gains_cdgu(&lower, 0.2).unwrap().is_valid());
        }

        #[test]
        fn sampled_mg_gains_are_always_valid(seed in 0u64..1000, margin in 0.01..0.49f64) {
            let g = sample_gains_mg(0.2, 0.1, 0.0018, seed, margin).unwrap();
            prop_assert!(check_gains_mg(&g, 0.2, 0.1, 0.0018).unwrap().is_valid());
        }
    }
}
