//! Built-in parameter table, the four-unit ring benchmark, and three
//! ready-made demonstration scenarios.
//!
//! The table values describe one converter design reused at four power
//! ratings, a ring of four microgrid modules joined by resistive lines, and
//! the stock feedback/PI gains that certify for it. The scenarios exercise
//! the three behaviors the toolkit exists to show: growing a cluster
//! unit by unit, leader consensus through the secondary layer, and a
//! plug-out/replug cycle.

use std::collections::BTreeMap;

use crate::consensus::{LeaderReference, SecondaryGains};
use crate::control::{CdguGains, MgGains, References, UnitGains};
use crate::lyapunov::CertificateConfig;
use crate::model::{CdguParams, ElectricalGraph, Line, Load, MgParams, UnitId, UnitParams};
use crate::sim::{
    Channel, Event, RefChange, Scenario, SecondaryConfig, SolverSettings,
};

/// Stock converter constants and controller gains.
pub mod table {
    use super::*;

    /// Bus capacitance, farads.
    pub const C_T: f64 = 2.2e-3;
    /// Grid-feeding filter inductance, henries.
    pub const L_TC: f64 = 18.0e-3;
    /// Grid-feeding filter resistance, ohms.
    pub const R_TC: f64 = 0.2;
    /// Grid-forming filter inductance, henries.
    pub const L_TV: f64 = 1.8e-3;
    /// Grid-forming filter resistance, ohms.
    pub const R_TV: f64 = 0.1;
    /// Default local load resistance, ohms.
    pub const R_LOAD: f64 = 20.0;
    /// Rated current capacities of the four ring units, amps.
    pub const I_CAPS: [f64; 4] = [5.0, 10.0, 15.0, 20.0];

    /// Grid-feeding unit at the given rating, with the default local load.
    pub fn cdgu_params(i_cap: f64) -> CdguParams {
        CdguParams {
            c_t: C_T,
            l_tc: L_TC,
            r_tc: R_TC,
            i_cap,
            load: Load { r_l: Some(R_LOAD), i_l: 0.0 },
        }
    }

    /// Microgrid module at the given rating, with the default local load.
    pub fn mg_params(i_cap: f64) -> MgParams {
        MgParams { cdgu: cdgu_params(i_cap), l_tv: L_TV, r_tv: R_TV }
    }

    /// Stock current-loop feedback.
    pub fn cdgu_gains() -> CdguGains {
        CdguGains { k1: -0.01, k2: -2.7015, k3: 40.4018 }
    }

    /// Stock microgrid feedback: the current triple plus the voltage triple.
    pub fn mg_gains() -> MgGains {
        MgGains { current: cdgu_gains(), k1v: -0.480, k2v: -0.108, k3v: 30.673 }
    }

    /// Stock secondary-layer PI gains.
    pub fn secondary_gains() -> SecondaryGains {
        SecondaryGains { kp_v: 4.0, ki_v: 22.0, kp_c: 3.0, ki_c: 20.0 }
    }
}

/// The benchmark ring's lines: resistances and inductances of the four
/// connections (1,2), (2,3), (3,4), (4,1).
pub fn ring_lines() -> Vec<Line> {
    vec![
        Line { a: UnitId(1), b: UnitId(2), r: 0.3, l: 1.8e-3 },
        Line { a: UnitId(2), b: UnitId(3), r: 0.6, l: 5.4e-3 },
        Line { a: UnitId(3), b: UnitId(4), r: 0.8, l: 7.2e-3 },
        Line { a: UnitId(4), b: UnitId(1), r: 0.7, l: 3.6e-3 },
    ]
}

/// Four microgrid modules at ratings 5/10/15/20 A in a ring.
pub fn ring_graph() -> ElectricalGraph {
    let mut units = BTreeMap::new();
    for (i, cap) in table::I_CAPS.iter().enumerate() {
        units.insert(UnitId(i as u32 + 1), UnitParams::Mg(table::mg_params(*cap)));
    }
    ElectricalGraph::new(units, ring_lines()).expect("benchmark ring is well-formed")
}

/// Stock gains for every ring unit.
pub fn ring_gains() -> BTreeMap<UnitId, UnitGains> {
    ring_graph()
        .unit_ids()
        .into_iter()
        .map(|id| (id, UnitGains::Mg(table::mg_gains())))
        .collect()
}

fn ring_refs(v_refs: [f64; 4], i_ref_pus: [f64; 4]) -> BTreeMap<UnitId, References> {
    (0..4)
        .map(|i| {
            (
                UnitId(i as u32 + 1),
                References {
                    v_ref: v_refs[i],
                    i_ref_pu: i_ref_pus[i],
                    i_cap: table::I_CAPS[i],
                },
            )
        })
        .collect()
}

fn ring_secondary(leader: LeaderReference) -> SecondaryConfig {
    SecondaryConfig {
        edges: vec![
            (UnitId(1), UnitId(2)),
            (UnitId(2), UnitId(3)),
            (UnitId(3), UnitId(4)),
            (UnitId(4), UnitId(1)),
        ],
        pinned: vec![UnitId(1)],
        gains: table::secondary_gains(),
        leader,
        period: 0.01,
        voltage_enabled: false,
        current_enabled: false,
    }
}

/// Names accepted by [`scenario`], in listing order.
pub const SCENARIO_NAMES: [&str; 3] =
    ["cluster-growth", "leader-consensus", "plug-out-replug"];

/// Looks up a built-in scenario by name.
pub fn scenario(name: &str) -> Option<Scenario> {
    match name {
        "cluster-growth" => Some(cluster_growth()),
        "leader-consensus" => Some(leader_consensus()),
        "plug-out-replug" => Some(plug_out_replug()),
        _ => None,
    }
}

/// One unit running alone, the other three plugging in live, then a current
/// reference step on each unit in turn. Primary control only: currents in
/// amps start at 1/2/3/4 and step to 2.5/3.5/1.5/5.5.
pub fn cluster_growth() -> Scenario {
    let caps = table::I_CAPS;
    let v_refs = [48.0, 47.9, 48.1, 47.95];
    let lines = ring_lines();

    let mut units = BTreeMap::new();
    units.insert(UnitId(1), UnitParams::Mg(table::mg_params(caps[0])));
    let graph = ElectricalGraph::new(units, vec![]).expect("single unit is well-formed");

    let mut gains = BTreeMap::new();
    gains.insert(UnitId(1), UnitGains::Mg(table::mg_gains()));
    let mut refs = BTreeMap::new();
    refs.insert(UnitId(1), References { v_ref: v_refs[0], i_ref_pu: 0.2, i_cap: caps[0] });

    let connect = |i: usize, event_lines: Vec<Line>| Event::ConnectUnit {
        id: UnitId(i as u32 + 1),
        params: UnitParams::Mg(table::mg_params(caps[i])),
        gains: UnitGains::Mg(table::mg_gains()),
        refs: References { v_ref: v_refs[i], i_ref_pu: 0.2, i_cap: caps[i] },
        lines: event_lines,
    };

    Scenario {
        graph,
        gains,
        refs,
        events: vec![
            (0.5, connect(1, vec![lines[0]])),
            (0.5, connect(2, vec![lines[1]])),
            (2.5, connect(3, vec![lines[2], lines[3]])),
            (4.5, Event::SetPrimaryRef { id: UnitId(1), change: RefChange::CurrentPu(0.5) }),
            (6.5, Event::SetPrimaryRef { id: UnitId(2), change: RefChange::CurrentPu(0.35) }),
            (8.5, Event::SetPrimaryRef { id: UnitId(3), change: RefChange::CurrentPu(0.1) }),
            (10.5, Event::SetPrimaryRef { id: UnitId(4), change: RefChange::CurrentPu(0.275) }),
        ],
        solver: SolverSettings { duration: 13.0, ..Default::default() },
        secondary: None,
        certificate: CertificateConfig::default(),
    }
}

/// The full ring with heterogeneous primary references; the secondary layer
/// comes up channel by channel and pulls everything onto the leader values,
/// then the leader steps to 49 V / 0.4 p.u.
pub fn leader_consensus() -> Scenario {
    Scenario {
        graph: ring_graph(),
        gains: ring_gains(),
        refs: ring_refs([47.9, 48.05, 48.1, 47.95], [0.2, 0.25, 0.3, 0.35]),
        events: vec![
            (1.5, Event::EnableSecondary { channel: Channel::Voltage }),
            (4.5, Event::EnableSecondary { channel: Channel::Current }),
            (8.5, Event::SetLeaderRef { change: RefChange::Voltage(49.0) }),
            (8.5, Event::SetLeaderRef { change: RefChange::CurrentPu(0.4) }),
        ],
        solver: SolverSettings { duration: 14.0, ..Default::default() },
        secondary: Some(ring_secondary(LeaderReference { v_ref: 48.0, i_ref_pu: 0.3 })),
        certificate: CertificateConfig::default(),
    }
}

/// Consensus on the ring, then unit 2 plugs out (running standalone on its
/// primary references) and plugs back in.
pub fn plug_out_replug() -> Scenario {
    let lines = ring_lines();
    Scenario {
        graph: ring_graph(),
        gains: ring_gains(),
        refs: ring_refs([47.9, 47.8, 48.1, 47.95], [0.2, 0.25, 0.3, 0.35]),
        events: vec![
            (1.5, Event::EnableSecondary { channel: Channel::Voltage }),
            (3.0, Event::EnableSecondary { channel: Channel::Current }),
            (6.5, Event::DisconnectUnit { id: UnitId(2) }),
            (
                9.5,
                Event::ConnectUnit {
                    id: UnitId(2),
                    params: UnitParams::Mg(table::mg_params(table::I_CAPS[1])),
                    gains: UnitGains::Mg(table::mg_gains()),
                    refs: References { v_ref: 47.8, i_ref_pu: 0.25, i_cap: table::I_CAPS[1] },
                    lines: vec![lines[0], lines[1]],
                },
            ),
        ],
        solver: SolverSettings { duration: 15.0, ..Default::default() },
        secondary: Some(ring_secondary(LeaderReference { v_ref: 48.0, i_ref_pu: 0.3 })),
        certificate: CertificateConfig::default(),
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::validate_scenario;

    #[test]
    fn ring_is_a_connected_four_cycle() {
        let graph = ring_graph();
        assert_eq!(graph.len(), 4);
        assert_eq!(graph.lines().len(), 4);
        assert!(graph.is_connected());
        for id in graph.unit_ids() {
            assert_eq!(graph.neighbor_lines(id).len(), 2);
        }
    }

    #[test]
    fn every_scenario_preset_validates() {
        for name in SCENARIO_NAMES {
            let s = scenario(name).unwrap();
            validate_scenario(&s)
                .unwrap_or_else(|e| panic!("preset {name} failed validation: {e}"));
        }
        assert!(scenario("no-such-preset").is_none());
    }

    #[test]
    fn growth_preset_reaches_the_full_ring() {
        let s = cluster_growth();
        assert_eq!(s.graph.len(), 1);
        let connects = s
            .events
            .iter()
            .filter(|(_, e)| matches!(e, Event::ConnectUnit { .. }))
            .count();
        assert_eq!(connects, 3);
        assert!(s.solver.duration >= s.events.last().unwrap().0);
    }

    #[test]
    fn consensus_presets_pin_the_leader_at_unit_one() {
        for name in ["leader-consensus", "plug-out-replug"] {
            let s = scenario(name).unwrap();
            let sec = s.secondary.expect("consensus preset has a secondary layer");
            assert_eq!(sec.pinned, vec![UnitId(1)]);
            assert_eq!(sec.edges.len(), 4);
            assert_eq!(sec.period, 0.01);
        }
    }
}
