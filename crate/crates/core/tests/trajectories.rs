//! Cross-module trajectory invariants: the summed storage function is
//! monotone along coupled transients, and the fixed-step integrator shows
//! its design order on a smooth segment.

use std::collections::BTreeMap;

use dcgrid_core::control::{assemble_augmented, disturbance_vector, References, UnitGains};
use dcgrid_core::lyapunov::{build_pq_mg, CertificateConfig};
use dcgrid_core::model::UnitId;
use dcgrid_core::presets::{self, table};
use dcgrid_core::sim::{run, steady_state, LiveState, Scenario, SolverSettings};
use nalgebra::{DMatrix, DVector};

/// The ring starts with every unit parked on its own isolated equilibrium,
/// which is not the coupled one, so closing the lines excites a transient.
/// The sum of the per-unit storage functions around the coupled equilibrium
/// must never grow along it.
#[test]
fn stored_energy_decreases_along_the_coupled_transient() {
    let graph = presets::ring_graph();
    let gains = presets::ring_gains();
    let refs: BTreeMap<UnitId, References> = ring_refs();
    let cfg = CertificateConfig::default();

    let cluster = assemble_augmented(&graph, &gains).unwrap();
    let d = disturbance_vector(&graph, &refs).unwrap();
    let drive = &cluster.m * &d;
    let eq = steady_state(&graph, &gains, &refs).unwrap();

    // Block-diagonal P over the (certified) per-unit pairs, in unit order.
    let n = cluster.n_states();
    let mut p = DMatrix::zeros(n, n);
    for (idx, &id) in cluster.ids.iter().enumerate() {
        let mg = match graph.unit(id).unwrap() {
            dcgrid_core::model::UnitParams::Mg(m) => *m,
            dcgrid_core::model::UnitParams::Cdgu(_) => unreachable!("ring is all microgrids"),
        };
        let g = match gains[&id] {
            UnitGains::Mg(g) => g,
            UnitGains::Cdgu(_) => unreachable!(),
        };
        let cert = build_pq_mg(&g, &mg, &cfg).unwrap();
        assert!(cert.verdict.is_certified());
        let o = idx * 5;
        p.view_mut((o, o), (5, 5)).copy_from(&cert.p);
    }
    let energy = |x: &DVector<f64>| {
        let err = x - &eq.x;
        (err.transpose() * &p * err)[(0, 0)]
    };

    let live = LiveState::new(graph, gains, refs).unwrap();
    let mut x = live.state_vector().clone();

    let h = 2e-5;
    let steps_per_sample = 500; // 10 ms between energy samples
    let samples = 150; // 1.5 s total
    let mut last = energy(&x);
    let initial = last;
    assert!(initial > 1e-3, "transient too small to be meaningful, V0 = {initial}");

    let deriv = |x: &DVector<f64>| &cluster.f * x + &drive;
    for sample in 0..samples {
        for _ in 0..steps_per_sample {
            let k1 = deriv(&x);
            let k2 = deriv(&(&x + &k1 * (h / 2.0)));
            let k3 = deriv(&(&x + &k2 * (h / 2.0)));
            let k4 = deriv(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let now = energy(&x);
        assert!(
            now <= last * (1.0 + 1e-6) + 1e-12 * initial,
            "storage function grew at sample {sample}: {last} -> {now}"
        );
        last = now;
    }
    assert!(
        last < 1e-6 * initial,
        "storage function should have collapsed, {initial} -> {last}"
    );
}

/// Halving the step must shrink the endpoint error sixteenfold. The run is a
/// short smooth transient (no events, no sampling inside the comparison
/// window other than the shared grid), compared against a much finer
/// reference.
#[test]
fn integrator_shows_fourth_order_convergence() {
    let base = Scenario {
        graph: presets::ring_graph(),
        gains: presets::ring_gains(),
        refs: ring_refs(),
        events: vec![],
        solver: SolverSettings { dt: 5e-6, duration: 0.02, decimation: 1e-3, seed: 0 },
        secondary: None,
        certificate: CertificateConfig::default(),
    };
    let reference = run(&base).unwrap().final_state;

    let endpoint = |dt: f64| {
        let scenario =
            Scenario { solver: SolverSettings { dt, ..base.solver }, ..base.clone() };
        run(&scenario).unwrap().final_state
    };
    // Steps coarse enough that truncation dominates roundoff: at the
    // production step of 1e-5 the endpoint error is already below 1e-12 on
    // this transient, which is unmeasurable.
    let err_coarse = (endpoint(2e-4) - &reference).amax();
    let err_fine = (endpoint(1e-4) - &reference).amax();

    assert!(err_coarse > 1e-10, "coarse error {err_coarse} too close to roundoff to measure order");
    let order = (err_coarse / err_fine).log2();
    assert!(
        order > 3.5,
        "observed convergence order {order:.2} (errors {err_coarse:.3e} -> {err_fine:.3e})"
    );
}

fn ring_refs() -> BTreeMap<UnitId, References> {
    let v_refs = [48.0, 47.9, 48.1, 47.95];
    let pu = [0.2, 0.25, 0.3, 0.35];
    (0..4)
        .map(|i| {
            (
                UnitId(i as u32 + 1),
                References { v_ref: v_refs[i], i_ref_pu: pu[i], i_cap: table::I_CAPS[i] },
            )
        })
        .collect()
}
