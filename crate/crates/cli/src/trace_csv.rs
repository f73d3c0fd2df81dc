//! CSV rendering of a simulation trace. One row per decimated sample, one
//! column block per unit; a topology change starts a new header, announced
//! by a `#` comment row, since the column set changes with the unit roster.
//!
//! Numbers are written in Rust's shortest round-trip decimal form, so a
//! reader recovers the exact binary values.

use std::io::{self, Write};

use dcgrid_core::model::{UnitParams, UnitId};
use dcgrid_core::sim::{RunOutput, Scenario, TraceEpoch};

/// Per-unit column block: grid-forming signals only where the unit has them.
fn push_unit_columns(header: &mut String, id: UnitId, is_mg: bool) {
    let id = id.0;
    header.push_str(&format!(",V[{id}],ItC[{id}],ItCpu[{id}]"));
    if is_mg {
        header.push_str(&format!(",ItV[{id}]"));
    }
    header.push_str(&format!(",uC[{id}]"));
    if is_mg {
        header.push_str(&format!(",uV[{id}]"));
    }
    header.push_str(&format!(",dV[{id}],dIpu[{id}],eV[{id}],eC[{id}]"));
}

fn write_epoch<W: Write>(w: &mut W, epoch: &TraceEpoch, announce: bool) -> io::Result<()> {
    let Some(first) = epoch.records.first() else {
        return Ok(());
    };
    if announce {
        let ids: Vec<String> = epoch.unit_ids.iter().map(|id| id.0.to_string()).collect();
        writeln!(w, "# epoch: units {}", ids.join(","))?;
    }
    let mut header = String::from("t");
    for sample in &first.units {
        push_unit_columns(&mut header, sample.id, sample.i_v.is_some());
    }
    writeln!(w, "{header}")?;

    let mut row = String::new();
    for rec in &epoch.records {
        row.clear();
        row.push_str(&format!("{}", rec.t));
        for s in &rec.units {
            row.push_str(&format!(",{},{},{}", s.v, s.i_c, s.i_c_pu));
            if let Some(i_v) = s.i_v {
                row.push_str(&format!(",{i_v}"));
            }
            row.push_str(&format!(",{}", s.u_c));
            if let Some(u_v) = s.u_v {
                row.push_str(&format!(",{u_v}"));
            }
            row.push_str(&format!(",{},{},{},{}", s.delta_v, s.delta_i_pu, s.e_v, s.e_c));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Writes the whole trace. A run with no samples (zero duration) still gets
/// a header row describing the scenario's initial units.
pub fn write_trace_csv<W: Write>(
    w: &mut W,
    scenario: &Scenario,
    output: &RunOutput,
) -> io::Result<()> {
    let mut wrote_any = false;
    for epoch in &output.trace.epochs {
        if epoch.records.is_empty() {
            continue;
        }
        write_epoch(w, epoch, wrote_any)?;
        wrote_any = true;
    }
    if !wrote_any {
        let mut header = String::from("t");
        for (&id, params) in scenario.graph.units() {
            push_unit_columns(&mut header, id, matches!(params, UnitParams::Mg(_)));
        }
        writeln!(w, "{header}")?;
    }
    Ok(())
}
