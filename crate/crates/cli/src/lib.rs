//! Library half of the command-line front end: the scenario file format and
//! the CSV trace writer. The binary in `main.rs` is a thin dispatcher over
//! these.

pub mod scenario_file;
pub mod trace_csv;
