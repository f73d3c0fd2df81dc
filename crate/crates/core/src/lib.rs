//! Core library for simulating and verifying DC microgrid clusters.
//!
//! A cluster is a set of converter units joined by resistive lines. Two unit
//! flavors exist: grid-feeding units (current-controlled converter behind an
//! RL filter, `Cdgu`) and full microgrid modules (`Mg`: the same bus fed by
//! both a grid-forming and a grid-feeding converter). Each unit runs a local
//! state-feedback PI controller designed from unit parameters alone, so units
//! can plug in and out without re-tuning the rest of the cluster.
//!
//! The crate is organized around that workflow:
//!
//! * [`model`]: per-unit state-space models and global cluster assembly.
//! * [`control`]: integrator augmentation, stabilizing gain sets, sampling,
//!   and the control law.
//! * [`lyapunov`]: structured Lyapunov certificates, the cluster-level
//!   coupling matrix, and eigenvalue-based global stability verification.
//! * [`consensus`]: leader-based distributed secondary layer (voltage
//!   restoration and proportional current sharing over a communication graph).
//! * [`sim`]: fixed-step RK4 scenario simulation with plug-in/out events.
//! * [`presets`]: ready-made four-unit benchmark scenarios.

pub mod consensus;
pub mod control;
pub mod error;
pub mod lyapunov;
pub mod model;
pub mod presets;
pub mod sim;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
