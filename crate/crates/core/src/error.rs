//! Error type shared by all core modules.

use crate::model::UnitId;

/// Everything that can go wrong while building models, certificates, or runs.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// A physical or solver parameter is outside its domain.
    #[error("{name} must be {requirement}, got {value}")]
    ParamDomain {
        name: String,
        requirement: &'static str,
        value: f64,
    },

    /// Structural problem in an electrical graph (dangling line, duplicate
    /// pair, kind mismatch, ...).
    #[error("topology error: {0}")]
    Topology(String),

    /// An operation referenced a unit id that is not in the cluster.
    #[error("unknown unit id {0}")]
    UnknownUnit(UnitId),

    /// A unit id was added twice.
    #[error("duplicate unit id {0}")]
    DuplicateUnit(UnitId),

    /// Controller gains violate the stabilizing inequality set.
    #[error("gains rejected for {who}: {violations}")]
    GainsRejected { who: String, violations: String },

    /// A vector or matrix argument has the wrong size.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Cluster-level certificate construction requires one shared sigma_bar.
    #[error("mixed sigma_bar across units: {0}")]
    MixedSigmaBar(String),

    /// An operation that requires a certified certificate got a failed one.
    #[error("certificate not certified: {0}")]
    NotCertified(String),

    /// Problem in the communication graph backing the secondary layer.
    #[error("communication graph invalid: {0}")]
    CommGraph(String),

    /// Scenario-level validation failure.
    #[error("invalid scenario: {0}")]
    Scenario(String),

    /// A state component left the guard band during integration.
    #[error("simulation diverged at t = {t}: |{label}| = {value:e} exceeds {limit:e}")]
    Diverged {
        t: f64,
        label: String,
        value: f64,
        limit: f64,
    },

    /// A linear solve hit a singular matrix.
    #[error("singular linear system: {0}")]
    Singular(String),
}
