//! Structured Lyapunov certificates and cluster-level stability checks.
//!
//! For every unit with admissible gains there is a closed-form pair (P, Q)
//! with `FᵀP + PF = Q`, P positive definite and Q negative semidefinite. The
//! shapes are fixed in advance: P is diagonal for a grid-feeding unit and
//! block-diagonal with one 2×2 grid-forming block for a microgrid module, and
//! Q touches only the states with direct feedback. Everything here evaluates
//! those closed forms and then confirms them numerically, so a certificate is
//! never taken on faith from the algebra alone.
//!
//! The free scale σ̄ must be shared by all units: the cluster-level argument
//! sums the per-unit functions, and the cross terms only cancel into the
//! symmetric matrix built by [`build_cluster_matrix`] when every unit uses
//! the same σ̄.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::control::{
    augment_cdgu, augment_mg, check_unit_gains, closed_loop_cdgu, closed_loop_mg,
    require_valid_gains, AugmentedCluster, CdguGains, MgGains, UnitGains, assemble_augmented,
    check_gains_cdgu, check_gains_mg,
};
use crate::error::Error;
use crate::model::{
    build_cdgu_local, build_mg_local, CdguParams, ElectricalGraph, MgParams, UnitId,
};
use crate::Result;

/// Relative bound on `‖FᵀP + PF − Q‖ / (‖P‖·‖F‖)` (Frobenius norms) for a
/// certificate to count as numerically confirmed.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;

/// How to pick the free diagonal entry of the current-loop block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum P22Choice {
    /// Use the coupling relation `(1 − k1C)·p22 = σ̄·L_tC`, the only value
    /// that makes the closed forms an exact Lyapunov pair.
    Auto,
    /// User-supplied value; the residual check will fail unless it happens to
    /// satisfy the coupling relation, and the verdict says so.
    Fixed(f64),
}

/// Knobs shared by all certificate construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateConfig {
    /// Common scale σ̄ of every unit's storage function.
    pub sigma_bar: f64,
    pub p22c: P22Choice,
    /// Relative eigenvalue tolerance for semidefiniteness verdicts.
    pub psd_tol: f64,
    /// Absolute margin required of `max Re(λ)` for the global verdict.
    pub stability_margin_tol: f64,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            sigma_bar: 1.0,
            p22c: P22Choice::Auto,
            psd_tol: 1e-9,
            stability_margin_tol: 1e-9,
        }
    }
}

impl CertificateConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v, req) in [
            ("sigma_bar", self.sigma_bar, "finite and > 0"),
            ("psd_tol", self.psd_tol, "finite and > 0"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ParamDomain { name: name.into(), requirement: req, value: v });
            }
        }
        if !(self.stability_margin_tol.is_finite() && self.stability_margin_tol >= 0.0) {
            return Err(Error::ParamDomain {
                name: "stability_margin_tol".into(),
                requirement: "finite and >= 0",
                value: self.stability_margin_tol,
            });
        }
        if let P22Choice::Fixed(v) = self.p22c {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ParamDomain {
                    name: "p22C".into(),
                    requirement: "finite and > 0",
                    value: v,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Certified,
    Failed(String),
}

impl Verdict {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verdict::Certified)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Verdict::Certified => write!(f, "certified"),
            Verdict::Failed(reason) => write!(f, "failed({reason})"),
        }
    }
}

/// One unit's Lyapunov pair plus the numeric evidence for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub eig_p_min: f64,
    pub eig_q_max: f64,
    /// `‖FᵀP + PF − Q‖` in Frobenius norm.
    pub residual: f64,
    pub verdict: Verdict,
}

fn finish_certificate(
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    f: &DMatrix<f64>,
    cfg: &CertificateConfig,
    fixed_p22: bool,
) -> Certificate {
    let eig_p_min = sym_eig_min(&p);
    let eig_q_max = sym_eig_max(&q);
    let residual = (f.transpose() * &p + &p * f - &q).norm();
    let q_scale = q.norm();
    let residual_bound = LYAPUNOV_RESIDUAL_TOL * p.norm() * f.norm();

    let verdict = if eig_p_min <= 0.0 || eig_p_min.is_nan() {
        Verdict::Failed(format!("P not positive definite (min eigenvalue {eig_p_min})"))
    } else if eig_q_max > cfg.psd_tol * q_scale {
        Verdict::Failed(format!(
            "Q not negative semidefinite (max eigenvalue {eig_q_max})"
        ))
    } else if residual > residual_bound {
        if fixed_p22 {
            Verdict::Failed(format!(
                "Lyapunov residual {residual} exceeds {residual_bound}; the supplied p22C \
                 does not satisfy the coupling relation (1 - k1C)*p22C = sigma_bar*L_tC"
            ))
        } else {
            Verdict::Failed(format!(
                "Lyapunov residual {residual} exceeds {residual_bound}"
            ))
        }
    } else {
        Verdict::Certified
    };

    Certificate { p, q, eig_p_min, eig_q_max, residual, verdict }
}

fn resolve_p22(g: &CdguGains, l_tc: f64, cfg: &CertificateConfig) -> (f64, bool) {
    match cfg.p22c {
        P22Choice::Auto => (cfg.sigma_bar * l_tc / (1.0 - g.k1), false),
        P22Choice::Fixed(v) => (v, true),
    }
}

/// Builds the grid-feeding certificate
/// `P = diag(η, p22, (k3/L)·p22)`, `Q = 2(k2 − R)/L·p22` at the current
/// state, with `η = σ̄·C_t`.
pub fn build_pq_cdgu(
    g: &CdguGains,
    p: &CdguParams,
    cfg: &CertificateConfig,
) -> Result<Certificate> {
    cfg.validate()?;
    p.validate()?;
    require_valid_gains("grid-feeding gains", &check_gains_cdgu(g, p.r_tc)?)?;

    let eta = cfg.sigma_bar * p.c_t;
    let (p22, fixed) = resolve_p22(g, p.l_tc, cfg);
    let pm = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
        eta,
        p22,
        g.k3 / p.l_tc * p22,
    ]));
    let mut qm = DMatrix::zeros(3, 3);
    qm[(1, 1)] = 2.0 * (g.k2 - p.r_tc) / p.l_tc * p22;

    let aug = augment_cdgu(&build_cdgu_local(p, &[])?);
    let f3 = closed_loop_cdgu(&aug, g);
    let f = DMatrix::from_fn(3, 3, |i, j| f3[(i, j)]);
    Ok(finish_certificate(pm, qm, &f, cfg, fixed))
}

/// Builds the microgrid certificate: the grid-feeding blocks plus the
/// grid-forming 2×2 blocks
///
/// ```text
/// P44V = σ̄/h · [ L(k2V−R)      L·k3V          ]      h = L·k3V − (k1V−1)(k2V−R)
///               [ L·k3V         k3V(k1V−1)     ]
/// Q44V = 2σ̄/h · [ (k2V−R)²      k3V(k2V−R) ]
///                [ k3V(k2V−R)   k3V²        ]
/// ```
///
/// Admissible gains force `h < 0`, which makes P44V positive definite and the
/// rank-one Q44V negative semidefinite.
pub fn build_pq_mg(g: &MgGains, p: &MgParams, cfg: &CertificateConfig) -> Result<Certificate> {
    cfg.validate()?;
    p.validate()?;
    require_valid_gains(
        "microgrid gains",
        &check_gains_mg(g, p.cdgu.r_tc, p.r_tv, p.l_tv)?,
    )?;

    let sigma = cfg.sigma_bar;
    let eta = sigma * p.cdgu.c_t;
    let (p22, fixed) = resolve_p22(&g.current, p.cdgu.l_tc, cfg);

    let dv = g.k2v - p.r_tv;
    let h = p.l_tv * g.k3v - (g.k1v - 1.0) * dv;
    let p44 = sigma * p.l_tv * dv / h;
    let p45 = sigma * p.l_tv * g.k3v / h;
    let p55 = sigma * g.k3v * (g.k1v - 1.0) / h;

    let mut pm = DMatrix::zeros(5, 5);
    pm[(0, 0)] = eta;
    pm[(1, 1)] = p22;
    pm[(2, 2)] = g.current.k3 / p.cdgu.l_tc * p22;
    pm[(3, 3)] = p44;
    pm[(3, 4)] = p45;
    pm[(4, 3)] = p45;
    pm[(4, 4)] = p55;

    let mut qm = DMatrix::zeros(5, 5);
    qm[(1, 1)] = 2.0 * (g.current.k2 - p.cdgu.r_tc) / p.cdgu.l_tc * p22;
    qm[(3, 3)] = 2.0 * sigma * dv * dv / h;
    qm[(3, 4)] = 2.0 * sigma * g.k3v * dv / h;
    qm[(4, 3)] = qm[(3, 4)];
    qm[(4, 4)] = 2.0 * sigma * g.k3v * g.k3v / h;

    let aug = augment_mg(&build_mg_local(p, &[])?);
    let f5 = closed_loop_mg(&aug, g);
    let f = DMatrix::from_fn(5, 5, |i, j| f5[(i, j)]);
    Ok(finish_certificate(pm, qm, &f, cfg, fixed))
}

/// Orthonormal basis (columns) of `{w : wᵀQw = 0}` for a certified
/// grid-feeding certificate. Since Q is negative semidefinite this is exactly
/// the null space of Q; analytically it is span{e1, e3}.
pub fn quadratic_kernel_cdgu(cert: &Certificate) -> Result<DMatrix<f64>> {
    require_certified(cert)?;
    Ok(null_space_sym(&cert.q, 1e-9))
}

/// Numeric kernel of a microgrid certificate plus the analytic mixing ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct MgKernel {
    /// Orthonormal basis of the null space of Q (3 columns for valid gains).
    pub basis: DMatrix<f64>,
    /// The grid-forming kernel direction is `e4 + delta·e5` with
    /// `delta = −(k2V − R_tV)/k3V`.
    pub delta: f64,
}

/// Kernel of a certified microgrid certificate: analytically
/// span{e1, e3, e4 + δ·e5}.
pub fn quadratic_kernel_mg(cert: &Certificate, g: &MgGains, r_tv: f64) -> Result<MgKernel> {
    require_certified(cert)?;
    let delta = -(g.k2v - r_tv) / g.k3v;
    Ok(MgKernel { basis: null_space_sym(&cert.q, 1e-9), delta })
}

fn require_certified(cert: &Certificate) -> Result<()> {
    match &cert.verdict {
        Verdict::Certified => Ok(()),
        Verdict::Failed(reason) => Err(Error::NotCertified(reason.clone())),
    }
}

/// Largest principal angle (radians) between the column spans of `a` and `b`.
/// Spans of different dimension are maximally apart by convention.
pub fn subspace_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormal_columns(a);
    let qb = orthonormal_columns(b);
    if qa.ncols() != qb.ncols() {
        return std::f64::consts::FRAC_PI_2;
    }
    if qa.ncols() == 0 {
        return 0.0;
    }
    // sine formulation (largest singular value of the projection residual):
    // the cosine route through acos(sigma_min) cannot resolve angles below
    // sqrt(machine epsilon), which the kernel comparisons need
    let residual = &qb - &qa * (qa.transpose() * &qb);
    let sigma_max = residual
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    sigma_max.clamp(0.0, 1.0).asin()
}

fn orthonormal_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("svd with u requested");
    let smax = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > 1e-12 * smax.max(1.0))
        .count();
    u.columns(0, rank).clone_owned()
}

fn null_space_sym(q: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let se = q.clone().symmetric_eigen();
    let scale = se.eigenvalues.amax();
    let keep: Vec<usize> = (0..se.eigenvalues.len())
        .filter(|&i| se.eigenvalues[i].abs() <= rel_tol * scale.max(1e-300))
        .collect();
    let mut basis = DMatrix::zeros(q.nrows(), keep.len());
    for (col, &i) in keep.iter().enumerate() {
        basis.set_column(col, &se.eigenvectors.column(i));
    }
    basis
}

fn sym_eig_min(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn sym_eig_max(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest real part over the eigenvalues of a (generally non-symmetric)
/// square matrix.
pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Builds the cluster-level interaction matrix over the bus voltages:
/// diagonal `−2σ̄/R_L,i − Σ_j 2σ̄/R_ij`, off-diagonal `2σ̄/R_ij`.
///
/// The result is symmetric because σ̄ is shared. With a resistive load at
/// every unit it is negative definite; without loads it is a (negated)
/// weighted Laplacian, negative semidefinite with null vector 1.
pub fn build_cluster_matrix(
    graph: &ElectricalGraph,
    cfg: &CertificateConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let sigmas: BTreeMap<UnitId, f64> = graph
        .unit_ids()
        .into_iter()
        .map(|id| (id, cfg.sigma_bar))
        .collect();
    build_cluster_matrix_with_sigmas(graph, &sigmas)
}

/// Variant taking an explicit per-unit σ̄ map; rejects mixed values because
/// the interaction matrix is only symmetric (and the summed certificate only
/// telescopes) when every unit shares the scale.
pub fn build_cluster_matrix_with_sigmas(
    graph: &ElectricalGraph,
    sigmas: &BTreeMap<UnitId, f64>,
) -> Result<DMatrix<f64>> {
    if graph.is_empty() {
        return Err(Error::Topology("cannot build the cluster matrix of an empty cluster".into()));
    }
    let ids = graph.unit_ids();
    let mut shared: Option<f64> = None;
    for id in &ids {
        let s = *sigmas
            .get(id)
            .ok_or_else(|| Error::Topology(format!("no sigma_bar provided for unit {id}")))?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::ParamDomain {
                name: format!("sigma_bar (unit {id})"),
                requirement: "finite and > 0",
                value: s,
            });
        }
        match shared {
            None => shared = Some(s),
            Some(prev) if prev == s => {}
            Some(prev) => {
                return Err(Error::MixedSigmaBar(format!(
                    "unit {id} uses sigma_bar {s} but an earlier unit uses {prev}"
                )))
            }
        }
    }
    let sigma = shared.expect("non-empty cluster");

    let n = ids.len();
    let index_of: BTreeMap<UnitId, usize> = ids.iter().copied().zip(0..).collect();
    let mut l = DMatrix::zeros(n, n);
    for (idx, id) in ids.iter().enumerate() {
        if let Some(r_l) = graph.unit(*id)?.cdgu().load.r_l {
            l[(idx, idx)] -= 2.0 * sigma / r_l;
        }
    }
    for line in graph.lines() {
        let ia = index_of[&line.a];
        let ib = index_of[&line.b];
        let w = 2.0 * sigma / line.r;
        l[(ia, ib)] += w;
        l[(ib, ia)] += w;
        l[(ia, ia)] -= w;
        l[(ib, ib)] -= w;
    }
    Ok(l)
}

/// Cluster-level stability verdict with the per-unit evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub certified: bool,
    /// Largest real part over the assembled closed-loop eigenvalues.
    pub max_re: f64,
    pub stability_margin_tol: f64,
    /// Largest eigenvalue of the cluster interaction matrix.
    pub cluster_eig_max: f64,
    pub n_units: usize,
    pub components: usize,
    pub unit_reports: Vec<(UnitId, Certificate)>,
}

impl StabilityReport {
    /// Flat key-value rendering consumed by the CLI.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "certified = {}", self.certified);
        let _ = writeln!(out, "units = {}", self.n_units);
        let _ = writeln!(out, "components = {}", self.components);
        let _ = writeln!(out, "max_re_closed_loop = {}", self.max_re);
        let _ = writeln!(out, "stability_margin_tol = {}", self.stability_margin_tol);
        let _ = writeln!(out, "cluster_matrix_max_eig = {}", self.cluster_eig_max);
        for (id, cert) in &self.unit_reports {
            let _ = writeln!(out, "unit.{id}.verdict = {}", cert.verdict);
            let _ = writeln!(out, "unit.{id}.p_min_eig = {}", cert.eig_p_min);
            let _ = writeln!(out, "unit.{id}.q_max_eig = {}", cert.eig_q_max);
            let _ = writeln!(out, "unit.{id}.lyapunov_residual = {}", cert.residual);
        }
        out
    }
}

/// Certifies a whole cluster: per-unit gain checks (hard precondition),
/// per-unit certificates, the interaction matrix, and the eigenvalues of the
/// assembled closed loop including load and line terms.
///
/// A disconnected graph is fine: the closed loop is block-structured, so its
/// spectrum is the union of the component spectra and the verdict covers
/// every island at once.
pub fn verify_global_stability(
    graph: &ElectricalGraph,
    gains: &BTreeMap<UnitId, UnitGains>,
    cfg: &CertificateConfig,
) -> Result<StabilityReport> {
    cfg.validate()?;
    if graph.is_empty() {
        return Err(Error::Topology("cannot verify an empty cluster".into()));
    }

    let mut unit_reports = Vec::new();
    for (&id, params) in graph.units() {
        let g = gains
            .get(&id)
            .ok_or_else(|| Error::Topology(format!("no gains provided for unit {id}")))?;
        let check = check_unit_gains(g, params)?;
        require_valid_gains(&format!("unit {id}"), &check)?;
        let cert = match (g, params) {
            (UnitGains::Cdgu(g), crate::model::UnitParams::Cdgu(p)) => build_pq_cdgu(g, p, cfg)?,
            (UnitGains::Mg(g), crate::model::UnitParams::Mg(p)) => build_pq_mg(g, p, cfg)?,
            _ => unreachable!("flavor mismatch caught by check_unit_gains"),
        };
        unit_reports.push((id, cert));
    }

    let cluster: AugmentedCluster = assemble_augmented(graph, gains)?;
    let max_re = max_real_eigenvalue(&cluster.f);
    let l = build_cluster_matrix(graph, cfg)?;
    let cluster_eig_max = sym_eig_max(&l);

    let all_units_certified = unit_reports.iter().all(|(_, c)| c.verdict.is_certified());
    let certified =
        max_re < -cfg.stability_margin_tol && all_units_certified && cluster_eig_max < 0.0;

    Ok(StabilityReport {
        certified,
        max_re,
        stability_margin_tol: cfg.stability_margin_tol,
        cluster_eig_max,
        n_units: graph.len(),
        components: graph.components().len(),
        unit_reports,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClusterKind, UnitParams};
    use crate::presets::{self, table};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    fn cdgu_cert() -> Certificate {
        build_pq_cdgu(
            &table::cdgu_gains(),
            &table::cdgu_params(5.0),
            &CertificateConfig::default(),
        )
        .unwrap()
    }

    fn mg_cert() -> Certificate {
        build_pq_mg(
            &table::mg_gains(),
            &table::mg_params(5.0),
            &CertificateConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn cdgu_certificate_closed_forms() {
        let cert = cdgu_cert();
        close(cert.p[(0, 0)], 0.0022);
        close(cert.p[(1, 1)], 0.01782178217821782);
        close(cert.p[(2, 2)], 40.4018 / 0.018 * 0.01782178217821782);
        close(cert.q[(1, 1)], -5.745544554455446);
        assert_eq!(cert.q[(0, 0)], 0.0);
        assert_eq!(cert.q[(2, 2)], 0.0);
        assert!(cert.residual < 1e-12, "residual {}", cert.residual);
        close(cert.eig_p_min, 0.0022);
        assert!(cert.eig_q_max.abs() < 1e-12);
        assert!(cert.verdict.is_certified());
    }

    #[test]
    fn mg_certificate_closed_forms() {
        let cert = mg_cert();
        close(cert.p[(3, 3)], 0.0014820174754560651);
        close(cert.p[(3, 4)], -0.21854770204165325);
        close(cert.p[(4, 4)], 179.69477723424822);
        close(cert.q[(3, 3)], -0.3425107054387351);
        close(cert.q[(3, 4)], 50.508802249626534);
        close(cert.q[(4, 4)], -7448.348516359589);
        // grid-forming Q block is rank one by construction
        let det = cert.q[(3, 3)] * cert.q[(4, 4)] - cert.q[(3, 4)] * cert.q[(3, 4)];
        assert!(det.abs() <= 1e-9 * cert.q[(3, 4)].powi(2), "det {det}");
        close(cert.eig_p_min, 1.216214417202e-3);
        assert!(cert.residual < 1e-12, "residual {}", cert.residual);
        assert!(cert.eig_q_max <= 1e-9 * cert.q.norm());
        assert!(cert.verdict.is_certified());
    }

    #[test]
    fn invalid_gains_are_a_precondition_error() {
        let mut g = table::cdgu_gains();
        g.k3 = -1.0;
        assert!(matches!(
            build_pq_cdgu(&g, &table::cdgu_params(5.0), &CertificateConfig::default()),
            Err(Error::GainsRejected { .. })
        ));
    }

    #[test]
    fn inconsistent_fixed_p22_fails_with_the_relation_named() {
        let cfg = CertificateConfig { p22c: P22Choice::Fixed(0.05), ..Default::default() };
        let cert = build_pq_cdgu(&table::cdgu_gains(), &table::cdgu_params(5.0), &cfg).unwrap();
        match &cert.verdict {
            Verdict::Failed(reason) => assert!(reason.contains("p22C"), "{reason}"),
            Verdict::Certified => panic!("expected failure"),
        }
        // the consistent value round-trips to certified
        let cfg = CertificateConfig {
            p22c: P22Choice::Fixed(0.01782178217821782),
            ..Default::default()
        };
        let cert = build_pq_cdgu(&table::cdgu_gains(), &table::cdgu_params(5.0), &cfg).unwrap();
        assert!(cert.verdict.is_certified());
    }

    #[test]
    fn sigma_bar_scales_the_pair_without_breaking_it() {
        let cfg = CertificateConfig { sigma_bar: 3.5, ..Default::default() };
        let cert = build_pq_mg(&table::mg_gains(), &table::mg_params(5.0), &cfg).unwrap();
        assert!(cert.verdict.is_certified());
        close(cert.p[(0, 0)], 3.5 * 2.2e-3);
        let base = mg_cert();
        close(cert.p[(3, 3)], 3.5 * base.p[(3, 3)]);
        close(cert.q[(4, 4)], 3.5 * base.q[(4, 4)]);
    }

    #[test]
    fn cdgu_kernel_is_the_unactuated_plane() {
        let cert = cdgu_cert();
        let basis = quadratic_kernel_cdgu(&cert).unwrap();
        assert_eq!(basis.ncols(), 2);
        let mut analytic = DMatrix::zeros(3, 2);
        analytic[(0, 0)] = 1.0;
        analytic[(2, 1)] = 1.0;
        assert!(subspace_angle(&basis, &analytic) < 1e-10);
        // anything with a current component strictly decreases the function
        let e2 = DMatrix::from_fn(3, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let val = (e2.transpose() * &cert.q * &e2)[(0, 0)];
        assert!(val < 0.0);
    }

    #[test]
    fn mg_kernel_matches_the_mixing_ratio() {
        let cert = mg_cert();
        let kernel = quadratic_kernel_mg(&cert, &table::mg_gains(), 0.1).unwrap();
        close(kernel.delta, 0.00678120822873537);
        assert_eq!(kernel.basis.ncols(), 3);
        let mut analytic = DMatrix::zeros(5, 3);
        analytic[(0, 0)] = 1.0;
        analytic[(2, 1)] = 1.0;
        analytic[(3, 2)] = 1.0;
        analytic[(4, 2)] = kernel.delta;
        assert!(subspace_angle(&kernel.basis, &analytic) < 1e-10);
        // e2 is far from the kernel
        let e2 = DMatrix::from_fn(5, 1, |i, _| if i == 1 { 1.0 } else { 0.0 });
        let proj = kernel.basis.transpose() * &e2;
        assert!(proj.norm() < 1e-8);
    }

    #[test]
    fn kernel_requires_certification() {
        let cfg = CertificateConfig { p22c: P22Choice::Fixed(0.05), ..Default::default() };
        let cert = build_pq_cdgu(&table::cdgu_gains(), &table::cdgu_params(5.0), &cfg).unwrap();
        assert!(matches!(
            quadratic_kernel_cdgu(&cert),
            Err(Error::NotCertified(_))
        ));
    }

    #[test]
    fn cluster_matrix_ring_values() {
        let graph = presets::ring_graph();
        let cfg = CertificateConfig::default();
        let l = build_cluster_matrix(&graph, &cfg).unwrap();
        assert_eq!(l, l.transpose());
        close(l[(0, 1)], 2.0 / 0.3);
        close(l[(0, 3)], 2.0 / 0.7);
        assert_eq!(l[(0, 2)], 0.0);
        close(l[(0, 0)], -2.0 / 20.0 - 2.0 / 0.3 - 2.0 / 0.7);
        let max = sym_eig_max(&l);
        assert!((max + 0.1).abs() < 1e-10, "max eig {max}");
    }

    #[test]
    fn cluster_matrix_without_loads_is_a_laplacian() {
        let mut graph = presets::ring_graph();
        for id in graph.unit_ids() {
            let mut load = graph.unit(id).unwrap().cdgu().load;
            load.r_l = None;
            graph = graph.with_load(id, load).unwrap();
        }
        let l = build_cluster_matrix(&graph, &CertificateConfig::default()).unwrap();
        for i in 0..4 {
            assert!(l.row(i).sum().abs() < 1e-12);
        }
        assert!(sym_eig_max(&l).abs() < 1e-10);
    }

    #[test]
    fn single_loaded_unit_cluster_matrix() {
        let mut units = BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Mg(table::mg_params(5.0)));
        let graph = ElectricalGraph::new(units, vec![]).unwrap();
        let l = build_cluster_matrix(&graph, &CertificateConfig::default()).unwrap();
        assert_eq!(l.nrows(), 1);
        close(l[(0, 0)], -0.1);
    }

    #[test]
    fn mixed_sigma_bars_are_rejected() {
        let graph = presets::ring_graph();
        let mut sigmas: BTreeMap<UnitId, f64> =
            graph.unit_ids().into_iter().map(|id| (id, 1.0)).collect();
        assert!(build_cluster_matrix_with_sigmas(&graph, &sigmas).is_ok());
        sigmas.insert(UnitId(3), 2.0);
        assert!(matches!(
            build_cluster_matrix_with_sigmas(&graph, &sigmas),
            Err(Error::MixedSigmaBar(_))
        ));
    }

    #[test]
    fn ring_cluster_is_certified() {
        let graph = presets::ring_graph();
        let report = verify_global_stability(
            &graph,
            &presets::ring_gains(),
            &CertificateConfig::default(),
        )
        .unwrap();
        assert!(report.certified);
        assert!((report.max_re - -10.28507149186793).abs() < 1e-8, "{}", report.max_re);
        assert!((report.cluster_eig_max + 0.1).abs() < 1e-10);
        assert_eq!(report.components, 1);
        let text = report.to_kv_text();
        assert!(text.contains("certified = true"));
        assert!(text.contains("unit.2.verdict = certified"));
    }

    #[test]
    fn single_cdgu_cluster_is_stable() {
        let mut units = BTreeMap::new();
        units.insert(UnitId(1), UnitParams::Cdgu(table::cdgu_params(5.0)));
        let graph = ElectricalGraph::new(units, vec![]).unwrap();
        let mut gains = BTreeMap::new();
        gains.insert(UnitId(1), UnitGains::Cdgu(table::cdgu_gains()));
        let report =
            verify_global_stability(&graph, &gains, &CertificateConfig::default()).unwrap();
        assert!(report.max_re < 0.0);
        assert!(report.certified);
        assert_eq!(report.unit_reports.len(), 1);
    }

    #[test]
    fn bad_gains_never_reach_eigen_analysis() {
        let graph = presets::ring_graph();
        let mut gains = presets::ring_gains();
        if let Some(UnitGains::Mg(g)) = gains.get_mut(&UnitId(2)) {
            g.k3v = -5.0;
        }
        match verify_global_stability(&graph, &gains, &CertificateConfig::default()) {
            Err(Error::GainsRejected { who, .. }) => assert!(who.contains('2'), "{who}"),
            other => panic!("expected gains rejection, got {other:?}"),
        }
    }

    #[test]
    fn disconnected_graph_verdict_covers_both_islands() {
        let graph = presets::ring_graph()
            .with_unit_removed(UnitId(2))
            .unwrap()
            .with_unit_removed(UnitId(4))
            .unwrap();
        assert_eq!(graph.components().len(), 2);
        let mut gains = presets::ring_gains();
        gains.remove(&UnitId(2));
        gains.remove(&UnitId(4));
        let report =
            verify_global_stability(&graph, &gains, &CertificateConfig::default()).unwrap();
        assert!(report.certified);
        assert_eq!(report.components, 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // sampled gains and perturbed hardware always yield a working pair
        #[test]
        fn random_draws_certify(seed in 0u64..10_000, scale in 0.1..10.0f64) {
            let mut p = table::mg_params(5.0);
            p.cdgu.c_t *= scale;
            p.cdgu.l_tc *= scale;
            p.l_tv *= scale;
            let g = crate::control::sample_gains_mg(
                p.cdgu.r_tc, p.r_tv, p.l_tv, seed, 0.05,
            ).unwrap();
            let cert = build_pq_mg(&g, &p, &CertificateConfig::default()).unwrap();
            prop_assert!(cert.verdict.is_certified(), "{:?}", cert.verdict);
        }
    }

    #[test]
    fn kind_display_used_in_errors() {
        assert_eq!(ClusterKind::MgCluster.to_string(), "mg-cluster");
    }
}
