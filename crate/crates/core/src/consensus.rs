//! Leader-based secondary layer: consensus errors over a communication
//! graph, the PI filters producing reference corrections, and the numeric
//! checks behind their convergence.
//!
//! Nodes are plain indices `0..n`; the simulation engine maps live unit ids
//! onto them. The leader is not a node: pinned nodes read its reference
//! directly, everyone else sees it only through neighbors.
//!
//! The voltage and current channels run the same algebra on different
//! signals, so both go through one shared channel update; given equal gains
//! and inputs they produce bit-identical outputs.

use nalgebra::DMatrix;
use nalgebra::DVector;

use crate::error::Error;
use crate::Result;

/// Undirected communication graph with binary adjacency and binary pinning.
///
/// Construction validates structure only (bounds, self-loops, duplicates).
/// Whether the graph actually supports consensus (connected, with at least
/// one pinned node per component) is the job of [`check_lg_pd`], so that
/// defective graphs can be diagnosed instead of being unrepresentable.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n: usize,
    adjacency: Vec<Vec<bool>>,
    pinned: Vec<bool>,
}

impl CommGraph {
    pub fn new(n: usize, edges: &[(usize, usize)], pinned: &[usize]) -> Result<Self> {
        if n == 0 {
            return Err(Error::CommGraph("graph needs at least one node".into()));
        }
        let mut adjacency = vec![vec![false; n]; n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::CommGraph(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::CommGraph(format!("self-loop at node {a}")));
            }
            if adjacency[a][b] {
                return Err(Error::CommGraph(format!("duplicate edge ({a}, {b})")));
            }
            adjacency[a][b] = true;
            adjacency[b][a] = true;
        }
        let mut pin = vec![false; n];
        for &p in pinned {
            if p >= n {
                return Err(Error::CommGraph(format!(
                    "pinned node {p} out of range for {n} nodes"
                )));
            }
            pin[p] = true;
        }
        Ok(Self { n, adjacency, pinned: pin })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_pinned(&self, i: usize) -> bool {
        self.pinned[i]
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.adjacency[i][j]).collect()
    }

    /// Graph Laplacian `L = D − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                if self.adjacency[i][j] {
                    l[(i, j)] = -1.0;
                    l[(i, i)] += 1.0;
                }
            }
        }
        l
    }

    /// `L + G` with `G = diag(pinning)`.
    pub fn lg(&self) -> DMatrix<f64> {
        let mut lg = self.laplacian();
        for i in 0..self.n {
            if self.pinned[i] {
                lg[(i, i)] += 1.0;
            }
        }
        lg
    }

    /// Connected components as sorted index lists.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut components = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            seen[start] = true;
            let mut comp = Vec::new();
            while let Some(u) = stack.pop() {
                comp.push(u);
                for (v, &adj) in self.adjacency[u].iter().enumerate() {
                    if adj && !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
            comp.sort();
            components.push(comp);
        }
        components
    }
}

/// PI gains of the secondary layer, shared by all nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondaryGains {
    pub kp_v: f64,
    pub ki_v: f64,
    pub kp_c: f64,
    pub ki_c: f64,
}

impl SecondaryGains {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kpV", self.kp_v),
            ("kiV", self.ki_v),
            ("kpC", self.kp_c),
            ("kiC", self.ki_c),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ParamDomain {
                    name: name.into(),
                    requirement: "finite and > 0",
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// The leader's broadcast values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderReference {
    pub v_ref: f64,
    pub i_ref_pu: f64,
}

impl LeaderReference {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("leader V_ref", self.v_ref), ("leader I_ref_pu", self.i_ref_pu)] {
            if !v.is_finite() {
                return Err(Error::ParamDomain {
                    name: name.into(),
                    requirement: "finite",
                    value: v,
                });
            }
        }
        Ok(())
    }
}

/// One PI channel's persistent data: the accumulated integral, the previous
/// error sample (for the trapezoid rule), and the last emitted correction.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    integral: DVector<f64>,
    prev_error: DVector<f64>,
    pub delta: DVector<f64>,
}

impl ChannelState {
    pub fn new(n: usize) -> Self {
        Self {
            integral: DVector::zeros(n),
            prev_error: DVector::zeros(n),
            delta: DVector::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Carries one node's channel data over from another state, used when a
    /// topology change renumbers the surviving units.
    pub fn copy_entry_from(&mut self, src: &ChannelState, dst_idx: usize, src_idx: usize) {
        self.integral[dst_idx] = src.integral[src_idx];
        self.prev_error[dst_idx] = src.prev_error[src_idx];
        self.delta[dst_idx] = src.delta[src_idx];
    }
}

/// Secondary controller state for both channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondaryState {
    pub voltage: ChannelState,
    pub current: ChannelState,
}

impl SecondaryState {
    pub fn new(n: usize) -> Self {
        Self { voltage: ChannelState::new(n), current: ChannelState::new(n) }
    }
}

/// Consensus tracking errors `e = (L + G)(x − ref·1)` for both channels.
///
/// Row `i` of `L + G` touches only node `i`'s neighbors (and the leader when
/// pinned), so each node's error is computable from local data.
pub fn consensus_errors(
    graph: &CommGraph,
    v: &DVector<f64>,
    i_pu: &DVector<f64>,
    leader: &LeaderReference,
) -> Result<(DVector<f64>, DVector<f64>)> {
    leader.validate()?;
    expect_len("consensus voltage vector", v, graph.len())?;
    expect_len("consensus current vector", i_pu, graph.len())?;
    let lg = graph.lg();
    let e_v = &lg * (v - DVector::from_element(graph.len(), leader.v_ref));
    let e_c = &lg * (i_pu - DVector::from_element(graph.len(), leader.i_ref_pu));
    Ok((e_v, e_c))
}

fn channel_update(
    state: &ChannelState,
    e: &DVector<f64>,
    kp: f64,
    ki: f64,
    dt: f64,
) -> (DVector<f64>, ChannelState) {
    let integral = &state.integral + (e + &state.prev_error) * (ki * dt / 2.0);
    let delta = -(e * kp) - &integral;
    (
        delta.clone(),
        ChannelState { integral, prev_error: e.clone(), delta },
    )
}

/// One PI step for both channels: trapezoidal integral accumulation followed
/// by `Δ = −kp·e − ∫ki·e`. Returns the corrections and the advanced state.
pub fn pi_update(
    state: &SecondaryState,
    e_v: &DVector<f64>,
    e_c: &DVector<f64>,
    gains: &SecondaryGains,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>, SecondaryState)> {
    gains.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::ParamDomain {
            name: "dt".into(),
            requirement: "finite and > 0",
            value: dt,
        });
    }
    expect_len("pi voltage error", e_v, state.voltage.len())?;
    expect_len("pi current error", e_c, state.current.len())?;
    let (delta_v, voltage) = channel_update(&state.voltage, e_v, gains.kp_v, gains.ki_v, dt);
    let (delta_c, current) = channel_update(&state.current, e_c, gains.kp_c, gains.ki_c, dt);
    Ok((delta_v, delta_c, SecondaryState { voltage, current }))
}

/// Verdict on the positive definiteness of `L + G`.
#[derive(Debug, Clone, PartialEq)]
pub struct LgVerdict {
    pub positive_definite: bool,
    pub min_eig: f64,
    /// What is missing when not PD: pinning, connectivity, or both.
    pub diagnosis: Option<String>,
}

/// Checks `L + G ≻ 0`, the condition making the consensus error injective.
/// It holds exactly when every connected component contains a pinned node;
/// failures say which components are cut off from the leader.
pub fn check_lg_pd(graph: &CommGraph) -> LgVerdict {
    let lg = graph.lg();
    let min_eig = lg
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let scale = lg.amax().max(1.0);
    let positive_definite = min_eig > 1e-9 * scale;
    let diagnosis = if positive_definite {
        None
    } else {
        let orphans: Vec<Vec<usize>> = graph
            .components()
            .into_iter()
            .filter(|comp| !comp.iter().any(|&i| graph.is_pinned(i)))
            .collect();
        Some(if orphans.is_empty() {
            format!("L+G numerically singular (min eigenvalue {min_eig})")
        } else if orphans.len() == graph.components().len() && orphans.len() == 1 {
            "no node is pinned to the leader".into()
        } else {
            format!(
                "components without a pinned node: {:?}",
                orphans
            )
        })
    };
    LgVerdict { positive_definite, min_eig, diagnosis }
}

/// Numeric evidence for the commutation and sign facts used by the reduced
/// dynamics: with `S = (I + α(L+G))⁻¹`, the product `O = (L+G)·S` commutes
/// with its factors and is positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct CommutationReport {
    /// `max |(L+G)S − S(L+G)|`.
    pub commutation_residual: f64,
    /// Smallest eigenvalue of the symmetrized product.
    pub product_min_eig: f64,
}

pub fn check_commutation_identity(graph: &CommGraph, alpha: f64) -> Result<CommutationReport> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::ParamDomain {
            name: "alpha".into(),
            requirement: "finite and > 0",
            value: alpha,
        });
    }
    let verdict = check_lg_pd(graph);
    if !verdict.positive_definite {
        return Err(Error::CommGraph(format!(
            "L+G must be positive definite: {}",
            verdict.diagnosis.unwrap_or_default()
        )));
    }
    let n = graph.len();
    let lg = graph.lg();
    let s = (DMatrix::identity(n, n) + alpha * &lg)
        .try_inverse()
        .ok_or_else(|| Error::Singular("I + alpha(L+G)".into()))?;
    let o = &lg * &s;
    let commutation_residual = (&o - &s * &lg).amax();
    let sym = (&o + o.transpose()) * 0.5;
    let product_min_eig = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(CommutationReport { commutation_residual, product_min_eig })
}

/// Residual of the rank-update inversion identity
/// `(I + αA)⁻¹ = B − B(B + I)⁻¹B` with `B = (αA)⁻¹`, for an invertible `A`.
/// Small residuals confirm the identity numerically; it underpins the
/// reduced-dynamics derivation.
pub fn woodbury_identity_residual(a: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension {
            context: "woodbury matrix",
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::ParamDomain {
            name: "alpha".into(),
            requirement: "finite and > 0",
            value: alpha,
        });
    }
    let n = a.nrows();
    let lhs = (DMatrix::identity(n, n) + alpha * a)
        .try_inverse()
        .ok_or_else(|| Error::Singular("I + alpha*A".into()))?;
    let b = (alpha * a)
        .try_inverse()
        .ok_or_else(|| Error::Singular("alpha*A".into()))?;
    let inner = (&b + DMatrix::identity(n, n))
        .try_inverse()
        .ok_or_else(|| Error::Singular("B + I".into()))?;
    let rhs = &b - &b * inner * &b;
    Ok((lhs - rhs).amax())
}

/// One RK4 step of the reduced secondary dynamics, where each primary loop is
/// approximated as a unit gain:
/// `V̇ = −kiV·[I + kpV(L+G)]⁻¹·e_V` and likewise for the current channel.
pub fn reduced_dynamics_step(
    graph: &CommGraph,
    gains: &SecondaryGains,
    v: &DVector<f64>,
    i_pu: &DVector<f64>,
    leader: &LeaderReference,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    gains.validate()?;
    leader.validate()?;
    expect_len("reduced dynamics voltage", v, graph.len())?;
    expect_len("reduced dynamics current", i_pu, graph.len())?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::ParamDomain {
            name: "dt".into(),
            requirement: "finite and > 0",
            value: dt,
        });
    }
    let verdict = check_lg_pd(graph);
    if !verdict.positive_definite {
        return Err(Error::CommGraph(format!(
            "L+G must be positive definite: {}",
            verdict.diagnosis.unwrap_or_default()
        )));
    }
    let n = graph.len();
    let lg = graph.lg();
    let m_v = reduced_rate_matrix(&lg, gains.kp_v, gains.ki_v)?;
    let m_c = reduced_rate_matrix(&lg, gains.kp_c, gains.ki_c)?;
    let _ = n;
    let v_next = rk4_decay(&m_v, v, leader.v_ref, dt);
    let c_next = rk4_decay(&m_c, i_pu, leader.i_ref_pu, dt);
    Ok((v_next, c_next))
}

/// `ki·[I + kp(L+G)]⁻¹(L+G)`: the decay-rate matrix of one reduced channel.
pub fn reduced_rate_matrix(lg: &DMatrix<f64>, kp: f64, ki: f64) -> Result<DMatrix<f64>> {
    let n = lg.nrows();
    let s = (DMatrix::identity(n, n) + kp * lg)
        .try_inverse()
        .ok_or_else(|| Error::Singular("I + kp(L+G)".into()))?;
    Ok(ki * (s * lg))
}

/// RK4 for `ẋ = −M(x − ref·1)`.
fn rk4_decay(m: &DMatrix<f64>, x: &DVector<f64>, reference: f64, dt: f64) -> DVector<f64> {
    let dev = x - DVector::from_element(x.len(), reference);
    let k1 = -(m * &dev);
    let k2 = -(m * (&dev + &k1 * (dt / 2.0)));
    let k3 = -(m * (&dev + &k2 * (dt / 2.0)));
    let k4 = -(m * (&dev + &k3 * dt));
    let dev_next = &dev + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);
    dev_next + DVector::from_element(x.len(), reference)
}

fn expect_len(context: &'static str, x: &DVector<f64>, n: usize) -> Result<()> {
    if x.len() == n {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected: n, got: x.len() })
    }
}

// ---------------------------------------------------------------------------
