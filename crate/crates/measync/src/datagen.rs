//! Synthetic problem generation and scoring: seeded ground truth, relative
//! measures on sparsified graphs, tangent-space noise injection, and the
//! angular / divergence error metrics for recovered states.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::divergences::{sinkhorn_divergence, DivergenceError, GroundCost};
use crate::manifold::{geo_distance, sample_uniform, UnitQuaternion};
use crate::measures::{
    pushforward_relative, AbsoluteBelief, CouplingMode, DiscreteMeasure, JointCoupling,
    MeasureError,
};
use crate::sync::{RotationGraph, SyncError};

/// Attempts at drawing a connected edge subset before giving up.
const CONNECTIVITY_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("ground truth needs at least 2 cameras, got {n}")]
    TooFewCameras { n: usize },
    #[error("ground truth needs at least 1 particle per camera")]
    NoParticles,
    #[error("completeness must lie in (0, 1], got {value}")]
    CompletenessOutOfRange { value: f64 },
    #[error(
        "no connected graph found in {attempts} draws; completeness {completeness} keeps \
         {kept} of {total} edges"
    )]
    ConnectivityFailed { attempts: usize, completeness: f64, kept: usize, total: usize },
    #[error("noise sigma must be finite and nonnegative, got {sigma}")]
    BadSigma { sigma: f64 },
    #[error("estimate has {got} cameras, truth has {expected}")]
    CameraCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

/// True per-camera beliefs: K uniformly weighted particles each, camera 0
/// acting as the gauge reference.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    beliefs: Vec<AbsoluteBelief>,
    k: usize,
}

impl GroundTruth {
    /// Wraps externally supplied beliefs (for example, loaded from a truth
    /// file) so they can drive the error metrics.
    pub fn from_beliefs(beliefs: Vec<AbsoluteBelief>) -> Result<Self, DatagenError> {
        if beliefs.len() < 2 {
            return Err(DatagenError::TooFewCameras { n: beliefs.len() });
        }
        if beliefs.iter().any(|b| b.is_empty()) {
            return Err(DatagenError::NoParticles);
        }
        let k = beliefs.iter().map(|b| b.len()).max().expect("nonempty");
        Ok(GroundTruth { beliefs, k })
    }

    pub fn beliefs(&self) -> &[AbsoluteBelief] {
        &self.beliefs
    }

    pub fn n_cameras(&self) -> usize {
        self.beliefs.len()
    }

    pub fn particles_per_camera(&self) -> usize {
        self.k
    }

    /// The reference belief an optimizer should pin camera 0 to.
    pub fn gauge(&self) -> &AbsoluteBelief {
        &self.beliefs[0]
    }

    /// The truth as a coupling, for loss evaluation or as an oracle start.
    pub fn coupling(&self, mode: CouplingMode) -> Result<JointCoupling, MeasureError> {
        JointCoupling::with_mode(mode, self.beliefs.clone())
    }
}

/// Isotropic tangent-space perturbation scale, in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
}

/// Draws a ground truth of `n` cameras with `k` uniform-weight particles
/// each. With a single particle per camera the gauge is the identity
/// rotation; with several, camera 0's draws themselves become the gauge
/// reference.
pub fn generate_ground_truth<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<GroundTruth, DatagenError> {
    if n < 2 {
        return Err(DatagenError::TooFewCameras { n });
    }
    if k == 0 {
        return Err(DatagenError::NoParticles);
    }
    let beliefs = (0..n)
        .map(|cam| {
            let particles: Vec<UnitQuaternion> = if cam == 0 && k == 1 {
                vec![UnitQuaternion::identity()]
            } else {
                (0..k).map(|_| sample_uniform(rng)).collect()
            };
            AbsoluteBelief::uniform(cam, particles)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroundTruth { beliefs, k })
}

/// Builds the complete graph of relative measures from the truth, then keeps
/// a uniformly random subset of edges of the requested completeness,
/// redrawing until the subset is connected.
pub fn relative_measures_from_truth<R: Rng + ?Sized>(
    truth: &GroundTruth,
    mode: CouplingMode,
    completeness: f64,
    rng: &mut R,
) -> Result<RotationGraph, DatagenError> {
    if !(completeness > 0.0 && completeness <= 1.0) {
        return Err(DatagenError::CompletenessOutOfRange { value: completeness });
    }
    let n = truth.n_cameras();
    let coupling = truth.coupling(mode)?;
    let mut complete = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            complete.push((i, j, pushforward_relative(&coupling, i, j)?));
        }
    }
    let total = complete.len();
    let kept = ((completeness * total as f64).round() as usize).clamp(1, total);
    if kept == total {
        return Ok(RotationGraph::new(n, complete)?);
    }
    for _ in 0..CONNECTIVITY_ATTEMPTS {
        let mut idx: Vec<usize> = sample(rng, total, kept).into_iter().collect();
        idx.sort_unstable();
        let subset: Vec<_> = idx.iter().map(|&e| complete[e].clone()).collect();
        match RotationGraph::new(n, subset) {
            Ok(graph) => return Ok(graph),
            Err(SyncError::Disconnected) => continue,
            Err(other) => return Err(other.into()),
        }
    }
    Err(DatagenError::ConnectivityFailed {
        attempts: CONNECTIVITY_ATTEMPTS,
        completeness,
        kept,
        total,
    })
}

/// Perturbs every edge atom along a N(0, σ²I₃) tangent draw; weights are
/// untouched. σ = 0 returns the graph bitwise unchanged.
pub fn add_noise<R: Rng + ?Sized>(
    graph: RotationGraph,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<RotationGraph, DatagenError> {
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(DatagenError::BadSigma { sigma: noise.sigma });
    }
    if noise.sigma == 0.0 {
        return Ok(graph);
    }
    let normal = Normal::new(0.0, noise.sigma).expect("sigma checked above");
    let n = graph.n_cameras();
    let edges = graph
        .edges()
        .iter()
        .map(|e| {
            let atoms = e
                .measure
                .atoms()
                .iter()
                .map(|q| {
                    let xi = [
                        normal.sample(rng),
                        normal.sample(rng),
                        normal.sample(rng),
                    ];
                    q.exp_map(&xi).canonicalized()
                })
                .collect();
            let measure = DiscreteMeasure::new(atoms, e.measure.weights().to_vec())?;
            Ok((e.i, e.j, measure))
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;
    Ok(RotationGraph::new(n, edges)?)
}

/// Mean over non-gauge cameras of the average nearest-particle geodesic
/// distance, in both directions: `.0` scans true particles against their
/// nearest estimate (mode coverage, the headline number), `.1` scans
/// estimated particles against their nearest true mode.
pub fn avg_min_geodesic(
    estimate: &JointCoupling,
    truth: &GroundTruth,
) -> Result<(f64, f64), DatagenError> {
    if estimate.n_cameras() != truth.n_cameras() {
        return Err(DatagenError::CameraCountMismatch {
            expected: truth.n_cameras(),
            got: estimate.n_cameras(),
        });
    }
    let directed = |from: &[UnitQuaternion], to: &[UnitQuaternion]| -> f64 {
        let total: f64 = from
            .iter()
            .map(|q| {
                to.iter()
                    .map(|p| geo_distance(q, p))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / from.len() as f64
    };
    let n = truth.n_cameras();
    let mut t2e = 0.0;
    let mut e2t = 0.0;
    for cam in 1..n {
        let t = truth.beliefs()[cam].particles();
        let e = estimate.beliefs()[cam].particles();
        t2e += directed(t, e);
        e2t += directed(e, t);
    }
    let non_gauge = (n - 1) as f64;
    Ok((t2e / non_gauge, e2t / non_gauge))
}

/// Mean over non-gauge cameras of the Sinkhorn divergence between the
/// estimated and true beliefs (both as probability measures). The flag is
/// false if any per-camera solve hit its budget.
pub fn sinkhorn_error(
    estimate: &JointCoupling,
    truth: &GroundTruth,
    cost: &GroundCost,
    alpha: f64,
) -> Result<(f64, bool), DatagenError> {
    if estimate.n_cameras() != truth.n_cameras() {
        return Err(DatagenError::CameraCountMismatch {
            expected: truth.n_cameras(),
            got: estimate.n_cameras(),
        });
    }
    let n = truth.n_cameras();
    let mut total = 0.0;
    let mut ok = true;
    for cam in 1..n {
        let est = estimate.beliefs()[cam].to_measure();
        let tru = truth.beliefs()[cam].to_measure();
        let (v, converged) = sinkhorn_divergence(&est, &tru, cost, alpha, 1e-9, 5000)?;
        total += v;
        ok &= converged;
    }
    Ok((total / (n - 1) as f64, ok))
}
