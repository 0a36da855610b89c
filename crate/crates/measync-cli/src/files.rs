//! On-disk formats: the graph file (observed relative measures plus
//! generation metadata) and the result file (per-camera particle measures
//! with a config echo). Both are pretty-printed JSON; floats use Rust's
//! shortest exact representation, so a save/load round trip is bitwise.

use std::fs;
use std::path::Path;

use measync::{
    AbsoluteBelief, DiscreteMeasure, JointCoupling, RotationGraph, UnitQuaternion,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{classify_sync, CliError};

pub const GRAPH_FILE: &str = "graph.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const RESULT_FILE: &str = "result.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Weight sums may drift from 1 by at most this much before the file is
/// rejected rather than silently renormalized.
const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub n_cameras: usize,
    pub edges: Vec<EdgeRecord>,
    pub metadata: GraphMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub i: usize,
    pub j: usize,
    pub atoms: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMetadata {
    pub generator: String,
    pub seed: u64,
    pub sigma: f64,
    pub completeness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    /// Echo of the invocation that produced the file, as free-form JSON.
    pub config: serde_json::Value,
    pub cameras: Vec<CameraRecord>,
    pub final_loss: f64,
    pub iterations: usize,
    /// Per-edge Sinkhorn convergence at the final evaluation, in graph edge
    /// order; empty for files that did not come from an optimizer run.
    pub converged_flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub particles: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Fatal(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| CliError::Fatal(format!("cannot write {}: {e}", path.display())))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Fatal(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Fatal(format!("{}: {e}", path.display())))
}

/// Normalizes and sign-canonicalizes one stored quaternion. Construction is
/// idempotent for already-unit components, so atoms written by this tool
/// load back bit for bit.
fn load_quaternion(raw: &[f64; 4], what: &str) -> Result<UnitQuaternion, CliError> {
    let n2: f64 = raw.iter().map(|v| v * v).sum();
    if !(n2.is_finite() && n2 > 0.0) {
        return Err(CliError::Fatal(format!(
            "{what}: quaternion {raw:?} has zero or non-finite norm"
        )));
    }
    UnitQuaternion::new(raw[0], raw[1], raw[2], raw[3])
        .map(|q| q.canonicalized())
        .map_err(|e| CliError::Fatal(format!("{what}: {e}")))
}

fn load_weights(weights: &[f64], expected: usize, what: &str) -> Result<Vec<f64>, CliError> {
    if weights.len() != expected {
        return Err(CliError::Fatal(format!(
            "{what}: {} weights for {expected} atoms",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(CliError::Fatal(format!("{what}: weights must be finite and nonnegative")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(CliError::Fatal(format!(
            "{what}: weights sum to {sum}, more than {WEIGHT_SUM_TOL} away from 1"
        )));
    }
    // a sum that is 1 up to round-off keeps the stored bits so files written
    // by this tool load back exactly; genuine drift is renormalized
    if (sum - 1.0).abs() <= 64.0 * f64::EPSILON {
        return Ok(weights.to_vec());
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

pub fn graph_to_file(graph: &RotationGraph, metadata: GraphMetadata) -> GraphFile {
    GraphFile {
        n_cameras: graph.n_cameras(),
        edges: graph
            .edges()
            .iter()
            .map(|e| EdgeRecord {
                i: e.i,
                j: e.j,
                atoms: e.measure.atoms().iter().map(|q| q.as_array()).collect(),
                weights: e.measure.weights().to_vec(),
            })
            .collect(),
        metadata,
    }
}

pub fn graph_from_file(file: &GraphFile) -> Result<RotationGraph, CliError> {
    let mut edges = Vec::with_capacity(file.edges.len());
    for e in &file.edges {
        let what = format!("edge ({}, {})", e.i, e.j);
        if !(e.i < e.j && e.j < file.n_cameras) {
            return Err(CliError::Fatal(format!(
                "{what} violates 0 <= i < j < n_cameras = {}",
                file.n_cameras
            )));
        }
        let weights = load_weights(&e.weights, e.atoms.len(), &what)?;
        let atoms = e
            .atoms
            .iter()
            .map(|raw| load_quaternion(raw, &what))
            .collect::<Result<Vec<_>, _>>()?;
        let measure = DiscreteMeasure::new(atoms, weights)
            .map_err(|err| CliError::Fatal(format!("{what}: {err}")))?;
        edges.push((e.i, e.j, measure));
    }
    RotationGraph::new(file.n_cameras, edges).map_err(classify_sync)
}

pub fn cameras_from_beliefs(beliefs: &[AbsoluteBelief]) -> Vec<CameraRecord> {
    beliefs
        .iter()
        .map(|b| CameraRecord {
            id: b.camera_id,
            particles: b.particles().iter().map(|q| q.as_array()).collect(),
            weights: b.weights(),
        })
        .collect()
}

/// Rebuilds beliefs from stored camera records. Weights are mapped back to β
/// through the square root, so the loaded belief sits on the constraint
/// sphere regardless of rounding in the file.
pub fn beliefs_from_cameras(cameras: &[CameraRecord]) -> Result<Vec<AbsoluteBelief>, CliError> {
    cameras
        .iter()
        .map(|c| {
            let what = format!("camera {}", c.id);
            if c.weights.len() != c.particles.len() {
                return Err(CliError::Fatal(format!(
                    "{what}: {} weights for {} particles",
                    c.weights.len(),
                    c.particles.len()
                )));
            }
            let sum: f64 = c.weights.iter().sum();
            if c.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !(sum > 0.0) {
                return Err(CliError::Fatal(format!(
                    "{what}: weights must be finite, nonnegative, and carry mass"
                )));
            }
            let particles = c
                .particles
                .iter()
                .map(|raw| load_quaternion(raw, &what))
                .collect::<Result<Vec<_>, _>>()?;
            let beta = c.weights.iter().map(|w| (w / sum).sqrt()).collect();
            AbsoluteBelief::new(c.id, particles, beta)
                .map_err(|err| CliError::Fatal(format!("{what}: {err}")))
        })
        .collect()
}

/// Result cameras as a high-entropy coupling, the shape the error metrics
/// consume. Mode does not matter for scoring: only particles and weights do.
pub fn coupling_from_result(file: &ResultFile) -> Result<JointCoupling, CliError> {
    let beliefs = beliefs_from_cameras(&file.cameras)?;
    JointCoupling::high_entropy(beliefs).map_err(|e| CliError::Fatal(e.to_string()))
}
