//! Measure synchronization on the rotation manifold.
//!
//! A camera graph carries, on each edge (i, j), an observed discrete
//! probability measure over relative 3D rotations. This crate recovers a
//! discrete measure over *absolute* rotations per camera such that the
//! pushforward q_i ⊗ q̄_j of the per-camera beliefs reproduces every edge
//! measure. Estimation runs by Riemannian particle gradient descent on the
//! unit-quaternion manifold, minimizing either a debiased entropic transport
//! divergence or a kernel maximum mean discrepancy per edge.
//!
//! Module map:
//! - [`manifold`]: unit-quaternion algebra, exp/log maps, geodesic distance
//!   and its subgradients.
//! - [`measures`]: discrete measures, per-camera beliefs, joint couplings and
//!   the relative-pose pushforward.
//! - [`divergences`]: ground costs, squared MMD, log-domain Sinkhorn,
//!   debiased divergence, analytic gradients, and an exact LP oracle for
//!   small instances.
//! - [`sync`]: the synchronization loss, its gradients, and the particle
//!   gradient descent driver.
//! - [`datagen`]: synthetic ground truth, noise injection, sparsification,
//!   and evaluation metrics.

pub mod datagen;
pub mod divergences;
pub mod manifold;
pub mod measures;
pub mod sync;

pub use datagen::{
    add_noise, avg_min_geodesic, generate_ground_truth, relative_measures_from_truth,
    sinkhorn_error, DatagenError, GroundTruth, NoiseModel,
};
pub use divergences::{CostMatrix, GroundCost, LossKind, SinkhornPotentials};
pub use manifold::{TangentVector, UnitQuaternion};
pub use measures::{AbsoluteBelief, CouplingMode, DiscreteMeasure, JointCoupling};
pub use sync::{
    fix_gauge, initial_state, loss_gradients, random_coupling, rpgd_step, run, run_observed,
    total_loss, GraphEdge, Gradients, LossReport, RotationGraph, StepRule, SyncConfig, SyncError,
    SyncState, WeightGradients,
};
