//! The synchronization problem: a camera graph with observed relative
//! measures, the per-edge divergence loss, its Riemannian gradients, and the
//! particle gradient descent driver that recovers absolute beliefs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::divergences::{
    cost_grad, cost_matrix, kernel, sinkhorn_position_grads_raw, sinkhorn_sweeps,
    sinkhorn_sym_sweeps, DivergenceError, GroundCost, LossKind,
};
use crate::manifold::{sample_uniform, sphere_exp, TangentVector, UnitQuaternion};
use crate::measures::{
    invert_measure, pushforward_relative, AbsoluteBelief, CouplingMode, DiscreteMeasure,
    JointCoupling, MeasureError,
};

/// Tolerance and sweep budget of the reference solves behind [`total_loss`],
/// [`loss_gradients`], and the optimizer's trace entries.
const REFERENCE_TOL: f64 = 1e-9;
const REFERENCE_BUDGET: usize = 5000;

/// Per-step solves inside [`rpgd_step`] run loose and warm-started; the
/// potentials carry over between iterations, so a handful of sweeps keeps
/// them tracking the slowly moving plan.
const STEP_TOL: f64 = 1e-7;
const STEP_BUDGET: usize = 8;

/// Inverse-weight step sizes are clipped at this mass so dying particles
/// cannot take unbounded steps.
const WEIGHT_FLOOR: f64 = 1e-6;

/// Early stopping window (iterations) and relative-improvement threshold.
const STALL_WINDOW: usize = 200;
const STALL_REL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("edge ({i}, {j}) is invalid for a graph on {n} cameras")]
    InvalidEdge { i: usize, j: usize, n: usize },
    #[error("edge ({i}, {j}) appears more than once")]
    DuplicateEdge { i: usize, j: usize },
    #[error("camera graph is not connected")]
    Disconnected,
    #[error("config: {name} = {value} is out of range")]
    BadParameter { name: &'static str, value: f64 },
    #[error("config: particles per camera must be at least 1")]
    NoParticles,
    #[error("config: max_iter and trace_stride must be at least 1")]
    BadSchedule,
    #[error("inverse-weight steps are only defined for unconstrained MMD runs")]
    UnsupportedStepRule,
    #[error("Sinkhorn-Sync requires constrained weights (β on the unit sphere)")]
    SinkhornNeedsConstraint,
    #[error("unconstrained runs require lambda > 0 to keep the total mass bounded")]
    NeedsRegularizer,
    #[error("coupling has {got} cameras but the graph has {expected}")]
    CameraCountMismatch { expected: usize, got: usize },
    #[error("coupling mode does not match the configured mode")]
    ModeMismatch,
    #[error("gauge reference has {got} particles, camera holds {expected}")]
    GaugeMismatch { expected: usize, got: usize },
    #[error("gauge reference weights must equal the shared weights in low-entropy mode")]
    GaugeSharedWeights,
    #[error(
        "non-finite gradient for camera {camera} particle {particle} on edge ({edge_i}, {edge_j})"
    )]
    NonFiniteGradient { camera: usize, particle: usize, edge_i: usize, edge_j: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
}

/// One stored edge: the observed relative measure μ_ij for i < j. The reverse
/// direction is implied through [`invert_measure`].
#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub measure: DiscreteMeasure,
}

/// Connected simple graph of cameras with one observed relative measure per
/// edge.
#[derive(Debug, Clone)]
pub struct RotationGraph {
    n_cameras: usize,
    edges: Vec<GraphEdge>,
}

impl RotationGraph {
    /// Edges may arrive in either orientation; (i, j) with i > j is stored as
    /// (j, i) with the measure inverted, which represents the same
    /// observation.
    pub fn new(
        n_cameras: usize,
        edges: Vec<(usize, usize, DiscreteMeasure)>,
    ) -> Result<Self, SyncError> {
        if n_cameras == 0 {
            return Err(SyncError::Disconnected);
        }
        let mut stored: Vec<GraphEdge> = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::new();
        for (i, j, m) in edges {
            if i == j || i >= n_cameras || j >= n_cameras {
                return Err(SyncError::InvalidEdge { i, j, n: n_cameras });
            }
            let (a, b, measure) = if i < j { (i, j, m) } else { (j, i, invert_measure(&m)) };
            if !seen.insert((a, b)) {
                return Err(SyncError::DuplicateEdge { i: a, j: b });
            }
            stored.push(GraphEdge { i: a, j: b, measure });
        }
        let graph = Self { n_cameras, edges: stored };
        if !graph.is_connected() {
            return Err(SyncError::Disconnected);
        }
        Ok(graph)
    }

    pub fn n_cameras(&self) -> usize {
        self.n_cameras
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    fn is_connected(&self) -> bool {
        let n = self.n_cameras;
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == n
    }
}

/// Position step-size policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// η_q for every particle.
    Constant,
    /// η_q⁰ / max(w, floor): light particles move faster. Only meaningful for
    /// unconstrained MMD runs where masses drift.
    InverseWeight { eta_q0: f64 },
}

#[derive(Debug, Clone)]
pub struct SyncConfig {
    pub loss_kind: LossKind,
    pub mode: CouplingMode,
    /// Weights restricted to probability vectors (β on the unit sphere).
    pub constrained: bool,
    pub cost: GroundCost,
    /// Entropic regularization of the Sinkhorn loss.
    pub alpha: f64,
    /// Mass regularizer weight λ; required positive when unconstrained.
    pub lambda: f64,
    pub eta_q: f64,
    pub eta_beta: f64,
    pub step_rule: StepRule,
    pub max_iter: usize,
    /// Record the loss every this many iterations.
    pub trace_stride: usize,
    pub seed: u64,
    /// Particles per camera for fresh initializations.
    pub particles: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Sinkhorn,
            mode: CouplingMode::HighEntropy,
            constrained: true,
            cost: GroundCost::default(),
            alpha: 0.05,
            lambda: 0.0,
            eta_q: 0.01,
            eta_beta: 0.001,
            step_rule: StepRule::Constant,
            max_iter: 10_000,
            trace_stride: 10,
            seed: 0,
            particles: 1,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<(), SyncError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(SyncError::BadParameter { name: "alpha", value: self.alpha });
        }
        if !(self.eta_q.is_finite() && self.eta_q > 0.0) {
            return Err(SyncError::BadParameter { name: "eta_q", value: self.eta_q });
        }
        if !(self.eta_beta.is_finite() && self.eta_beta > 0.0) {
            return Err(SyncError::BadParameter { name: "eta_beta", value: self.eta_beta });
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(SyncError::BadParameter { name: "lambda", value: self.lambda });
        }
        if self.particles == 0 {
            return Err(SyncError::NoParticles);
        }
        if self.max_iter == 0 || self.trace_stride == 0 {
            return Err(SyncError::BadSchedule);
        }
        if let StepRule::InverseWeight { eta_q0 } = self.step_rule {
            if !(eta_q0.is_finite() && eta_q0 > 0.0) {
                return Err(SyncError::BadParameter { name: "eta_q0", value: eta_q0 });
            }
            if self.loss_kind != LossKind::Mmd || self.constrained {
                return Err(SyncError::UnsupportedStepRule);
            }
        }
        if self.loss_kind == LossKind::Sinkhorn && !self.constrained {
            // the Sinkhorn weight gradient is defined only up to an additive
            // constant, which only the sphere projection cancels
            return Err(SyncError::SinkhornNeedsConstraint);
        }
        if !self.constrained && self.lambda <= 0.0 {
            return Err(SyncError::NeedsRegularizer);
        }
        Ok(())
    }
}

/// Optimizer state: the evolving coupling plus bookkeeping. Camera 0 is the
/// gauge anchor; its belief never moves (in low-entropy mode the shared
/// weight vector still updates, only its particles are pinned).
#[derive(Debug, Clone)]
pub struct SyncState {
    pub coupling: JointCoupling,
    pub iteration: usize,
    pub loss_trace: Vec<(usize, f64)>,
    gauge: AbsoluteBelief,
    caches: Vec<EdgeCache>,
    trace_converged: bool,
}

impl SyncState {
    pub fn gauge(&self) -> &AbsoluteBelief {
        &self.gauge
    }

    /// Whether every Sinkhorn solve behind the most recent trace entry
    /// converged (always true for MMD runs).
    pub fn trace_converged(&self) -> bool {
        self.trace_converged
    }
}

/// Builds the optimizer state around an existing coupling; camera 0's belief
/// becomes the gauge reference.
pub fn initial_state(coupling: JointCoupling, config: &SyncConfig) -> Result<SyncState, SyncError> {
    config.validate()?;
    if coupling.mode() != config.mode {
        return Err(SyncError::ModeMismatch);
    }
    let gauge = coupling.beliefs()[0].clone();
    Ok(SyncState {
        coupling,
        iteration: 0,
        loss_trace: Vec::new(),
        gauge,
        caches: Vec::new(),
        trace_converged: true,
    })
}

/// Draws a coupling with `k` uniform particles per camera and uniform
/// weights.
pub fn random_coupling<R: Rng + ?Sized>(
    n_cameras: usize,
    k: usize,
    mode: CouplingMode,
    rng: &mut R,
) -> Result<JointCoupling, MeasureError> {
    let beliefs = (0..n_cameras)
        .map(|cam| {
            let particles = (0..k).map(|_| sample_uniform(rng)).collect();
            AbsoluteBelief::uniform(cam, particles)
        })
        .collect::<Result<Vec<_>, _>>()?;
    JointCoupling::with_mode(mode, beliefs)
}

/// Replaces camera 0's belief with `reference` and pins it for all later
/// steps.
pub fn fix_gauge(state: &mut SyncState, reference: &AbsoluteBelief) -> Result<(), SyncError> {
    let expected = state.coupling.beliefs()[0].len();
    if reference.len() != expected {
        return Err(SyncError::GaugeMismatch { expected, got: reference.len() });
    }
    if state.coupling.mode() == CouplingMode::LowEntropy {
        let shared = state.coupling.shared_beta().expect("low-entropy coupling has shared β");
        if reference.beta() != shared {
            return Err(SyncError::GaugeSharedWeights);
        }
    }
    let mut belief = reference.clone();
    belief.camera_id = 0;
    *state.coupling.belief_mut(0) = belief.clone();
    state.gauge = belief;
    Ok(())
}

/// Total synchronization loss report.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// False when any Sinkhorn solve behind the value hit its sweep budget.
    pub converged: bool,
    /// Per-edge convergence, in the graph's stored edge order. MMD edges are
    /// closed-form and always converge.
    pub edge_converged: Vec<bool>,
}

/// β-parameter gradients: one vector per camera, or the single shared vector
/// in low-entropy mode.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightGradients {
    PerCamera(Vec<Vec<f64>>),
    Shared(Vec<f64>),
}

/// Gradients of the total loss for every camera and particle. Position
/// entries live in the tangent space at the corresponding particle; weight
/// entries differentiate with respect to the β parameters (masses are β²)
/// and include the regularizer term for unconstrained runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub position: Vec<Vec<TangentVector>>,
    pub weight: WeightGradients,
}

/// Σ over stored edges of the configured divergence between the coupling's
/// pushforward and the observed measure, plus λ·Σ masses when unconstrained.
///
/// Sinkhorn edges run to the reference tolerance; a budget-capped edge is
/// reported through `converged = false` with the value still returned.
pub fn total_loss(
    state: &SyncState,
    graph: &RotationGraph,
    config: &SyncConfig,
) -> Result<LossReport, SyncError> {
    config.validate()?;
    check_shapes(&state.coupling, graph)?;
    let mut caches = build_caches(&state.coupling, graph, config)?;
    let out = assemble(
        &state.coupling,
        graph,
        config,
        &mut caches,
        REFERENCE_TOL,
        REFERENCE_BUDGET,
        false,
    )?;
    Ok(LossReport {
        value: out.value,
        converged: out.converged,
        edge_converged: out.edge_converged,
    })
}

/// Reference-quality gradients of [`total_loss`] (fresh solves at the
/// reference tolerance). Camera 0's gradients are zeroed for the gauge.
pub fn loss_gradients(
    state: &SyncState,
    graph: &RotationGraph,
    config: &SyncConfig,
) -> Result<Gradients, SyncError> {
    config.validate()?;
    check_shapes(&state.coupling, graph)?;
    let mut caches = build_caches(&state.coupling, graph, config)?;
    let mut out = assemble(
        &state.coupling,
        graph,
        config,
        &mut caches,
        REFERENCE_TOL,
        REFERENCE_BUDGET,
        true,
    )?;
    let grads = out.grads.take().expect("gradients were requested");
    Ok(apply_gauge_zero(grads))
}

/// One descent step: position updates through the manifold exponential,
/// weight updates on the β sphere (constrained) or by plain descent with the
/// mass regularizer (unconstrained). Appends a reference-quality loss to the
/// trace every `trace_stride` iterations.
pub fn rpgd_step(
    state: &mut SyncState,
    graph: &RotationGraph,
    config: &SyncConfig,
) -> Result<(), SyncError> {
    config.validate()?;
    check_shapes(&state.coupling, graph)?;
    if state.caches.len() != graph.edges().len() {
        state.caches = build_caches(&state.coupling, graph, config)?;
    }
    let mut out = assemble(
        &state.coupling,
        graph,
        config,
        &mut state.caches,
        STEP_TOL,
        STEP_BUDGET,
        true,
    )?;
    let grads = out.grads.take().expect("gradients were requested");

    for cam in 1..state.coupling.n_cameras() {
        let masses = state.coupling.beliefs()[cam].weights();
        for (k, gv) in grads.position[cam].iter().enumerate() {
            let eta = match config.step_rule {
                StepRule::Constant => config.eta_q,
                StepRule::InverseWeight { eta_q0 } => eta_q0 / masses[k].max(WEIGHT_FLOOR),
            };
            let step = [-eta * gv[0], -eta * gv[1], -eta * gv[2]];
            let q = state.coupling.beliefs()[cam].particles()[k].exp_map(&step).canonicalized();
            state.coupling.belief_mut(cam).set_particle(k, q);
        }
    }

    match &grads.weight {
        WeightGradients::PerCamera(per_camera) => {
            for cam in 1..state.coupling.n_cameras() {
                let beta = state.coupling.beliefs()[cam].beta().to_vec();
                let updated = step_beta(&beta, &per_camera[cam], config);
                state.coupling.belief_mut(cam).set_beta(updated);
            }
        }
        WeightGradients::Shared(g) => {
            let beta = state
                .coupling
                .shared_beta()
                .expect("low-entropy coupling has shared β")
                .to_vec();
            let updated = step_beta(&beta, g, config);
            state.coupling.set_shared_beta(updated);
        }
    }

    state.iteration += 1;
    if state.iteration % config.trace_stride == 0 {
        let eval = assemble(
            &state.coupling,
            graph,
            config,
            &mut state.caches,
            REFERENCE_TOL,
            REFERENCE_BUDGET,
            false,
        )?;
        state.loss_trace.push((state.iteration, eval.value));
        state.trace_converged = eval.converged;
    }
    Ok(())
}

/// Full optimization: fresh uniform initialization (or the provided
/// coupling), camera 0 pinned as gauge, descent until `max_iter` or until the
/// loss stalls. The trace starts at iteration 0 and always ends at the final
/// iterate, adding one off-stride row when the run stops between trace
/// points.
pub fn run(
    graph: &RotationGraph,
    config: &SyncConfig,
    init: Option<JointCoupling>,
) -> Result<SyncState, SyncError> {
    run_observed(graph, config, init, |_, _| {})
}

/// [`run`] with a trace observer: `on_trace(iteration, loss)` fires once for
/// every trace row as it is appended, letting callers stamp wallclock times
/// or stream progress without re-evaluating the loss.
pub fn run_observed(
    graph: &RotationGraph,
    config: &SyncConfig,
    init: Option<JointCoupling>,
    mut on_trace: impl FnMut(usize, f64),
) -> Result<SyncState, SyncError> {
    config.validate()?;
    let coupling = match init {
        Some(c) => {
            if c.n_cameras() != graph.n_cameras() {
                return Err(SyncError::CameraCountMismatch {
                    expected: graph.n_cameras(),
                    got: c.n_cameras(),
                });
            }
            if c.mode() != config.mode {
                return Err(SyncError::ModeMismatch);
            }
            c
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut c =
                random_coupling(graph.n_cameras(), config.particles, config.mode, &mut rng)?;
            if config.particles == 1 {
                // single-particle gauge defaults to the identity rotation
                c.belief_mut(0).set_particle(0, UnitQuaternion::identity());
            }
            c
        }
    };
    let mut state = initial_state(coupling, config)?;
    let report = total_loss(&state, graph, config)?;
    state.loss_trace.push((0, report.value));
    state.trace_converged = report.converged;
    on_trace(0, report.value);
    let mut seen = state.loss_trace.len();
    while state.iteration < config.max_iter {
        rpgd_step(&mut state, graph, config)?;
        while seen < state.loss_trace.len() {
            let (it, loss) = state.loss_trace[seen];
            on_trace(it, loss);
            seen += 1;
        }
        if state.iteration % config.trace_stride == 0
            && stalled(&state.loss_trace, config.trace_stride)
        {
            break;
        }
    }
    if state.iteration % config.trace_stride != 0 {
        // a terminal iteration off the stride grid still gets a row, so the
        // trace always reports the returned iterate
        let eval = assemble(
            &state.coupling,
            graph,
            config,
            &mut state.caches,
            REFERENCE_TOL,
            REFERENCE_BUDGET,
            false,
        )?;
        state.loss_trace.push((state.iteration, eval.value));
        state.trace_converged = eval.converged;
        on_trace(state.iteration, eval.value);
    }
    Ok(state)
}

fn stalled(trace: &[(usize, f64)], stride: usize) -> bool {
    let lag = STALL_WINDOW.div_ceil(stride);
    if trace.len() <= lag {
        return false;
    }
    let (_, prev) = trace[trace.len() - 1 - lag];
    let (_, last) = trace[trace.len() - 1];
    (prev - last) / prev.abs().max(f64::MIN_POSITIVE) < STALL_REL
}

fn step_beta(beta: &[f64], grad: &[f64], config: &SyncConfig) -> Vec<f64> {
    if config.constrained {
        let radial: f64 = grad.iter().zip(beta).map(|(g, b)| g * b).sum();
        let tangent: Vec<f64> = grad
            .iter()
            .zip(beta)
            .map(|(g, b)| -config.eta_beta * (g - radial * b))
            .collect();
        sphere_exp(beta, &tangent)
    } else {
        beta.iter().zip(grad).map(|(b, g)| b - config.eta_beta * g).collect()
    }
}

fn check_shapes(coupling: &JointCoupling, graph: &RotationGraph) -> Result<(), SyncError> {
    if coupling.n_cameras() != graph.n_cameras() {
        return Err(SyncError::CameraCountMismatch {
            expected: graph.n_cameras(),
            got: coupling.n_cameras(),
        });
    }
    Ok(())
}

fn apply_gauge_zero(mut grads: Gradients) -> Gradients {
    for g in &mut grads.position[0] {
        *g = [0.0; 3];
    }
    if let WeightGradients::PerCamera(per_camera) = &mut grads.weight {
        for g in &mut per_camera[0] {
            *g = 0.0;
        }
    }
    grads
}

/// Per-edge solver state carried across iterations: warm Sinkhorn potentials
/// for the cross and self problems, plus the constant target self-term.
#[derive(Debug, Clone)]
struct EdgeCache {
    /// Target weights as the divergence sees them (normalized for Sinkhorn).
    tgt_w: Vec<f64>,
    /// d_α(ν, ν) for Sinkhorn; the target-target kernel energy for MMD.
    target_self: f64,
    target_self_ok: bool,
    f: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
}

fn hat_size(coupling: &JointCoupling, i: usize, j: usize) -> usize {
    match coupling.mode() {
        CouplingMode::HighEntropy => {
            coupling.beliefs()[i].len() * coupling.beliefs()[j].len()
        }
        CouplingMode::LowEntropy => coupling.beliefs()[i].len(),
    }
}

fn build_caches(
    coupling: &JointCoupling,
    graph: &RotationGraph,
    config: &SyncConfig,
) -> Result<Vec<EdgeCache>, SyncError> {
    graph
        .edges()
        .iter()
        .map(|e| {
            let a = hat_size(coupling, e.i, e.j);
            let m = e.measure.support_size();
            match config.loss_kind {
                LossKind::Mmd => {
                    let tgt_w = e.measure.weights().to_vec();
                    // target-target energy, row sums first so the hat-side
                    // pass at a coincident state reproduces it bitwise
                    let mut tt = 0.0;
                    for (ym, vm) in e.measure.atoms().iter().zip(&tgt_w) {
                        let mut row = 0.0;
                        for (yn, vn) in e.measure.atoms().iter().zip(&tgt_w) {
                            row += vn * kernel(&config.cost, ym, yn);
                        }
                        tt += vm * row;
                    }
                    Ok(EdgeCache {
                        tgt_w,
                        target_self: tt,
                        target_self_ok: true,
                        f: Vec::new(),
                        g: Vec::new(),
                        h: Vec::new(),
                    })
                }
                LossKind::Sinkhorn => {
                    let mass = e.measure.total_mass();
                    if !(mass > 0.0) {
                        return Err(SyncError::Divergence(DivergenceError::ZeroMass));
                    }
                    let tgt_w: Vec<f64> =
                        e.measure.weights().iter().map(|w| w / mass).collect();
                    let c_tt = cost_matrix(e.measure.atoms(), e.measure.atoms(), &config.cost);
                    let mut ht = vec![0.0; m];
                    let out = sinkhorn_sym_sweeps(
                        &tgt_w,
                        &c_tt,
                        config.alpha,
                        &mut ht,
                        REFERENCE_TOL,
                        REFERENCE_BUDGET,
                    );
                    Ok(EdgeCache {
                        tgt_w,
                        target_self: out.value,
                        target_self_ok: out.converged,
                        f: vec![0.0; a],
                        g: vec![0.0; m],
                        h: vec![0.0; a],
                    })
                }
            }
        })
        .collect()
}

struct EdgeOutcome {
    value: f64,
    converged: bool,
    /// Per hat atom, tangent gradient at the composed rotation.
    pos: Vec<TangentVector>,
    /// Per hat atom, derivative with respect to the pushforward weight.
    wgrad: Vec<f64>,
}

/// MMD² of the edge plus gradients, in one fused pass over the kernel
/// evaluations. The own/target accumulations mirror each other and the
/// cached target energy exactly, so a hat that coincides with the target
/// bitwise yields value and gradients of exactly zero.
fn eval_edge_mmd(
    hat: &DiscreteMeasure,
    target: &DiscreteMeasure,
    cache: &EdgeCache,
    cost: &GroundCost,
    want_grads: bool,
) -> EdgeOutcome {
    let atoms = hat.atoms();
    let w = hat.weights();
    let a = atoms.len();
    let mut pos = vec![[0.0f64; 3]; if want_grads { a } else { 0 }];
    let mut wgrad = vec![0.0f64; if want_grads { a } else { 0 }];
    let mut own_energy = 0.0;
    let mut cross_energy = 0.0;
    for (ai, (xi, wi)) in atoms.iter().zip(w).enumerate() {
        let mut own_k = 0.0;
        let mut own_g = [0.0f64; 3];
        for (xj, wj) in atoms.iter().zip(w) {
            let kv = wj * kernel(cost, xi, xj);
            own_k += kv;
            if want_grads {
                let gc = cost_grad(xi, xj, cost);
                own_g[0] += kv * gc[0];
                own_g[1] += kv * gc[1];
                own_g[2] += kv * gc[2];
            }
        }
        let mut tgt_k = 0.0;
        let mut tgt_g = [0.0f64; 3];
        for (ym, vm) in target.atoms().iter().zip(&cache.tgt_w) {
            let kv = vm * kernel(cost, xi, ym);
            tgt_k += kv;
            if want_grads {
                let gc = cost_grad(xi, ym, cost);
                tgt_g[0] += kv * gc[0];
                tgt_g[1] += kv * gc[1];
                tgt_g[2] += kv * gc[2];
            }
        }
        own_energy += wi * own_k;
        cross_energy += wi * tgt_k;
        if want_grads {
            // ∇k = −exp(−c)·∇c, so the sign flips relative to the k-sums
            let s = 2.0 * wi;
            pos[ai] = [
                s * (tgt_g[0] - own_g[0]),
                s * (tgt_g[1] - own_g[1]),
                s * (tgt_g[2] - own_g[2]),
            ];
            wgrad[ai] = 2.0 * (own_k - tgt_k);
        }
    }
    EdgeOutcome {
        value: own_energy - 2.0 * cross_energy + cache.target_self,
        converged: true,
        pos,
        wgrad,
    }
}

/// Debiased Sinkhorn divergence of the edge plus envelope gradients, with the
/// cross and self potentials warm-started from the cache. Weights are
/// normalized before solving, matching the standalone divergence.
fn eval_edge_sinkhorn(
    hat: &DiscreteMeasure,
    target: &DiscreteMeasure,
    cache: &mut EdgeCache,
    alpha: f64,
    cost: &GroundCost,
    tol: f64,
    budget: usize,
    want_grads: bool,
) -> Result<EdgeOutcome, SyncError> {
    let mass = hat.total_mass();
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(SyncError::Divergence(DivergenceError::ZeroMass));
    }
    let hat_w: Vec<f64> = hat.weights().iter().map(|w| w / mass).collect();
    let a = hat_w.len();
    let c_self = cost_matrix(hat.atoms(), hat.atoms(), cost);

    // when the pushforward lands exactly on the target, the alternating
    // sweeps of the cross problem stall in an antisymmetric mode; all three
    // terms are then the same symmetric solve, and the gradients vanish by
    // symmetry
    if hat.atoms() == target.atoms() && hat_w == cache.tgt_w {
        let own = sinkhorn_sym_sweeps(&hat_w, &c_self, alpha, &mut cache.h, tol, budget);
        cache.f.copy_from_slice(&cache.h);
        cache.g.copy_from_slice(&cache.h);
        return Ok(EdgeOutcome {
            value: own.value - cache.target_self,
            converged: own.converged && cache.target_self_ok,
            pos: vec![[0.0; 3]; if want_grads { a } else { 0 }],
            wgrad: vec![0.0; if want_grads { a } else { 0 }],
        });
    }

    let c_cross = cost_matrix(hat.atoms(), target.atoms(), cost);
    let cross = sinkhorn_sweeps(
        &hat_w,
        &cache.tgt_w,
        &c_cross,
        alpha,
        &mut cache.f,
        &mut cache.g,
        tol,
        budget,
    );
    let own = sinkhorn_sym_sweeps(&hat_w, &c_self, alpha, &mut cache.h, tol, budget);
    let (pos, wgrad) = if want_grads {
        let pos = sinkhorn_position_grads_raw(
            hat.atoms(),
            &hat_w,
            target.atoms(),
            &cache.tgt_w,
            &c_cross,
            &cache.f,
            &cache.g,
            &c_self,
            &cache.h,
            &cache.h,
            alpha,
            cost,
        );
        let wgrad = cache.f.iter().zip(&cache.h).map(|(fi, hi)| 2.0 * fi - 2.0 * hi).collect();
        (pos, wgrad)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(EdgeOutcome {
        value: 2.0 * cross.value - own.value - cache.target_self,
        converged: cross.converged && own.converged && cache.target_self_ok,
        pos,
        wgrad,
    })
}

struct Assembled {
    value: f64,
    converged: bool,
    edge_converged: Vec<bool>,
    grads: Option<Gradients>,
}

/// Evaluates every edge in stored order, pulls the atom gradients back to the
/// camera particles, and chains weight gradients to the β parameters. Gauge
/// zeroing is left to the callers.
fn assemble(
    coupling: &JointCoupling,
    graph: &RotationGraph,
    config: &SyncConfig,
    caches: &mut [EdgeCache],
    tol: f64,
    budget: usize,
    want_grads: bool,
) -> Result<Assembled, SyncError> {
    let n = coupling.n_cameras();
    let mut value = 0.0;
    let mut converged = true;
    let mut edge_converged = Vec::with_capacity(graph.edges().len());
    let mut position: Vec<Vec<TangentVector>> = Vec::new();
    let mut wg_per: Vec<Vec<f64>> = Vec::new();
    let mut wg_shared: Vec<f64> = Vec::new();
    let low_entropy = coupling.mode() == CouplingMode::LowEntropy;
    if want_grads {
        position = coupling.beliefs().iter().map(|b| vec![[0.0; 3]; b.len()]).collect();
        if low_entropy {
            wg_shared = vec![0.0; coupling.beliefs()[0].len()];
        } else {
            wg_per = coupling.beliefs().iter().map(|b| vec![0.0; b.len()]).collect();
        }
    }

    for (e, cache) in graph.edges().iter().zip(caches.iter_mut()) {
        let hat = pushforward_relative(coupling, e.i, e.j)?;
        let outcome = match config.loss_kind {
            LossKind::Mmd => eval_edge_mmd(&hat, &e.measure, cache, &config.cost, want_grads),
            LossKind::Sinkhorn => eval_edge_sinkhorn(
                &hat,
                &e.measure,
                cache,
                config.alpha,
                &config.cost,
                tol,
                budget,
                want_grads,
            )?,
        };
        value += outcome.value;
        converged &= outcome.converged;
        edge_converged.push(outcome.converged);
        if !want_grads {
            continue;
        }

        let bi = &coupling.beliefs()[e.i];
        let bj = &coupling.beliefs()[e.j];
        let kj = bj.len();
        let wi = bi.weights();
        let wj = bj.weights();
        for (a, gv) in outcome.pos.iter().enumerate() {
            let (ki, kjj) = if low_entropy { (a, a) } else { (a / kj, a % kj) };
            if !(gv[0].is_finite() && gv[1].is_finite() && gv[2].is_finite())
                || !outcome.wgrad[a].is_finite()
            {
                return Err(SyncError::NonFiniteGradient {
                    camera: e.i,
                    particle: ki,
                    edge_i: e.i,
                    edge_j: e.j,
                });
            }
            // perturbing qᵢ by v moves the composed atom by the tangent
            // vector rotated with qⱼ, so the pullback rotates back; the qⱼ
            // gradient is the exact negative in its own frame
            let gi = bj.particles()[kjj].conjugate().rotate_tangent(gv);
            let pi = &mut position[e.i][ki];
            pi[0] += gi[0];
            pi[1] += gi[1];
            pi[2] += gi[2];
            let pj = &mut position[e.j][kjj];
            pj[0] -= gi[0];
            pj[1] -= gi[1];
            pj[2] -= gi[2];
            if low_entropy {
                wg_shared[a] += outcome.wgrad[a];
            } else {
                wg_per[e.i][ki] += outcome.wgrad[a] * wj[kjj];
                wg_per[e.j][kjj] += outcome.wgrad[a] * wi[ki];
            }
        }
    }

    if !config.constrained {
        let mass: f64 =
            coupling.beliefs().iter().map(|b| b.weights().iter().sum::<f64>()).sum();
        value += config.lambda * mass;
    }

    let grads = if want_grads {
        let weight = if low_entropy {
            if !config.constrained {
                // each camera contributes λ to the shared mass derivative
                for g in &mut wg_shared {
                    *g += config.lambda * n as f64;
                }
            }
            let beta = coupling.shared_beta().expect("low-entropy coupling has shared β");
            for (g, b) in wg_shared.iter_mut().zip(beta) {
                *g *= 2.0 * b;
            }
            WeightGradients::Shared(wg_shared)
        } else {
            for (cam, grads_c) in wg_per.iter_mut().enumerate() {
                let beta = coupling.beliefs()[cam].beta();
                for (g, b) in grads_c.iter_mut().zip(beta) {
                    if !config.constrained {
                        *g += config.lambda;
                    }
                    *g *= 2.0 * b;
                }
            }
            WeightGradients::PerCamera(wg_per)
        };
        Some(Gradients { position, weight })
    } else {
        None
    };

    Ok(Assembled { value, converged, edge_converged, grads })
}
