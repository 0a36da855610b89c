//! Discrete measures on the rotation manifold, per-camera beliefs, the joint
//! couplings over all cameras, and the relative-pose pushforward that turns
//! absolute beliefs into estimated edge measures.
//!
//! Storage boundary rule: every quaternion held by a measure or belief is
//! sign-canonicalized (scalar part ≥ 0) at construction. Transient arithmetic
//! elsewhere does not canonicalize.

use crate::manifold::UnitQuaternion;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("atom/weight length mismatch: {atoms} atoms vs {weights} weights")]
    LengthMismatch { atoms: usize, weights: usize },
    #[error("a measure needs at least one atom")]
    EmptySupport,
    #[error("weight {index} is {value}, weights must be finite and ≥ 0")]
    InvalidWeight { index: usize, value: f64 },
    #[error("cannot normalize a measure with zero total mass")]
    ZeroMass,
    #[error("camera {camera} holds {got} particles, expected {expected}")]
    ParticleCountMismatch { camera: usize, expected: usize, got: usize },
    #[error("camera {camera}'s weight parameters differ from the shared ones")]
    InconsistentSharedWeights { camera: usize },
    #[error("camera pair ({i}, {j}) invalid for {n} cameras")]
    InvalidCameraPair { i: usize, j: usize, n: usize },
}

/// Weighted atoms over `A`; probability mode is a runtime predicate, not a
/// distinct type. Quaternion-atom measures canonicalize at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<A = UnitQuaternion> {
    atoms: Vec<A>,
    weights: Vec<f64>,
}

impl<A> DiscreteMeasure<A> {
    /// Generic constructor; validates shape and weight sanity, performs no
    /// atom normalization.
    pub fn from_parts(atoms: Vec<A>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if atoms.len() != weights.len() {
            return Err(MeasureError::LengthMismatch {
                atoms: atoms.len(),
                weights: weights.len(),
            });
        }
        if atoms.is_empty() {
            return Err(MeasureError::EmptySupport);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(MeasureError::InvalidWeight { index, value });
            }
        }
        Ok(Self { atoms, weights })
    }

    pub fn atoms(&self) -> &[A] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support_size(&self) -> usize {
        self.atoms.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= 1e-9
    }

    /// Rescales weights to unit mass.
    pub fn normalized(&self) -> Result<Self, MeasureError>
    where
        A: Clone,
    {
        let mass = self.total_mass();
        if mass <= 0.0 {
            return Err(MeasureError::ZeroMass);
        }
        Ok(Self {
            atoms: self.atoms.clone(),
            weights: self.weights.iter().map(|w| w / mass).collect(),
        })
    }
}

impl DiscreteMeasure<UnitQuaternion> {
    /// Canonicalizing constructor for rotation-atom measures.
    pub fn new(
        atoms: Vec<UnitQuaternion>,
        weights: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        let atoms = atoms.into_iter().map(|q| q.canonicalized()).collect();
        Self::from_parts(atoms, weights)
    }

    /// Uniform probability weights over the given atoms.
    pub fn uniform(atoms: Vec<UnitQuaternion>) -> Result<Self, MeasureError> {
        let w = 1.0 / atoms.len().max(1) as f64;
        let weights = vec![w; atoms.len()];
        Self::new(atoms, weights)
    }

    pub fn dirac(q: UnitQuaternion) -> Self {
        Self { atoms: vec![q.canonicalized()], weights: vec![1.0] }
    }
}

/// Product of two measures: all ordered atom pairs, multiplied weights.
pub fn product_measure<A: Clone, B: Clone>(
    mu: &DiscreteMeasure<A>,
    nu: &DiscreteMeasure<B>,
) -> DiscreteMeasure<(A, B)> {
    let mut atoms = Vec::with_capacity(mu.support_size() * nu.support_size());
    let mut weights = Vec::with_capacity(atoms.capacity());
    for (a, wa) in mu.atoms().iter().zip(mu.weights()) {
        for (b, wb) in nu.atoms().iter().zip(nu.weights()) {
            atoms.push((a.clone(), b.clone()));
            weights.push(wa * wb);
        }
    }
    DiscreteMeasure { atoms, weights }
}

/// Conjugates every atom, keeping weights: the measure of inverse rotations.
pub fn invert_measure(mu: &DiscreteMeasure<UnitQuaternion>) -> DiscreteMeasure<UnitQuaternion> {
    let atoms = mu
        .atoms()
        .iter()
        .map(|q| q.conjugate().canonicalized())
        .collect();
    DiscreteMeasure { atoms, weights: mu.weights.clone() }
}

/// Elementwise square: weight parameters β to masses w = β².
pub fn weights_from_beta(beta: &[f64]) -> Vec<f64> {
    beta.iter().map(|b| b * b).collect()
}

/// One camera's estimated measure over absolute rotations: particles plus
/// weight parameters β with masses β².
#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteBelief {
    pub camera_id: usize,
    particles: Vec<UnitQuaternion>,
    beta: Vec<f64>,
}

impl AbsoluteBelief {
    pub fn new(
        camera_id: usize,
        particles: Vec<UnitQuaternion>,
        beta: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        if particles.len() != beta.len() {
            return Err(MeasureError::LengthMismatch {
                atoms: particles.len(),
                weights: beta.len(),
            });
        }
        if particles.is_empty() {
            return Err(MeasureError::EmptySupport);
        }
        for (index, &value) in beta.iter().enumerate() {
            if !value.is_finite() {
                return Err(MeasureError::InvalidWeight { index, value });
            }
        }
        let particles = particles.into_iter().map(|q| q.canonicalized()).collect();
        Ok(Self { camera_id, particles, beta })
    }

    /// Uniform belief: β = 1/√K per particle, masses 1/K.
    pub fn uniform(camera_id: usize, particles: Vec<UnitQuaternion>) -> Result<Self, MeasureError> {
        let k = particles.len();
        let beta = vec![1.0 / (k.max(1) as f64).sqrt(); k];
        Self::new(camera_id, particles, beta)
    }

    pub fn particles(&self) -> &[UnitQuaternion] {
        &self.particles
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        weights_from_beta(&self.beta)
    }

    /// ‖β‖ = 1 within 1e-9 (masses form a probability vector).
    pub fn is_constrained(&self) -> bool {
        (self.beta.iter().map(|b| b * b).sum::<f64>() - 1.0).abs() <= 1e-9
    }

    pub fn to_measure(&self) -> DiscreteMeasure<UnitQuaternion> {
        DiscreteMeasure { atoms: self.particles.clone(), weights: self.weights() }
    }

    pub(crate) fn set_particle(&mut self, k: usize, q: UnitQuaternion) {
        self.particles[k] = q;
    }

    pub(crate) fn set_beta(&mut self, beta: Vec<f64>) {
        debug_assert_eq!(beta.len(), self.particles.len());
        self.beta = beta;
    }
}

/// Joint-coupling structure of the per-camera beliefs.
///
/// High-entropy couplings treat the joint as the full product of marginals,
/// so an edge (i, j) pushes forward to K_i·K_j relative atoms. Low-entropy
/// couplings align particles by index with one shared weight vector, pushing
/// forward to K diagonal atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    HighEntropy,
    LowEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointCoupling {
    mode: CouplingMode,
    beliefs: Vec<AbsoluteBelief>,
    /// Low-entropy only: the single weight-parameter vector every camera
    /// shares; kept bitwise equal to each belief's β.
    shared_beta: Option<Vec<f64>>,
}

impl JointCoupling {
    pub fn high_entropy(beliefs: Vec<AbsoluteBelief>) -> Result<Self, MeasureError> {
        if beliefs.is_empty() {
            return Err(MeasureError::EmptySupport);
        }
        Ok(Self { mode: CouplingMode::HighEntropy, beliefs, shared_beta: None })
    }

    pub fn low_entropy(beliefs: Vec<AbsoluteBelief>) -> Result<Self, MeasureError> {
        if beliefs.is_empty() {
            return Err(MeasureError::EmptySupport);
        }
        let k = beliefs[0].len();
        let shared = beliefs[0].beta().to_vec();
        for b in &beliefs {
            if b.len() != k {
                return Err(MeasureError::ParticleCountMismatch {
                    camera: b.camera_id,
                    expected: k,
                    got: b.len(),
                });
            }
            if b.beta() != shared.as_slice() {
                return Err(MeasureError::InconsistentSharedWeights { camera: b.camera_id });
            }
        }
        Ok(Self { mode: CouplingMode::LowEntropy, beliefs, shared_beta: Some(shared) })
    }

    pub fn with_mode(
        mode: CouplingMode,
        beliefs: Vec<AbsoluteBelief>,
    ) -> Result<Self, MeasureError> {
        match mode {
            CouplingMode::HighEntropy => Self::high_entropy(beliefs),
            CouplingMode::LowEntropy => Self::low_entropy(beliefs),
        }
    }

    pub fn mode(&self) -> CouplingMode {
        self.mode
    }

    pub fn beliefs(&self) -> &[AbsoluteBelief] {
        &self.beliefs
    }

    pub fn n_cameras(&self) -> usize {
        self.beliefs.len()
    }

    pub fn shared_beta(&self) -> Option<&[f64]> {
        self.shared_beta.as_deref()
    }

    pub(crate) fn belief_mut(&mut self, i: usize) -> &mut AbsoluteBelief {
        &mut self.beliefs[i]
    }

    /// Writes the shared weight parameters through to every belief.
    pub(crate) fn set_shared_beta(&mut self, beta: Vec<f64>) {
        debug_assert_eq!(self.mode, CouplingMode::LowEntropy);
        for b in &mut self.beliefs {
            b.set_beta(beta.clone());
        }
        self.shared_beta = Some(beta);
    }
}

/// Estimated relative measure for the edge (i, j): atoms q_i ⊗ q̄_j under the
/// coupling's joint structure.
pub fn pushforward_relative(
    coupling: &JointCoupling,
    i: usize,
    j: usize,
) -> Result<DiscreteMeasure<UnitQuaternion>, MeasureError> {
    let n = coupling.n_cameras();
    if i == j || i >= n || j >= n {
        return Err(MeasureError::InvalidCameraPair { i, j, n });
    }
    let bi = &coupling.beliefs[i];
    let bj = &coupling.beliefs[j];
    let wi = bi.weights();
    let wj = bj.weights();
    match coupling.mode {
        CouplingMode::HighEntropy => {
            let mut atoms = Vec::with_capacity(bi.len() * bj.len());
            let mut weights = Vec::with_capacity(bi.len() * bj.len());
            for (qi, wa) in bi.particles().iter().zip(&wi) {
                for (qj, wb) in bj.particles().iter().zip(&wj) {
                    atoms.push(qi.mul(&qj.conjugate()).canonicalized());
                    weights.push(wa * wb);
                }
            }
            Ok(DiscreteMeasure { atoms, weights })
        }
        CouplingMode::LowEntropy => {
            if bi.len() != bj.len() {
                return Err(MeasureError::ParticleCountMismatch {
                    camera: bj.camera_id,
                    expected: bi.len(),
                    got: bj.len(),
                });
            }
            let atoms = bi
                .particles()
                .iter()
                .zip(bj.particles())
                .map(|(qi, qj)| qi.mul(&qj.conjugate()).canonicalized())
                .collect();
            // index-aligned particles share one weight vector
            Ok(DiscreteMeasure { atoms, weights: wi })
        }
    }
}
