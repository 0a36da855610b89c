//! Unit-quaternion algebra and the Riemannian calculus the optimizer runs on:
//! multiplication, conjugation, exp/log maps, the antipodal-aware geodesic
//! distance, and analytic (sub)gradients.
//!
//! Quaternions q and −q encode the same rotation. Every distance here is
//! invariant to independent sign flips of either argument; storage-level
//! canonicalization (scalar part ≥ 0) is applied by the containers in
//! [`crate::measures`], not inside transient arithmetic.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Tangent-space displacement at some base quaternion: the imaginary part of
/// a pure quaternion (0, v), components in radians.
pub type TangentVector = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum ManifoldError {
    /// The 4-vector cannot be normalized onto the unit sphere.
    #[error("quaternion norm {norm:.3e} cannot be normalized to a versor")]
    DegenerateNorm { norm: f64 },
    /// Log map requested at the cut locus (target ≈ antipode of the base).
    #[error("log map undefined at the cut locus (scalar part of q⁻¹p ≈ -1); canonicalize signs first")]
    AntipodalLogMap,
}

/// A versor: unit-norm quaternion w + xi + yj + zk.
///
/// Construction normalizes, so every held value has ‖q‖ = 1 up to round-off;
/// multiplicative operations renormalize their results to keep drift from
/// accumulating over long optimization runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    /// Normalizes the components onto the unit sphere. Construction is
    /// idempotent: components that are already unit up to round-off are kept
    /// bit for bit, so rebuilding a quaternion from [`Self::as_array`] (or
    /// from a file) cannot perturb it.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, ManifoldError> {
        let n2 = w * w + x * x + y * y + z * z;
        if !n2.is_finite() || n2 < 1e-24 {
            return Err(ManifoldError::DegenerateNorm { norm: n2.sqrt() });
        }
        if (n2 - 1.0).abs() <= 8.0 * f64::EPSILON {
            return Ok(Self { w, x, y, z });
        }
        let norm = n2.sqrt();
        Ok(Self {
            w: w / norm,
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self, ManifoldError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub const fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Hamilton product, renormalized.
    pub fn mul(&self, r: &Self) -> Self {
        let p = self;
        let q = Self {
            w: p.w * r.w - p.x * r.x - p.y * r.y - p.z * r.z,
            x: p.w * r.x + r.w * p.x + p.y * r.z - p.z * r.y,
            y: p.w * r.y + r.w * p.y + p.z * r.x - p.x * r.z,
            z: p.w * r.z + r.w * p.z + p.x * r.y - p.y * r.x,
        };
        q.renormalized()
    }

    /// Conjugate (w, −x, −y, −z); equals the inverse for versors.
    pub fn conjugate(&self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Ambient 4-vector dot product.
    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Exact componentwise negation: the other representative of the same
    /// rotation on the double cover.
    pub fn antipode(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Flips the sign so the scalar part is ≥ 0; at w = 0 the first nonzero
    /// imaginary component is made positive.
    pub fn canonicalized(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.canonicalized() == *self
    }

    /// Riemannian exponential: q ⊗ (cos‖v‖, sin‖v‖·v/‖v‖).
    ///
    /// The zero tangent returns `self` bitwise.
    pub fn exp_map(&self, v: &TangentVector) -> Self {
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 == 0.0 {
            return *self;
        }
        let n = n2.sqrt();
        // sinc stays accurate through the series branch as n → 0
        let (c, s) = if n < 1e-8 {
            (1.0 - n2 / 2.0, 1.0 - n2 / 6.0)
        } else {
            (n.cos(), n.sin() / n)
        };
        self.mul(&Self { w: c, x: s * v[0], y: s * v[1], z: s * v[2] })
    }

    /// Riemannian logarithm: with (w, v) = q⁻¹p, returns (v/‖v‖)·arccos(w).
    ///
    /// Exact inverse of [`exp_map`](Self::exp_map) for targets short of the
    /// cut locus; p ≈ −q has no principal direction and errors.
    pub fn log_map(&self, p: &Self) -> Result<TangentVector, ManifoldError> {
        let r = self.conjugate().mul(p);
        let nv = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
        if nv < 1e-12 {
            return if r.w > 0.0 {
                Ok([0.0; 3])
            } else {
                Err(ManifoldError::AntipodalLogMap)
            };
        }
        let theta = r.w.clamp(-1.0, 1.0).acos();
        let s = theta / nv;
        Ok([s * r.x, s * r.y, s * r.z])
    }

    /// Rotates a tangent 3-vector by this quaternion: vec(q ⊗ (0, v) ⊗ q̄).
    pub fn rotate_tangent(&self, v: &TangentVector) -> TangentVector {
        // Rodrigues form of the sandwich product; exact rotation, no
        // renormalization needed.
        let u = [self.x, self.y, self.z];
        let t = [
            2.0 * (u[1] * v[2] - u[2] * v[1]),
            2.0 * (u[2] * v[0] - u[0] * v[2]),
            2.0 * (u[0] * v[1] - u[1] * v[0]),
        ];
        [
            v[0] + self.w * t[0] + u[1] * t[2] - u[2] * t[1],
            v[1] + self.w * t[1] + u[2] * t[0] - u[0] * t[2],
            v[2] + self.w * t[2] + u[0] * t[1] - u[1] * t[0],
        ]
    }

    fn renormalized(&self) -> Self {
        let norm = self.dot(self).sqrt();
        Self {
            w: self.w / norm,
            x: self.x / norm,
            y: self.y / norm,
            z: self.z / norm,
        }
    }
}

/// Geodesic distance respecting the antipodal identification:
/// arccos|⟨q1, q2⟩|, range [0, π/2].
///
/// Identical representatives (either sign) return exactly 0. Without the
/// fast path, a stored norm one ulp under 1 would read as ~1e-8 through
/// arccos even for bitwise-equal inputs.
pub fn geo_distance(q1: &UnitQuaternion, q2: &UnitQuaternion) -> f64 {
    if q1 == q2 || *q1 == q2.antipode() {
        return 0.0;
    }
    q1.dot(q2).abs().clamp(0.0, 1.0).acos()
}

/// Subgradient of `geo_distance(x, y)` with respect to x, expressed in the
/// tangent space at x.
///
/// With (·, v) = x⁻¹y and s = sign⟨x, y⟩ (s = 1 at zero), the subgradient is
/// −s·v/‖v‖; at x = ±y the distance is minimized and the zero vector is a
/// valid subgradient.
pub fn geo_distance_subgrad(x: &UnitQuaternion, y: &UnitQuaternion) -> TangentVector {
    let r = x.conjugate().mul(y);
    let nv = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    if nv < 1e-12 {
        return [0.0; 3];
    }
    let s = if r.w < 0.0 { 1.0 } else { -1.0 } / nv;
    [s * r.x, s * r.y, s * r.z]
}

/// Gradients of d(q_i ⊗ q̄_j, q_ij) with respect to q_i and q_j.
///
/// Perturbing q_i by a tangent u moves the relative pose q_i ⊗ q̄_j by the
/// conjugated tangent q_j u q̄_j, so the pullback of the distance subgradient
/// at the relative pose is its rotation by q̄_j; the q_j gradient is its
/// negation.
pub fn relpose_grads(
    qi: &UnitQuaternion,
    qj: &UnitQuaternion,
    qij: &UnitQuaternion,
) -> (TangentVector, TangentVector) {
    let qhat = qi.mul(&qj.conjugate());
    let g = geo_distance_subgrad(&qhat, qij);
    let gi = qj.conjugate().rotate_tangent(&g);
    (gi, [-gi[0], -gi[1], -gi[2]])
}

/// Exponential map on the unit hypersphere of weight parameters:
/// cos(‖g‖)·β + sin(‖g‖)·g/‖g‖.
///
/// `g` must already be orthogonal to `beta` (project before calling); `g = 0`
/// returns `beta` unchanged. The output is renormalized.
pub fn sphere_exp(beta: &[f64], g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(beta.len(), g.len());
    let n2: f64 = g.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return beta.to_vec();
    }
    let n = n2.sqrt();
    let (c, s) = if n < 1e-8 {
        (1.0 - n2 / 2.0, 1.0 - n2 / 6.0)
    } else {
        (n.cos(), n.sin() / n)
    };
    let mut out: Vec<f64> = beta
        .iter()
        .zip(g)
        .map(|(&b, &gv)| c * b + s * gv)
        .collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// Uniform draw on S³ (normalized standard normals), canonicalized to w ≥ 0.
pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if let Ok(q) = UnitQuaternion::new(w, x, y, z) {
            return q.canonicalized();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PI: f64 = std::f64::consts::PI;

    fn q(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion {
        UnitQuaternion::new(w, x, y, z).unwrap()
    }

    /// Independent 3×3 rotation-matrix image of a quaternion.
    fn rotation_matrix(q: &UnitQuaternion) -> [[f64; 3]; 3] {
        let [w, x, y, z] = q.as_array();
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, bk) in b.iter().enumerate() {
                    c[i][j] += a[i][k] * bk[j];
                }
            }
        }
        c
    }

    fn mat_close(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3], tol: f64) -> bool {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(u, v)| (u - v).abs() < tol)
    }

    #[test]
    fn rotation_matrix_helper_is_orthonormal() {
        // guards the oracle itself before it guards anything else
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rotation_matrix(&sample_uniform(&mut rng));
            let mt = [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ];
            let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            assert!(mat_close(&mat_mul(&m, &mt), &eye, 1e-12));
        }
    }

    #[test]
    fn mul_matches_rotation_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = sample_uniform(&mut rng);
            let r = sample_uniform(&mut rng);
            let lhs = rotation_matrix(&p.mul(&r));
            let rhs = mat_mul(&rotation_matrix(&p), &rotation_matrix(&r));
            assert!(mat_close(&lhs, &rhs, 1e-12));
        }
    }

    #[test]
    fn rotate_tangent_matches_matrix_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = sample_uniform(&mut rng);
            let v: TangentVector = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let m = rotation_matrix(&p);
            let rv = p.rotate_tangent(&v);
            for i in 0..3 {
                let mv = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
                assert!((rv[i] - mv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hamilton_relations() {
        let i = q(0.0, 1.0, 0.0, 0.0);
        let j = q(0.0, 0.0, 1.0, 0.0);
        let k = q(0.0, 0.0, 0.0, 1.0);
        assert_eq!(i.mul(&j).as_array(), k.as_array());
        assert_eq!(UnitQuaternion::identity().mul(&i).as_array(), i.as_array());
        // q ⊗ q̄ = 1
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_uniform(&mut rng);
        let e = p.mul(&p.conjugate());
        assert!((e.w() - 1.0).abs() < 1e-15);
        assert_eq!(p.conjugate().conjugate().as_array(), p.as_array());
    }

    #[test]
    fn mul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = sample_uniform(&mut rng);
            let b = sample_uniform(&mut rng);
            let c = sample_uniform(&mut rng);
            let l = a.mul(&b).mul(&c).as_array();
            let r = a.mul(&b.mul(&c)).as_array();
            for (u, v) in l.iter().zip(r.iter()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exp_map_closed_forms() {
        let e = UnitQuaternion::identity();
        assert_eq!(e.exp_map(&[0.0; 3]).as_array(), e.as_array());
        let r = e.exp_map(&[PI / 2.0, 0.0, 0.0]);
        let expect = [0.0, 1.0, 0.0, 0.0];
        for (u, v) in r.as_array().iter().zip(expect.iter()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn log_map_closed_forms() {
        let e = UnitQuaternion::identity();
        assert_eq!(e.log_map(&e).unwrap(), [0.0; 3]);
        let p = q((PI / 4.0).cos(), (PI / 4.0).sin(), 0.0, 0.0);
        let v = e.log_map(&p).unwrap();
        assert!((v[0] - PI / 4.0).abs() < 1e-15 && v[1] == 0.0 && v[2] == 0.0);
    }

    #[test]
    fn log_map_errors_at_cut_locus() {
        let e = UnitQuaternion::identity();
        let anti = q(-1.0, 0.0, 0.0, 0.0);
        assert_eq!(e.log_map(&anti), Err(ManifoldError::AntipodalLogMap));
    }

    #[test]
    fn exp_log_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let base = sample_uniform(&mut rng);
            let scale = 0.001 + 1.4 * rng.random::<f64>();
            let mut v: TangentVector = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            for c in &mut v {
                *c *= scale / n;
            }
            let p = base.exp_map(&v);
            let back = base.log_map(&p).unwrap();
            for (u, w) in v.iter().zip(back.iter()) {
                assert!((u - w).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn log_exp_round_trips_on_both_sheets() {
        // targets with negative scalar alignment still round-trip: the log
        // walks the long great-circle arc and exp follows it back
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let base = sample_uniform(&mut rng);
            let target = sample_uniform(&mut rng);
            // skew some targets onto the far sheet
            let target = if rng.random::<bool>() { target.antipode() } else { target };
            if base.dot(&target).abs() > 1.0 - 1e-6 {
                continue;
            }
            let v = base.log_map(&target).unwrap();
            let p = base.exp_map(&v);
            assert!(
                p.dot(&target).abs() > 1.0 - 1e-12,
                "round trip drifted: {:?}",
                p.as_array()
            );
            // and agreement holds in sign, not only up to it
            assert!(p.dot(&target) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn geo_distance_closed_forms_and_range() {
        let e = UnitQuaternion::identity();
        assert_eq!(geo_distance(&e, &e), 0.0);
        let anti = q(-1.0, 0.0, 0.0, 0.0);
        assert_eq!(geo_distance(&e, &anti), 0.0);
        let p = q((PI / 4.0).cos(), 0.0, 0.0, (PI / 4.0).sin());
        assert!((geo_distance(&e, &p) - PI / 4.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..1000 {
            let a = sample_uniform(&mut rng);
            let b = sample_uniform(&mut rng);
            let d = geo_distance(&a, &b);
            assert!((0.0..=PI / 2.0 + 1e-15).contains(&d));
        }
    }

    #[test]
    fn geo_distance_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..2000 {
            let a = sample_uniform(&mut rng);
            let b = sample_uniform(&mut rng);
            let c = sample_uniform(&mut rng);
            let dab = geo_distance(&a, &b);
            assert!((dab - geo_distance(&b, &a)).abs() < 1e-15);
            assert!(dab <= geo_distance(&a, &c) + geo_distance(&c, &b) + 1e-9);
            // sign-flip invariance in each argument
            assert_eq!(dab, geo_distance(&a, &b.antipode()));
            // bi-invariance under a common left factor
            let dl = geo_distance(&c.mul(&a), &c.mul(&b));
            assert!((dab - dl).abs() < 1e-9);
        }
    }

    fn fd_directional<F: Fn(&UnitQuaternion) -> f64>(
        f: F,
        x: &UnitQuaternion,
        u: &TangentVector,
    ) -> f64 {
        let eps = 1e-6;
        let up = [eps * u[0], eps * u[1], eps * u[2]];
        let dn = [-eps * u[0], -eps * u[1], -eps * u[2]];
        (f(&x.exp_map(&up)) - f(&x.exp_map(&dn))) / (2.0 * eps)
    }

    fn random_unit_tangent<R: Rng>(rng: &mut R) -> TangentVector {
        loop {
            let v: TangentVector = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-3 {
                return [v[0] / n, v[1] / n, v[2] / n];
            }
        }
    }

    #[test]
    fn subgrad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut checked = 0;
        while checked < 100 {
            let x = sample_uniform(&mut rng);
            let y = sample_uniform(&mut rng);
            let d = geo_distance(&x, &y);
            if !(0.1..1.4).contains(&d) {
                continue;
            }
            let g = geo_distance_subgrad(&x, &y);
            let u = random_unit_tangent(&mut rng);
            let fd = fd_directional(|p| geo_distance(p, &y), &x, &u);
            let an = g[0] * u[0] + g[1] * u[1] + g[2] * u[2];
            assert!((fd - an).abs() < 1e-4, "fd {fd} vs analytic {an}");
            checked += 1;
        }
    }

    #[test]
    fn subgrad_sign_flip_invariant_and_zero_at_coincidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = sample_uniform(&mut rng);
        let y = sample_uniform(&mut rng);
        assert_eq!(geo_distance_subgrad(&x, &y), geo_distance_subgrad(&x, &y.antipode()));
        assert_eq!(geo_distance_subgrad(&x, &x), [0.0; 3]);
        assert_eq!(geo_distance_subgrad(&x, &x.antipode()), [0.0; 3]);
    }

    #[test]
    fn relpose_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut checked = 0;
        while checked < 100 {
            let qi = sample_uniform(&mut rng);
            let qj = sample_uniform(&mut rng);
            let qij = sample_uniform(&mut rng);
            let d = geo_distance(&qi.mul(&qj.conjugate()), &qij);
            if !(0.1..1.4).contains(&d) {
                continue;
            }
            let (gi, gj) = relpose_grads(&qi, &qj, &qij);
            let u = random_unit_tangent(&mut rng);
            let fd_i = fd_directional(
                |p| geo_distance(&p.mul(&qj.conjugate()), &qij),
                &qi,
                &u,
            );
            let an_i = gi[0] * u[0] + gi[1] * u[1] + gi[2] * u[2];
            assert!((fd_i - an_i).abs() < 1e-4);
            let fd_j = fd_directional(
                |p| geo_distance(&qi.mul(&p.conjugate()), &qij),
                &qj,
                &u,
            );
            let an_j = gj[0] * u[0] + gj[1] * u[1] + gj[2] * u[2];
            assert!((fd_j - an_j).abs() < 1e-4);
            // second identity: ∇_qj = −∇_qi componentwise
            for (a, b) in gi.iter().zip(gj.iter()) {
                assert_eq!(*a, -*b);
            }
            checked += 1;
        }
    }

    #[test]
    fn relpose_grads_vanish_at_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let qi = sample_uniform(&mut rng);
        let qj = sample_uniform(&mut rng);
        let qij = qi.mul(&qj.conjugate());
        let (gi, gj) = relpose_grads(&qi, &qj, &qij);
        assert_eq!(gi, [0.0; 3]);
        assert_eq!(gj, [0.0; 3]);
    }

    #[test]
    fn sphere_exp_contract() {
        let b = vec![1.0, 0.0, 0.0];
        assert_eq!(sphere_exp(&b, &[0.0, 0.0, 0.0]), b);
        // quarter great-circle turn lands on the next axis
        let r = sphere_exp(&b, &[0.0, PI / 2.0, 0.0]);
        assert!(r[0].abs() < 1e-15 && (r[1] - 1.0).abs() < 1e-15 && r[2].abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..100 {
            let mut b: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let n = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            b.iter_mut().for_each(|v| *v /= n);
            let mut g: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let d: f64 = b.iter().zip(&g).map(|(u, v)| u * v).sum();
            g.iter_mut().zip(&b).for_each(|(gv, bv)| *gv -= d * bv);
            let out = sphere_exp(&b, &g);
            let on: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((on - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_uniform_canonical_and_mean_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        // closed form for the mean quotient distance of independent uniform
        // draws: π/4 + 1/π
        let expect = PI / 4.0 + 1.0 / PI;
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let a = sample_uniform(&mut rng);
            let b = sample_uniform(&mut rng);
            assert!(a.w() >= 0.0 && b.w() >= 0.0);
            let norm = a.dot(&a);
            assert!((norm - 1.0).abs() < 1e-9);
            acc += geo_distance(&a, &b);
        }
        assert!((acc / n as f64 - expect).abs() < 1e-2);
    }

    #[test]
    fn canonicalization_tie_breaks_at_zero_scalar() {
        let p = q(0.0, -0.6, 0.8, 0.0);
        let c = p.canonicalized();
        assert!(c.as_array()[1] > 0.0);
        let r = q(0.0, 0.0, -1.0, 0.0).canonicalized();
        assert!(r.as_array()[2] > 0.0);
        assert!(q(-0.5, 0.5, 0.5, 0.5).canonicalized().w() > 0.0);
    }

    #[test]
    fn degenerate_norm_rejected() {
        assert!(matches!(
            UnitQuaternion::new(0.0, 0.0, 0.0, 0.0),
            Err(ManifoldError::DegenerateNorm { .. })
        ));
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }
}
