//! Rigid-body transforms on SE(3) and their tangent space se(3).
//!
//! Tangent vectors are always ordered `(rho; phi)`: translational part first,
//! rotational part second. Every 6-vector and 6×6 Jacobian in the crate uses
//! this ordering.
//!
//! Perturbations are applied on the right: `retract(T, d) = T · exp(d)` and
//! `local_coordinates(A, B) = log(A⁻¹ · B)`.

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LieError {
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    BranchAmbiguity { angle: f64 },
}

/// Element of se(3): translational part `rho`, rotational part `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Twist<T: Real> {
    pub rho: Vector3<T>,
    pub phi: Vector3<T>,
}

impl<T: Real> Default for Twist<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Real> Twist<T> {
    pub fn new(rho: Vector3<T>, phi: Vector3<T>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self { rho: Vector3::zeros(), phi: Vector3::zeros() }
    }

    /// Builds a twist from a `(rho; phi)` 6-vector.
    pub fn from_vector(v: &Vector6<T>) -> Self {
        Self { rho: v.fixed_rows::<3>(0).into_owned(), phi: v.fixed_rows::<3>(3).into_owned() }
    }

    pub fn to_vector(&self) -> Vector6<T> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rho);
        v.fixed_rows_mut::<3>(3).copy_from(&self.phi);
        v
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rho: self.rho * s, phi: self.phi * s }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.phi.iter()).all(|x| x.is_finite())
    }

    pub fn norm(&self) -> T {
        self.to_vector().norm()
    }
}

/// Rigid transform stored as a rotation matrix and a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SE3Pose<T: Real> {
    rotation: Matrix3<T>,
    translation: Vector3<T>,
}

impl<T: Real> Default for SE3Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> SE3Pose<T> {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from parts, projecting the rotation onto SO(3) if it has
    /// drifted past the orthonormality tolerance.
    pub fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        let mut pose = Self { rotation, translation };
        pose.reorthonormalize_if_needed();
        pose
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// From a unit quaternion in Hamilton convention `(w, x, y, z)`.
    pub fn from_quaternion(q: &UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<T> {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        // Canonical sign: non-negative scalar part.
        if q.w < T::zero() {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Group product `a · b`.
    pub fn compose(&self, other: &Self) -> Self {
        let mut out = Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        out.reorthonormalize_if_needed();
        out
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Max-abs entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> T {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    fn reorthonormalize_if_needed(&mut self) {
        if self.orthonormality_error() > T::lit(T::ORTHO_TOL) {
            self.rotation = nearest_rotation(&self.rotation);
        }
    }

    pub fn exp(v: &Twist<T>) -> Result<Self, LieError> {
        if !v.is_finite() {
            return Err(LieError::NonFinite("exp"));
        }
        let (rotation, jl) = so3_exp_and_jacobian(&v.phi);
        Ok(Self { rotation, translation: jl * v.rho })
    }

    pub fn log(&self) -> Result<Twist<T>, LieError> {
        if !self.is_finite() {
            return Err(LieError::NonFinite("log"));
        }
        let phi = so3_log(&self.rotation)?;
        Ok(Twist { rho: so3_left_jacobian_inv(&phi) * self.translation, phi })
    }

    /// `self · exp(delta)`.
    pub fn retract(&self, delta: &Twist<T>) -> Result<Self, LieError> {
        Ok(self.compose(&Self::exp(delta)?))
    }

    /// `log(self⁻¹ · target)`: the tangent vector at `self` that reaches `target`.
    pub fn local_coordinates(&self, target: &Self) -> Result<Twist<T>, LieError> {
        self.inverse().compose(target).log()
    }

    /// Adjoint in `(rho; phi)` ordering: `[[R, t^R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<T> {
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> T {
        rotation_angle(&self.rotation)
    }

    pub fn cast<U: Real>(&self) -> SE3Pose<U> {
        SE3Pose {
            rotation: self.rotation.map(|x| U::lit(x.as_f64())),
            translation: self.translation.map(|x| U::lit(x.as_f64())),
        }
    }
}

/// Skew-symmetric matrix with `hat(a) * b == a × b`.
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Projects a near-rotation onto SO(3) (polar decomposition via SVD).
pub fn nearest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < T::zero() {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

fn rotation_angle<T: Real>(r: &Matrix3<T>) -> T {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let v = q.imag().norm();
    T::lit(2.0) * v.atan2(q.w.abs())
}

/// Coefficients `(sinθ/θ, (1−cosθ)/θ², (θ−sinθ)/θ³)` of the Rodrigues forms.
fn rodrigues_coefficients<T: Real>(theta: T) -> (T, T, T) {
    let t2 = theta * theta;
    if theta < T::lit(T::SMALL_ANGLE) {
        return (
            T::one() - t2 / T::lit(6.0),
            T::lit(0.5) - t2 / T::lit(24.0),
            T::lit(1.0 / 6.0) - t2 / T::lit(120.0),
        );
    }
    let a = theta.sin() / theta;
    let half = theta * T::lit(0.5);
    let s = half.sin() / half;
    let b = T::lit(0.5) * s * s;
    (a, b, coeff_theta_minus_sin(theta))
}

/// `(θ − sinθ)/θ³`.
fn coeff_theta_minus_sin<T: Real>(theta: T) -> T {
    let t2 = theta * theta;
    if theta < T::lit(T::SERIES_ANGLE) {
        series(t2, &[1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0])
    } else {
        (theta - theta.sin()) / (t2 * theta)
    }
}

/// `(θ² + 2cosθ − 2)/(2θ⁴)`.
fn coeff_q2<T: Real>(theta: T) -> T {
    let t2 = theta * theta;
    if theta < T::lit(T::SERIES_ANGLE) {
        series(t2, &[1.0 / 24.0, -1.0 / 720.0, 1.0 / 40320.0, -1.0 / 3628800.0])
    } else {
        let s = (theta * T::lit(0.5)).sin();
        (t2 - T::lit(4.0) * s * s) / (T::lit(2.0) * t2 * t2)
    }
}

/// `(2θ − 3sinθ + θcosθ)/(2θ⁵)`.
fn coeff_q3<T: Real>(theta: T) -> T {
    let t2 = theta * theta;
    if theta < T::lit(T::SERIES_ANGLE) {
        series(t2, &[1.0 / 120.0, -1.0 / 2520.0, 1.0 / 120960.0, -1.0 / 9979200.0])
    } else {
        (T::lit(2.0) * theta - T::lit(3.0) * theta.sin() + theta * theta.cos())
            / (T::lit(2.0) * t2 * t2 * theta)
    }
}

/// `(1 − θ sinθ / (2(1 − cosθ))) / θ²`, the Φ² coefficient of `J_l⁻¹`.
fn coeff_left_inv<T: Real>(theta: T) -> T {
    let t2 = theta * theta;
    if theta < T::lit(T::SERIES_ANGLE) {
        series(t2, &[1.0 / 12.0, 1.0 / 720.0, 1.0 / 30240.0, 1.0 / 1209600.0])
    } else {
        let half = theta * T::lit(0.5);
        // θ sinθ / (2(1 − cosθ)) = (θ/2) cot(θ/2)
        (T::one() - half * half.cos() / half.sin()) / t2
    }
}

fn series<T: Real>(x: T, coeffs: &[f64]) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + T::lit(c))
}

fn so3_exp_and_jacobian<T: Real>(phi: &Vector3<T>) -> (Matrix3<T>, Matrix3<T>) {
    let theta = phi.norm();
    let (a, b, c) = rodrigues_coefficients(theta);
    let k = hat(phi);
    let k2 = k * k;
    let i = Matrix3::identity();
    (i + k * a + k2 * b, i + k * b + k2 * c)
}

pub fn so3_exp<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    so3_exp_and_jacobian(phi).0
}

/// Principal-branch rotation vector of `r`.
pub fn so3_log<T: Real>(r: &Matrix3<T>) -> Result<Vector3<T>, LieError> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (w, v) = if q.w < T::zero() { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    let theta = T::lit(2.0) * n.atan2(w);
    if T::pi() - theta < T::lit(T::PI_MARGIN) {
        return Err(LieError::BranchAmbiguity { angle: theta.as_f64() });
    }
    let scale = if n < T::lit(T::SMALL_ANGLE) {
        // 2 atan(n/w)/n ≈ (2/w)(1 − n²/(3w²))
        T::lit(2.0) / w * (T::one() - n * n / (T::lit(3.0) * w * w))
    } else {
        theta / n
    };
    Ok(v * scale)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    so3_exp_and_jacobian(phi).1
}

pub fn so3_left_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let k = hat(phi);
    Matrix3::identity() - k * T::lit(0.5) + k * k * coeff_left_inv(theta)
}

/// Coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q_block<T: Real>(rho: &Vector3<T>, phi: &Vector3<T>) -> Matrix3<T> {
    let theta = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let ppr = p * pr;
    let rpp = rp * p;
    r * T::lit(0.5)
        + (pr + rp + prp) * coeff_theta_minus_sin(theta)
        + (ppr + rpp - prp * T::lit(3.0)) * coeff_q2(theta)
        + (prp * p + p * prp) * coeff_q3(theta)
}

/// Left Jacobian of SE(3): `exp(ξ + δ) ≈ exp(J_l(ξ) δ) · exp(ξ)`.
pub fn se3_left_jacobian<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    let j = so3_left_jacobian(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out
}

pub fn se3_left_jacobian_inv<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    let ji = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q_block(&xi.rho, &xi.phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(ji * q * ji)));
    out
}

/// Right Jacobian: `exp(ξ + δ) ≈ exp(ξ) · exp(J_r(ξ) δ)`. This is the
/// derivative of `retract(base, ξ)` with respect to `ξ`, expressed in the
/// tangent space at the result.
pub fn se3_right_jacobian<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    se3_left_jacobian(&xi.scale(-T::one()))
}

pub fn se3_right_jacobian_inv<T: Real>(xi: &Twist<T>) -> Matrix6<T> {
    se3_left_jacobian_inv(&xi.scale(-T::one()))
}

/// Unit quaternion from Hamilton components, normalizing the input.
pub fn quaternion_from_xyzw<T: Real>(x: T, y: T, z: T, w: T) -> UnitQuaternion<T> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist<f64> {
        let rho = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64))
            .normalize();
        Twist::new(rho, axis * rng.random_range(0.0..max_angle))
    }

    fn pose_diff(a: &SE3Pose<f64>, b: &SE3Pose<f64>) -> f64 {
        (a.rotation() - b.rotation()).amax().max((a.translation() - b.translation()).amax())
    }

    #[test]
    fn zero_twist_is_identity() {
        let p = SE3Pose::exp(&Twist::<f64>::zero()).unwrap();
        assert_eq!(p, SE3Pose::identity());
    }

    #[test]
    fn pure_translation_exp() {
        let p = SE3Pose::exp(&Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros())).unwrap();
        assert_eq!(*p.rotation(), Matrix3::identity());
        assert_eq!(*p.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn quarter_turn_matches_integrated_ode() {
        // Ṫ = T·[v]ₓ integrated with RK4 at 1e-6 steps.
        let v = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0));
        let k = hat(&v.phi);
        let mut r = Matrix3::<f64>::identity();
        let h = 1e-6;
        for _ in 0..1_000_000 {
            let k1 = r * k;
            let k2 = (r + k1 * (h / 2.0)) * k;
            let k3 = (r + k2 * (h / 2.0)) * k;
            let k4 = (r + k3 * h) * k;
            r += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let p = SE3Pose::exp(&v).unwrap();
        assert!((p.rotation() - r).amax() < 1e-9);
        assert!(p.translation().norm() == 0.0);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation() - expected).amax() < 1e-12);
        let back = p.log().unwrap();
        assert!((back.phi - Vector3::new(0.0, 0.0, PI / 2.0)).norm() < 1e-12);
        assert!(back.rho.norm() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        let v = Twist::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert_eq!(SE3Pose::exp(&v), Err(LieError::NonFinite("exp")));
    }

    #[test]
    fn log_near_pi_is_ambiguous() {
        let p = SE3Pose::exp(&Twist::new(Vector3::zeros(), Vector3::new(PI - 1e-7, 0.0, 0.0))).unwrap();
        assert!(matches!(p.log(), Err(LieError::BranchAmbiguity { .. })));
        let ok = SE3Pose::exp(&Twist::new(Vector3::zeros(), Vector3::new(PI - 1e-3, 0.0, 0.0))).unwrap();
        assert!(ok.log().is_ok());
    }

    #[test]
    fn identity_log_is_zero() {
        assert_eq!(SE3Pose::<f64>::identity().log().unwrap(), Twist::zero());
    }

    #[test]
    fn exp_log_round_trip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = random_twist(&mut rng, 3.0);
            let back = SE3Pose::exp(&v).unwrap().log().unwrap();
            assert!((back.to_vector() - v.to_vector()).amax() < 1e-10, "{v:?} -> {back:?}");
        }
    }

    #[test]
    fn round_trip_close_to_pi() {
        let v = Twist::new(Vector3::new(0.3, -0.2, 1.0), Vector3::new(1.0, 2.0, -0.5).normalize() * (PI - 1.001e-3));
        let back = SE3Pose::exp(&v).unwrap().log().unwrap();
        assert!((back.to_vector() - v.to_vector()).amax() < 1e-10);
    }

    #[test]
    fn small_angle_branch_boundary_is_continuous() {
        for &theta in &[0.0, 1e-12, 0.99e-8, 1e-8, 1.01e-8, 1e-6, 0.199, 0.2, 0.201] {
            let v = Twist::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, -1.0, 0.5).normalize() * theta);
            let p = SE3Pose::exp(&v).unwrap();
            // closed forms in extended precision are not available; compare to a
            // high-order Taylor series of exp([v]) on the 4×4 matrix.
            let mut m = nalgebra::Matrix4::<f64>::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&v.phi));
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v.rho);
            let mut term = nalgebra::Matrix4::<f64>::identity();
            let mut sum = term;
            for k in 1..30 {
                term = term * m / k as f64;
                sum += term;
            }
            assert!((p.rotation() - sum.fixed_view::<3, 3>(0, 0)).amax() < 1e-15);
            assert!((p.translation() - sum.fixed_view::<3, 1>(0, 3)).amax() < 1e-15);
            let back = p.log().unwrap();
            assert!((back.to_vector() - v.to_vector()).amax() < 1e-14);
        }
    }

    #[test]
    fn series_and_closed_forms_agree_at_cutover() {
        let t = 0.2f64;
        let closed = [
            (t - t.sin()) / t.powi(3),
            (t * t + 2.0 * t.cos() - 2.0) / (2.0 * t.powi(4)),
            (2.0 * t - 3.0 * t.sin() + t * t.cos()) / (2.0 * t.powi(5)),
            (1.0 - t * t.sin() / (2.0 * (1.0 - t.cos()))) / (t * t),
        ];
        let s = 0.2 - 1e-12;
        let ser = [coeff_theta_minus_sin(s), coeff_q2(s), coeff_q3(s), coeff_left_inv(s)];
        for (c, s) in closed.iter().zip(ser) {
            assert!(((c - s) / c).abs() < 1e-9, "{c} vs {s}");
        }
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            assert!(pose_diff(&p.compose(&SE3Pose::identity()), &p) < 1e-15);
            assert!(pose_diff(&p.compose(&p.inverse()), &SE3Pose::identity()) < 1e-12);
            assert!(pose_diff(&p.inverse().inverse(), &p) < 1e-12);
        }
    }

    #[test]
    fn translations_add() {
        let a = SE3Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let b = SE3Pose::from_translation(Vector3::new(-4.0, 0.5, 1.0));
        assert_eq!(*a.compose(&b).translation(), Vector3::new(-3.0, 2.5, 4.0));
    }

    #[test]
    fn associativity_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            let b = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            let c = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            assert!(pose_diff(&a.compose(&b).compose(&c), &a.compose(&b.compose(&c))) < 1e-12);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = SE3Pose::<f64>::identity();
        for _ in 0..10_000 {
            p = p.compose(&SE3Pose::exp(&random_twist(&mut rng, 0.3)).unwrap());
        }
        assert!(p.orthonormality_error() < 1e-9);
        assert!((p.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn drifted_rotation_is_reprojected() {
        let r = so3_exp(&Vector3::new(0.1, 0.2, 0.3)) * 1.0001;
        let p = SE3Pose::from_parts(r, Vector3::zeros());
        assert!(p.orthonormality_error() < 1e-12);
    }

    #[test]
    fn retract_and_local_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let id = SE3Pose::identity();
        for _ in 0..1000 {
            let base = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            let d = random_twist(&mut rng, 3.0);
            let back = base.local_coordinates(&base.retract(&d).unwrap()).unwrap();
            assert!((back.to_vector() - d.to_vector()).amax() < 1e-10);

            let target = SE3Pose::exp(&random_twist(&mut rng, 1.5)).unwrap();
            if let Ok(lc) = base.local_coordinates(&target) {
                assert!(pose_diff(&base.retract(&lc).unwrap(), &target) < 1e-10);
            }
            assert!(pose_diff(&id.retract(&d).unwrap(), &SE3Pose::exp(&d).unwrap()) < 1e-15);
        }
        let p = SE3Pose::exp(&Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0))).unwrap();
        assert!(p.local_coordinates(&p).unwrap().norm() < 1e-15);
    }

    #[test]
    fn retract_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..1000 {
            let base = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            let d = random_twist(&mut rng, 2.5);
            let at = base.retract(&d).unwrap();
            let analytic = se3_right_jacobian(&d);
            let mut numeric = Matrix6::zeros();
            for i in 0..6 {
                let mut e = Vector6::zeros();
                e[i] = h;
                let plus = base.retract(&Twist::from_vector(&(d.to_vector() + e))).unwrap();
                let minus = base.retract(&Twist::from_vector(&(d.to_vector() - e))).unwrap();
                let col = (at.local_coordinates(&plus).unwrap().to_vector()
                    - at.local_coordinates(&minus).unwrap().to_vector())
                    / (2.0 * h);
                numeric.set_column(i, &col);
            }
            let rel = (analytic - numeric).norm() / analytic.norm();
            assert!(rel < 1e-5, "rel err {rel}");
        }
    }

    #[test]
    fn jacobian_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..200 {
            let v = random_twist(&mut rng, 3.0);
            let prod = se3_left_jacobian(&v) * se3_left_jacobian_inv(&v);
            assert!((prod - Matrix6::identity()).amax() < 1e-10);
            let prod = se3_right_jacobian(&v) * se3_right_jacobian_inv(&v);
            assert!((prod - Matrix6::identity()).amax() < 1e-10);
        }
    }

    #[test]
    fn adjoint_moves_perturbations_across() {
        // T · exp(d) = exp(Ad(T) d) · T
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let t = SE3Pose::exp(&random_twist(&mut rng, 3.0)).unwrap();
            let d = random_twist(&mut rng, 0.5);
            let lhs = t.retract(&d).unwrap();
            let rhs = SE3Pose::exp(&Twist::from_vector(&(t.adjoint() * d.to_vector()))).unwrap().compose(&t);
            assert!(pose_diff(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let p = SE3Pose::exp(&Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.3, -0.4, 2.0))).unwrap();
        let q = p.quaternion();
        assert!(q.w >= 0.0);
        let back = SE3Pose::from_quaternion(&q, *p.translation());
        assert!(pose_diff(&p, &back) < 1e-14);
    }

    #[test]
    fn single_precision_round_trip() {
        let v = Twist::<f32>::new(Vector3::new(0.5, -1.0, 0.25), Vector3::new(0.3, 0.2, -0.9));
        let back = SE3Pose::exp(&v).unwrap().log().unwrap();
        assert!((back.to_vector() - v.to_vector()).amax() < 1e-5);
        let tiny = Twist::<f32>::new(Vector3::new(0.5, -1.0, 0.25), Vector3::new(1e-5, 0.0, 0.0));
        let back = SE3Pose::exp(&tiny).unwrap().log().unwrap();
        assert!((back.to_vector() - tiny.to_vector()).amax() < 1e-6);
    }
}
