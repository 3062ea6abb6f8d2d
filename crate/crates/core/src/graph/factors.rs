//! Factor types. Every factor exposes an error `e(X)` whose cost is
//! `½ eᵀ W e`, and its Jacobian `∂e/∂X` in the right-perturbation tangent
//! spaces of the variables it touches.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix6, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use smallvec::{smallvec, SmallVec};

use super::{GraphError, Values, VariableIndex};
use crate::camera::{CameraError, CameraIntrinsics, Landmark};
use crate::event::EventObservation;
use crate::gp::{gp_prior_linearize, interpolate_pair, interpolate_pair_with_jacobians, ControlState, InterpolationOperators, Matrix12, WnoaPrior};
use crate::lie::{hat, se3_right_jacobian_inv, SE3Pose, Twist};
use crate::scalar::Real;

/// Default pixel noise standard deviation.
pub const DEFAULT_PIXEL_SIGMA: f64 = 0.5;

/// Result of linearizing one factor. `None` error means the factor is
/// inactive at these values.
#[derive(Debug, Clone)]
pub struct FactorLinearization<T: Real> {
    pub error: DVector<T>,
    /// `rows × Σ dim(var)` with columns in [`Factor::variables`] order.
    pub jacobian: DMatrix<T>,
}

/// Pixel observation of one landmark at one event time, with the camera pose
/// interpolated between the two bracketing knots.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ReprojectionFactor<T: Real> {
    pub event: EventObservation<T>,
    pub landmark: usize,
    pub left_state: usize,
    pub right_state: usize,
    pub pixel_noise: Matrix2<T>,
    information: Matrix2<T>,
    ops: InterpolationOperators<T>,
}

/// Prediction and the Jacobians of the prediction `h` (not of `z − h`).
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionLinearization<T: Real> {
    /// `z − h(X)`.
    pub residual: Vector2<T>,
    pub d_left: SMatrix<T, 2, 12>,
    pub d_right: SMatrix<T, 2, 12>,
    pub d_landmark: nalgebra::Matrix2x3<T>,
}

impl<T: Real> ReprojectionFactor<T> {
    /// `s_l` and `s_r` are the bracketing knot times; the operators are
    /// computed once here.
    pub fn new(
        event: EventObservation<T>,
        landmark: usize,
        left_state: usize,
        right_state: usize,
        s_l: T,
        s_r: T,
        prior: &WnoaPrior<T>,
        pixel_noise: Matrix2<T>,
    ) -> Result<Self, GraphError> {
        if !(s_l <= event.timestamp && event.timestamp <= s_r) || left_state >= right_state {
            return Err(GraphError::InvalidFactor(format!(
                "event at {} not bracketed by [{s_l}, {s_r}]",
                event.timestamp
            )));
        }
        let information = pixel_noise
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| GraphError::InvalidFactor("pixel noise not SPD".into()))?;
        let ops = InterpolationOperators::new(prior, s_l, event.timestamp, s_r)?;
        Ok(Self { event, landmark, left_state, right_state, pixel_noise, information, ops })
    }

    pub fn isotropic_noise(sigma: T) -> Matrix2<T> {
        Matrix2::identity() * (sigma * sigma)
    }

    fn interpolated<'v>(&self, values: &'v Values<T>) -> Result<(ControlState<T>, &'v Landmark<T>), GraphError> {
        let (l, r) = (values.state(self.left_state)?, values.state(self.right_state)?);
        let x = interpolate_pair(l, r, self.event.timestamp, &self.ops)?;
        Ok((x, values.landmark(self.landmark)?))
    }

    /// Camera-frame point and predicted pixel from a camera-to-world pose.
    fn predict(pose_wc: &SE3Pose<T>, lm: &Landmark<T>, k: &CameraIntrinsics<T>) -> Result<(Vector3<T>, Vector2<T>), CameraError> {
        let pc = pose_wc.rotation().transpose() * (lm.position - pose_wc.translation());
        Ok((pc, k.project_camera_point(&pc)?))
    }

    /// `z − h(X)`, or the camera error when the point is behind the camera.
    pub fn residual(&self, values: &Values<T>, k: &CameraIntrinsics<T>) -> Result<Result<Vector2<T>, CameraError>, GraphError> {
        let (x, lm) = self.interpolated(values)?;
        Ok(Self::predict(&x.pose, lm, k).map(|(_, h)| self.event.pixel - h))
    }

    pub fn linearize(
        &self,
        values: &Values<T>,
        k: &CameraIntrinsics<T>,
    ) -> Result<Result<ReprojectionLinearization<T>, CameraError>, GraphError> {
        Ok(self.linearize_inner(values, k)?.map(|(lin, _)| lin))
    }

    #[allow(clippy::type_complexity)]
    fn linearize_inner(
        &self,
        values: &Values<T>,
        k: &CameraIntrinsics<T>,
    ) -> Result<Result<(ReprojectionLinearization<T>, SE3Pose<T>), CameraError>, GraphError> {
        let (l, r) = (values.state(self.left_state)?, values.state(self.right_state)?);
        let lm = values.landmark(self.landmark)?;
        let (x, jac) = interpolate_pair_with_jacobians(l, r, self.event.timestamp, &self.ops)?;
        let (pc, h) = match Self::predict(&x.pose, lm, k) {
            Ok(v) => v,
            Err(e) => return Ok(Err(e)),
        };
        let d_pix = k.projection_jacobian(&pc);
        // p_c under T_wc·exp(δ): p_c − δρ + [p_c]ₓ δφ
        let mut d_pc_d_pose = SMatrix::<T, 3, 6>::zeros();
        d_pc_d_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
        d_pc_d_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&pc));
        let d_pose = d_pix * d_pc_d_pose;
        let lin = ReprojectionLinearization {
            residual: self.event.pixel - h,
            d_left: d_pose * jac.wrt_left.fixed_view::<6, 12>(0, 0),
            d_right: d_pose * jac.wrt_right.fixed_view::<6, 12>(0, 0),
            d_landmark: d_pix * x.pose.rotation().transpose(),
        };
        Ok(Ok((lin, x.pose)))
    }

    pub fn information(&self) -> &Matrix2<T> {
        &self.information
    }

    pub(crate) fn interpolate_pose(&self, values: &Values<T>) -> Result<SE3Pose<T>, GraphError> {
        Ok(self.interpolated(values)?.0.pose)
    }

    /// Error `h − z` at a known interpolated pose.
    pub(crate) fn error_at_pose(&self, pose_wc: &SE3Pose<T>, lm: &Landmark<T>, k: &CameraIntrinsics<T>) -> Option<DVector<T>> {
        let (_, h) = Self::predict(pose_wc, lm, k).ok()?;
        Some(DVector::from_column_slice((h - self.event.pixel).as_slice()))
    }

    /// Error and landmark Jacobian at a known interpolated pose.
    pub(crate) fn landmark_jacobian_at_pose(
        &self,
        pose_wc: &SE3Pose<T>,
        lm: &Landmark<T>,
        k: &CameraIntrinsics<T>,
    ) -> Option<(DVector<T>, nalgebra::Matrix2x3<T>)> {
        let (pc, h) = Self::predict(pose_wc, lm, k).ok()?;
        let d_lm = k.projection_jacobian(&pc) * pose_wc.rotation().transpose();
        Some((DVector::from_column_slice((h - self.event.pixel).as_slice()), d_lm))
    }

    /// Full linearization as a [`FactorLinearization`], with the interpolated pose.
    pub(crate) fn linearize_with_pose(
        &self,
        values: &Values<T>,
        k: &CameraIntrinsics<T>,
    ) -> Result<Option<(FactorLinearization<T>, SE3Pose<T>)>, GraphError> {
        let Ok((lin, pose)) = self.linearize_inner(values, k)? else { return Ok(None) };
        let mut jacobian = DMatrix::zeros(2, 27);
        jacobian.view_mut((0, 0), (2, 12)).copy_from(&lin.d_left);
        jacobian.view_mut((0, 12), (2, 12)).copy_from(&lin.d_right);
        jacobian.view_mut((0, 24), (2, 3)).copy_from(&lin.d_landmark);
        let error = DVector::from_column_slice((-lin.residual).as_slice());
        Ok(Some((FactorLinearization { error, jacobian }, pose)))
    }
}

/// Motion prior between consecutive knots.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GpPriorFactor<T: Real> {
    pub left_state: usize,
    pub right_state: usize,
    pub information: Matrix12<T>,
}

impl<T: Real> GpPriorFactor<T> {
    pub fn new(left_state: usize, right_state: usize, dt: T, prior: &WnoaPrior<T>) -> Result<Self, GraphError> {
        if right_state != left_state + 1 {
            return Err(GraphError::InvalidFactor(format!(
                "motion prior must link consecutive states, got {left_state} and {right_state}"
            )));
        }
        Ok(Self { left_state, right_state, information: prior.information(dt)? })
    }
}

/// Priors that pin the gauge (and a few auxiliary soft constraints).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum GaugePriorFactor<T: Real> {
    /// `e = log(mean⁻¹ T)` on a state's pose.
    Pose { target: usize, mean: SE3Pose<T>, information: Matrix6<T> },
    /// `e = ‖t − anchor‖ − distance` on a state's translation.
    Scale { target: usize, anchor: Vector3<T>, distance: T, information: T },
    /// `e = ϖ − mean` on a state's body velocity.
    Velocity { target: usize, mean: Twist<T>, information: Matrix6<T> },
    /// `e = ℓ − mean` on a landmark.
    Point { target: usize, mean: Vector3<T>, information: Matrix3<T> },
}

impl<T: Real> GaugePriorFactor<T> {
    pub fn target(&self) -> VariableIndex {
        match self {
            Self::Pose { target, .. } | Self::Scale { target, .. } | Self::Velocity { target, .. } => VariableIndex::state(*target),
            Self::Point { target, .. } => VariableIndex::landmark(*target),
        }
    }

    fn error(&self, values: &Values<T>) -> Result<DVector<T>, GraphError> {
        Ok(match self {
            Self::Pose { target, mean, .. } => {
                let e = mean.local_coordinates(&values.state(*target)?.pose)?;
                DVector::from_column_slice(e.to_vector().as_slice())
            }
            Self::Scale { target, anchor, distance, .. } => {
                let t = values.state(*target)?.pose.translation();
                DVector::from_element(1, (t - anchor).norm() - *distance)
            }
            Self::Velocity { target, mean, .. } => {
                let v = values.state(*target)?.velocity.to_vector() - mean.to_vector();
                DVector::from_column_slice(v.as_slice())
            }
            Self::Point { target, mean, .. } => {
                DVector::from_column_slice((values.landmark(*target)?.position - mean).as_slice())
            }
        })
    }

    fn linearize(&self, values: &Values<T>) -> Result<FactorLinearization<T>, GraphError> {
        let error = self.error(values)?;
        let jacobian = match self {
            Self::Pose { .. } => {
                let e = Twist::from_vector(&nalgebra::Vector6::from_column_slice(error.as_slice()));
                let mut j = DMatrix::zeros(6, 12);
                j.view_mut((0, 0), (6, 6)).copy_from(&se3_right_jacobian_inv(&e));
                j
            }
            Self::Scale { target, anchor, .. } => {
                let pose = &values.state(*target)?.pose;
                let d = pose.translation() - anchor;
                let n = d.norm();
                let mut j = DMatrix::zeros(1, 12);
                if n > T::zero() {
                    // t(T·exp(δ)) ≈ t + R δρ
                    let row = (d / n).transpose() * pose.rotation();
                    j.view_mut((0, 0), (1, 3)).copy_from(&row);
                }
                j
            }
            Self::Velocity { .. } => {
                let mut j = DMatrix::zeros(6, 12);
                j.view_mut((0, 6), (6, 6)).fill_with_identity();
                j
            }
            Self::Point { .. } => DMatrix::identity(3, 3),
        };
        Ok(FactorLinearization { error, jacobian })
    }

    fn information(&self) -> DMatrix<T> {
        match self {
            Self::Pose { information, .. } | Self::Velocity { information, .. } => {
                DMatrix::from_column_slice(6, 6, information.as_slice())
            }
            Self::Scale { information, .. } => DMatrix::from_element(1, 1, *information),
            Self::Point { information, .. } => DMatrix::from_column_slice(3, 3, information.as_slice()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub enum Factor<T: Real> {
    Reprojection(ReprojectionFactor<T>),
    GpPrior(GpPriorFactor<T>),
    Gauge(GaugePriorFactor<T>),
}

impl<T: Real> Factor<T> {
    pub fn variables(&self) -> SmallVec<[VariableIndex; 3]> {
        match self {
            Self::Reprojection(f) => smallvec![
                VariableIndex::state(f.left_state),
                VariableIndex::state(f.right_state),
                VariableIndex::landmark(f.landmark),
            ],
            Self::GpPrior(f) => smallvec![VariableIndex::state(f.left_state), VariableIndex::state(f.right_state)],
            Self::Gauge(g) => smallvec![g.target()],
        }
    }

    /// `½ eᵀWe` for an error returned by [`Factor::error`].
    pub fn cost_of(&self, e: &DVector<T>) -> T {
        let half = T::lit(0.5);
        match self {
            Self::Reprojection(f) => {
                let e = Vector2::new(e[0], e[1]);
                e.dot(&(f.information * e)) * half
            }
            Self::GpPrior(f) => {
                let e = crate::gp::Vector12::from_column_slice(e.as_slice());
                e.dot(&(f.information * e)) * half
            }
            Self::Gauge(g) => e.dot(&(g.information() * e)) * half,
        }
    }

    pub fn information(&self) -> DMatrix<T> {
        match self {
            Self::Reprojection(f) => DMatrix::from_column_slice(2, 2, f.information.as_slice()),
            Self::GpPrior(f) => DMatrix::from_column_slice(12, 12, f.information.as_slice()),
            Self::Gauge(g) => g.information(),
        }
    }

    /// Error `e` with cost `½ eᵀWe`; `None` when inactive at these values.
    pub fn error(&self, values: &Values<T>, k: &CameraIntrinsics<T>) -> Result<Option<DVector<T>>, GraphError> {
        match self {
            Self::Reprojection(f) => Ok(f.residual(values, k)?.ok().map(|r| DVector::from_column_slice((-r).as_slice()))),
            Self::GpPrior(f) => {
                let (xi, xj) = (values.state(f.left_state)?, values.state(f.right_state)?);
                let (e, _, _) = gp_prior_linearize(xi, xj)?;
                Ok(Some(DVector::from_column_slice(e.as_slice())))
            }
            Self::Gauge(g) => Ok(Some(g.error(values)?)),
        }
    }

    pub fn linearize(&self, values: &Values<T>, k: &CameraIntrinsics<T>) -> Result<Option<FactorLinearization<T>>, GraphError> {
        match self {
            Self::Reprojection(f) => Ok(f.linearize_with_pose(values, k)?.map(|(lin, _)| lin)),
            Self::GpPrior(f) => {
                let (xi, xj) = (values.state(f.left_state)?, values.state(f.right_state)?);
                let (e, d_i, d_j) = gp_prior_linearize(xi, xj)?;
                let mut jacobian = DMatrix::zeros(12, 24);
                jacobian.view_mut((0, 0), (12, 12)).copy_from(&d_i);
                jacobian.view_mut((0, 12), (12, 12)).copy_from(&d_j);
                Ok(Some(FactorLinearization { error: DVector::from_column_slice(e.as_slice()), jacobian }))
            }
            Self::Gauge(g) => Ok(Some(g.linearize(values)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Polarity;
    use crate::gp::Vector12;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, t: f64) -> ControlState<f64> {
        let tw = Twist::from_vector(&Vector6::from_fn(|i, _| rng.random_range(-0.2..0.2) * if i < 3 { 1.0 } else { 0.5 }));
        let v = Twist::from_vector(&Vector6::from_fn(|_, _| rng.random_range(-0.5..0.5)));
        ControlState::new(t, SE3Pose::exp(&tw).unwrap(), v)
    }

    fn scene(rng: &mut ChaCha8Rng) -> (Values<f64>, ReprojectionFactor<f64>) {
        let states = vec![random_state(rng, 0.0), random_state(rng, 0.1)];
        let landmarks = vec![Landmark::new(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..7.0)))];
        let values = Values { states, landmarks };
        let t = rng.random_range(0.0..0.1);
        let ev = EventObservation::new(t, Vector2::new(300.0, 200.0), Polarity::Positive, Some(0));
        let prior = WnoaPrior::isotropic(1.0).unwrap();
        let f = ReprojectionFactor::new(ev, 0, 0, 1, 0.0, 0.1, &prior, ReprojectionFactor::isotropic_noise(0.5)).unwrap();
        (values, f)
    }

    fn perturb(values: &Values<f64>, var: VariableIndex, k: usize, h: f64) -> Values<f64> {
        let mut v = values.clone();
        match var {
            VariableIndex { kind: super::super::VariableKind::ControlState, ordinal } => {
                let mut d = Vector12::zeros();
                d[k] = h;
                v.states[ordinal] = v.states[ordinal].retract(&d).unwrap();
            }
            VariableIndex { ordinal, .. } => v.landmarks[ordinal].position[k] += h,
        }
        v
    }

    #[test]
    fn exact_event_has_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (values, mut f) = scene(&mut rng);
        let k = intrinsics();
        let x = interpolate_pair(&values.states[0], &values.states[1], f.event.timestamp, &f.ops).unwrap();
        let pc = x.pose.inverse().transform_point(&values.landmarks[0].position);
        f.event.pixel = k.project_camera_point(&pc).unwrap();
        let r = f.residual(&values, &k).unwrap().unwrap();
        assert!(r.norm() < 1e-10);
    }

    #[test]
    fn reprojection_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = intrinsics();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..300 {
            let (values, f) = scene(&mut rng);
            let lin = f.linearize(&values, &k).unwrap().unwrap();
            let pred = |v: &Values<f64>| f.event.pixel - f.residual(v, &k).unwrap().unwrap();
            for (var, block, cols) in [
                (VariableIndex::state(0), DMatrix::from_column_slice(2, 12, lin.d_left.as_slice()), 12),
                (VariableIndex::state(1), DMatrix::from_column_slice(2, 12, lin.d_right.as_slice()), 12),
                (VariableIndex::landmark(0), DMatrix::from_column_slice(2, 3, lin.d_landmark.as_slice()), 3),
            ] {
                let mut fd = DMatrix::zeros(2, cols);
                for c in 0..cols {
                    let d = (pred(&perturb(&values, var, c, h)) - pred(&perturb(&values, var, c, -h))) / (2.0 * h);
                    fd.column_mut(c).copy_from(&d);
                }
                let rel = (&fd - &block).norm() / block.norm().max(1e-3);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn event_at_left_knot_ignores_right_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (values, f) = scene(&mut rng);
        let prior = WnoaPrior::isotropic(1.0).unwrap();
        let mut ev = f.event;
        ev.timestamp = 0.0;
        let f = ReprojectionFactor::new(ev, 0, 0, 1, 0.0, 0.1, &prior, ReprojectionFactor::isotropic_noise(0.5)).unwrap();
        let lin = f.linearize(&values, &intrinsics()).unwrap().unwrap();
        assert!(lin.d_right.norm() < 1e-9 * lin.d_left.norm());
    }

    #[test]
    fn behind_camera_is_inactive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut values, f) = scene(&mut rng);
        values.landmarks[0].position.z = -5.0;
        let factor = Factor::Reprojection(f);
        assert!(factor.error(&values, &intrinsics()).unwrap().is_none());
        assert!(factor.linearize(&values, &intrinsics()).unwrap().is_none());
    }

    #[test]
    fn rejects_unbracketed_event() {
        let prior = WnoaPrior::isotropic(1.0).unwrap();
        let ev = EventObservation::new(0.2, Vector2::new(1.0, 1.0), Polarity::Negative, None);
        assert!(ReprojectionFactor::new(ev, 0, 0, 1, 0.0, 0.1, &prior, Matrix2::identity()).is_err());
        let ev = EventObservation::new(0.05, Vector2::new(1.0, 1.0), Polarity::Negative, None);
        assert!(ReprojectionFactor::new(ev, 0, 0, 1, 0.0, 0.1, &prior, Matrix2::zeros()).is_err());
    }

    #[test]
    fn gauge_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = intrinsics();
        for _ in 0..50 {
            let values = Values { states: vec![random_state(&mut rng, 0.0)], landmarks: vec![Landmark::new(Vector3::new(1.0, 2.0, 3.0))] };
            let mean = SE3Pose::exp(&Twist::new(Vector3::new(0.1, 0.0, -0.1), Vector3::new(0.05, 0.1, 0.0))).unwrap();
            let factors = [
                GaugePriorFactor::Pose { target: 0, mean, information: Matrix6::identity() },
                GaugePriorFactor::Scale { target: 0, anchor: Vector3::new(0.5, -0.3, 0.2), distance: 1.0, information: 1.0 },
                GaugePriorFactor::Velocity { target: 0, mean: Twist::zero(), information: Matrix6::identity() },
                GaugePriorFactor::Point { target: 0, mean: Vector3::zeros(), information: Matrix3::identity() },
            ];
            for g in factors {
                let var = g.target();
                let f = Factor::Gauge(g);
                let lin = f.linearize(&values, &k).unwrap().unwrap();
                let h = 1e-6;
                for c in 0..var.dim() {
                    let ep = f.error(&perturb(&values, var, c, h), &k).unwrap().unwrap();
                    let em = f.error(&perturb(&values, var, c, -h), &k).unwrap().unwrap();
                    let fd = (ep - em) / (2.0 * h);
                    assert!((fd - lin.jacobian.column(c)).norm() < 1e-6);
                }
            }
        }
    }
}
