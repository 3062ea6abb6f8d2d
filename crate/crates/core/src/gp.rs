//! White-noise-on-acceleration (WNOA) Gaussian-process prior over SE(3)
//! trajectories with Markovian state `(pose, body velocity)`.
//!
//! Between two knots the state is lifted into the tangent space at the left
//! knot, `γ(t) = (log(T_l⁻¹ T(t)), ϖ(t))`, where the prior is linear and the
//! standard constant-velocity operators apply. Every query touches exactly
//! the two knots bracketing it.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, Matrix6, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{se3_left_jacobian_inv, se3_right_jacobian, se3_right_jacobian_inv, LieError, SE3Pose, Twist};
use crate::scalar::Real;

pub type Matrix12<T> = SMatrix<T, 12, 12>;
pub type Vector12<T> = SVector<T, 12>;

/// Intervals shorter than this cannot be interpolated.
pub const MIN_INTERVAL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate interval [{left}, {right}]")]
    DegenerateInterval { left: f64, right: f64 },
    #[error("time {tau} outside trajectory span [{start}, {end}]")]
    OutOfRange { tau: f64, start: f64, end: f64 },
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Pose and body-frame velocity at a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ControlState<T: Real> {
    pub timestamp: T,
    pub pose: SE3Pose<T>,
    pub velocity: Twist<T>,
}

impl<T: Real> ControlState<T> {
    pub fn new(timestamp: T, pose: SE3Pose<T>, velocity: Twist<T>) -> Self {
        Self { timestamp, pose, velocity }
    }

    pub fn stationary(timestamp: T, pose: SE3Pose<T>) -> Self {
        Self { timestamp, pose, velocity: Twist::zero() }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.pose.is_finite() && self.velocity.is_finite()
    }

    /// Applies a 12-vector increment: pose by retraction, velocity additively.
    pub fn retract(&self, delta: &Vector12<T>) -> Result<Self, LieError> {
        let dp = Twist::from_vector(&delta.fixed_rows::<6>(0).into_owned());
        let dv = delta.fixed_rows::<6>(6).into_owned();
        Ok(Self {
            timestamp: self.timestamp,
            pose: self.pose.retract(&dp)?,
            velocity: Twist::from_vector(&(self.velocity.to_vector() + dv)),
        })
    }

    /// Inverse of [`retract`](Self::retract).
    pub fn local_coordinates(&self, other: &Self) -> Result<Vector12<T>, LieError> {
        let mut out = Vector12::zeros();
        out.fixed_rows_mut::<6>(0).copy_from(&self.pose.local_coordinates(&other.pose)?.to_vector());
        out.fixed_rows_mut::<6>(6)
            .copy_from(&(other.velocity.to_vector() - self.velocity.to_vector()));
        Ok(out)
    }
}

/// Power-spectral density `Qc` of the white-noise acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct WnoaPrior<T: Real> {
    qc: Matrix6<T>,
}

impl<T: Real> WnoaPrior<T> {
    pub fn from_diagonal(diag: [T; 6]) -> Result<Self, GpError> {
        if diag.iter().any(|d| !(d.is_finite() && *d > T::zero())) {
            return Err(GpError::NotPositiveDefinite("Qc diagonal"));
        }
        Ok(Self { qc: Matrix6::from_diagonal(&SVector::from(diag)) })
    }

    pub fn isotropic(q: T) -> Result<Self, GpError> {
        Self::from_diagonal([q; 6])
    }

    pub fn from_matrix(qc: Matrix6<T>) -> Result<Self, GpError> {
        if (qc - qc.transpose()).amax() > T::default_epsilon() * T::lit(1e3) * qc.amax() {
            return Err(GpError::NotPositiveDefinite("Qc not symmetric"));
        }
        if Cholesky::new(qc).is_none() {
            return Err(GpError::NotPositiveDefinite("Qc"));
        }
        Ok(Self { qc })
    }

    pub fn qc(&self) -> &Matrix6<T> {
        &self.qc
    }

    /// `Q(dt)`, allowing `dt = 0` (the zero matrix) for internal use.
    fn covariance_unchecked(&self, dt: T) -> Matrix12<T> {
        let dt2 = dt * dt;
        let mut q = Matrix12::zeros();
        q.fixed_view_mut::<6, 6>(0, 0).copy_from(&(self.qc * (dt2 * dt / T::lit(3.0))));
        let off = self.qc * (dt2 / T::lit(2.0));
        q.fixed_view_mut::<6, 6>(0, 6).copy_from(&off);
        q.fixed_view_mut::<6, 6>(6, 0).copy_from(&off);
        q.fixed_view_mut::<6, 6>(6, 6).copy_from(&(self.qc * dt));
        q
    }

    /// Process covariance accumulated over `dt > 0`.
    pub fn process_covariance(&self, dt: T) -> Result<Matrix12<T>, GpError> {
        if !(dt > T::zero()) {
            return Err(GpError::InvalidArgument(format!("process covariance needs dt > 0, got {dt}")));
        }
        Ok(self.covariance_unchecked(dt))
    }

    fn covariance_cholesky(&self, dt: T) -> Result<Cholesky<T, nalgebra::Const<12>>, GpError> {
        Cholesky::new(self.process_covariance(dt)?).ok_or(GpError::NotPositiveDefinite("Q(dt)"))
    }

    /// `Q(dt)⁻¹`, the information of one prior link.
    pub fn information(&self, dt: T) -> Result<Matrix12<T>, GpError> {
        Ok(self.covariance_cholesky(dt)?.inverse())
    }

    /// Interpolation operators `(Λ, Ψ)` at `tau ∈ [s_l, s_r]`.
    pub fn interpolation_operators(
        &self,
        s_l: T,
        tau: T,
        s_r: T,
    ) -> Result<(Matrix12<T>, Matrix12<T>), GpError> {
        if !(s_r - s_l >= T::lit(MIN_INTERVAL)) {
            return Err(GpError::DegenerateInterval { left: s_l.as_f64(), right: s_r.as_f64() });
        }
        if !(tau >= s_l && tau <= s_r) {
            return Err(GpError::InvalidArgument(format!("tau {tau} outside [{s_l}, {s_r}]")));
        }
        let chol = self.covariance_cholesky(s_r - s_l)?;
        let q_tau = self.covariance_unchecked(tau - s_l);
        // Ψ = Q(τ−s_l) Φ(s_r−τ)ᵀ Q(Δ)⁻¹, so Ψᵀ = Q(Δ)⁻¹ Φ(s_r−τ) Q(τ−s_l).
        let psi = chol.solve(&(transition(s_r - tau)? * q_tau)).transpose();
        let lambda = transition(tau - s_l)? - psi * transition(s_r - s_l)?;
        Ok((lambda, psi))
    }
}

/// State transition of the constant-velocity model: `[[I, dt·I], [0, I]]`.
pub fn transition<T: Real>(dt: T) -> Result<Matrix12<T>, GpError> {
    if !(dt >= T::zero()) {
        return Err(GpError::InvalidArgument(format!("transition needs dt >= 0, got {dt}")));
    }
    let mut phi = Matrix12::identity();
    phi.fixed_view_mut::<6, 6>(0, 6).copy_from(&(Matrix6::identity() * dt));
    Ok(phi)
}

/// Precomputed operators for one query time inside one knot interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct InterpolationOperators<T: Real> {
    pub lambda: Matrix12<T>,
    pub psi: Matrix12<T>,
}

impl<T: Real> InterpolationOperators<T> {
    pub fn new(prior: &WnoaPrior<T>, s_l: T, tau: T, s_r: T) -> Result<Self, GpError> {
        let (lambda, psi) = prior.interpolation_operators(s_l, tau, s_r)?;
        Ok(Self { lambda, psi })
    }
}

/// Derivatives of an interpolated state with respect to the two knots, each
/// 12×12 in the `(pose tangent; velocity)` ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationJacobians<T: Real> {
    pub wrt_left: Matrix12<T>,
    pub wrt_right: Matrix12<T>,
}

fn lift<T: Real>(left: &ControlState<T>, right: &ControlState<T>) -> Result<(Vector12<T>, Vector12<T>, Twist<T>), LieError> {
    let xi_r = left.pose.local_coordinates(&right.pose)?;
    let mut g_l = Vector12::zeros();
    g_l.fixed_rows_mut::<6>(6).copy_from(&left.velocity.to_vector());
    let mut g_r = Vector12::zeros();
    g_r.fixed_rows_mut::<6>(0).copy_from(&xi_r.to_vector());
    g_r.fixed_rows_mut::<6>(6).copy_from(&right.velocity.to_vector());
    Ok((g_l, g_r, xi_r))
}

/// Interpolates between two knots with precomputed operators.
pub fn interpolate_pair<T: Real>(
    left: &ControlState<T>,
    right: &ControlState<T>,
    tau: T,
    ops: &InterpolationOperators<T>,
) -> Result<ControlState<T>, LieError> {
    if tau == left.timestamp {
        return Ok(*left);
    }
    if tau == right.timestamp {
        return Ok(*right);
    }
    let (g_l, g_r, _) = lift(left, right)?;
    let g = ops.lambda * g_l + ops.psi * g_r;
    let xi = Twist::from_vector(&g.fixed_rows::<6>(0).into_owned());
    Ok(ControlState {
        timestamp: tau,
        pose: left.pose.retract(&xi)?,
        velocity: Twist::from_vector(&g.fixed_rows::<6>(6).into_owned()),
    })
}

/// As [`interpolate_pair`], also returning the Jacobians of the result.
pub fn interpolate_pair_with_jacobians<T: Real>(
    left: &ControlState<T>,
    right: &ControlState<T>,
    tau: T,
    ops: &InterpolationOperators<T>,
) -> Result<(ControlState<T>, InterpolationJacobians<T>), LieError> {
    let (g_l, g_r, xi_r) = lift(left, right)?;
    let g = ops.lambda * g_l + ops.psi * g_r;
    let xi = Twist::from_vector(&g.fixed_rows::<6>(0).into_owned());
    let exp_xi = SE3Pose::exp(&xi)?;
    let state = ControlState {
        timestamp: tau,
        pose: left.pose.compose(&exp_xi),
        velocity: Twist::from_vector(&g.fixed_rows::<6>(6).into_owned()),
    };

    // d γ_r / d(left pose) = [-J_l⁻¹(ξ_r); 0], d γ_r / d(right pose) = [J_r⁻¹(ξ_r); 0]
    let jl_inv = se3_left_jacobian_inv(&xi_r);
    let jr_inv = se3_right_jacobian_inv(&xi_r);
    let psi_col0 = ops.psi.fixed_view::<12, 6>(0, 0).into_owned();
    let d_g_d_left_pose = -(psi_col0 * jl_inv);
    let d_g_d_right_pose = psi_col0 * jr_inv;

    // γ → state: pose tangent at the result is J_r(ξ) dξ, plus Ad(exp(ξ))⁻¹ for
    // a perturbation of the left pose itself; velocity maps through identity.
    let jr = se3_right_jacobian(&xi);
    let mut lift_out = Matrix12::identity();
    lift_out.fixed_view_mut::<6, 6>(0, 0).copy_from(&jr);

    let mut d_g_left = Matrix12::zeros();
    d_g_left.fixed_view_mut::<12, 6>(0, 0).copy_from(&d_g_d_left_pose);
    d_g_left.fixed_view_mut::<12, 6>(0, 6).copy_from(&ops.lambda.fixed_view::<12, 6>(0, 6));
    let mut wrt_left = lift_out * d_g_left;
    let ad_inv = exp_xi.inverse().adjoint();
    let mut top = wrt_left.fixed_view_mut::<6, 6>(0, 0);
    top += ad_inv;

    let mut d_g_right = Matrix12::zeros();
    d_g_right.fixed_view_mut::<12, 6>(0, 0).copy_from(&d_g_d_right_pose);
    d_g_right.fixed_view_mut::<12, 6>(0, 6).copy_from(&ops.psi.fixed_view::<12, 6>(0, 6));
    let wrt_right = lift_out * d_g_right;

    Ok((state, InterpolationJacobians { wrt_left, wrt_right }))
}

/// Constant-velocity prediction past `last`.
pub fn extrapolate_state<T: Real>(last: &ControlState<T>, tau: T) -> Result<ControlState<T>, GpError> {
    if tau < last.timestamp || !tau.is_finite() {
        return Err(GpError::InvalidArgument(format!(
            "extrapolation time {tau} precedes last knot {}",
            last.timestamp
        )));
    }
    if tau == last.timestamp {
        return Ok(*last);
    }
    let pose = last.pose.retract(&last.velocity.scale(tau - last.timestamp))?;
    Ok(ControlState { timestamp: tau, pose, velocity: last.velocity })
}

/// Prior error between consecutive knots, expressed at `x_i`:
/// `e = γ(t_j; t_i) − Φ(t_j − t_i) γ(t_i; t_i)`, weighted by `Q(t_j − t_i)⁻¹`.
pub fn gp_prior_residual<T: Real>(
    x_i: &ControlState<T>,
    x_j: &ControlState<T>,
    prior: &WnoaPrior<T>,
) -> Result<(Vector12<T>, Matrix12<T>), GpError> {
    let dt = prior_interval(x_i, x_j)?;
    let (e, _) = prior_error(x_i, x_j, dt)?;
    Ok((e, prior.information(dt)?))
}

fn prior_interval<T: Real>(x_i: &ControlState<T>, x_j: &ControlState<T>) -> Result<T, GpError> {
    let dt = x_j.timestamp - x_i.timestamp;
    if !(dt >= T::lit(MIN_INTERVAL)) {
        return Err(GpError::InvalidArgument(format!(
            "prior link needs t_i < t_j, got {} and {}",
            x_i.timestamp, x_j.timestamp
        )));
    }
    Ok(dt)
}

fn prior_error<T: Real>(x_i: &ControlState<T>, x_j: &ControlState<T>, dt: T) -> Result<(Vector12<T>, Twist<T>), LieError> {
    let xi = x_i.pose.local_coordinates(&x_j.pose)?;
    let v_i = x_i.velocity.to_vector();
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&(xi.to_vector() - v_i * dt));
    e.fixed_rows_mut::<6>(6).copy_from(&(x_j.velocity.to_vector() - v_i));
    Ok((e, xi))
}

/// Prior error together with its Jacobians with respect to `x_i` and `x_j`.
pub fn gp_prior_linearize<T: Real>(
    x_i: &ControlState<T>,
    x_j: &ControlState<T>,
) -> Result<(Vector12<T>, Matrix12<T>, Matrix12<T>), GpError> {
    let dt = prior_interval(x_i, x_j)?;
    let (e, xi) = prior_error(x_i, x_j, dt)?;
    let mut d_i = Matrix12::zeros();
    d_i.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-se3_left_jacobian_inv(&xi)));
    d_i.fixed_view_mut::<6, 6>(0, 6).copy_from(&(Matrix6::identity() * (-dt)));
    d_i.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-Matrix6::identity()));
    let mut d_j = Matrix12::zeros();
    d_j.fixed_view_mut::<6, 6>(0, 0).copy_from(&se3_right_jacobian_inv(&xi));
    d_j.fixed_view_mut::<6, 6>(6, 6).copy_from(&Matrix6::identity());
    Ok((e, d_i, d_j))
}

/// Time-ordered knots plus the prior; answers interpolation and
/// extrapolation queries in constant time beyond the bracket search.
#[derive(Debug)]
pub struct TrajectoryGP<T: Real> {
    times: Vec<T>,
    knots: Vec<ControlState<T>>,
    prior: WnoaPrior<T>,
    knot_reads: AtomicUsize,
}

impl<T: Real> Clone for TrajectoryGP<T> {
    fn clone(&self) -> Self {
        Self {
            times: self.times.clone(),
            knots: self.knots.clone(),
            prior: self.prior,
            knot_reads: AtomicUsize::new(0),
        }
    }
}

impl<T: Real> TrajectoryGP<T> {
    pub fn new(prior: WnoaPrior<T>) -> Self {
        Self { times: Vec::new(), knots: Vec::new(), prior, knot_reads: AtomicUsize::new(0) }
    }

    pub fn from_knots(prior: WnoaPrior<T>, knots: Vec<ControlState<T>>) -> Result<Self, GpError> {
        let mut traj = Self::new(prior);
        for k in knots {
            traj.push_knot(k)?;
        }
        Ok(traj)
    }

    /// Appends a knot strictly after the current last one.
    pub fn push_knot(&mut self, knot: ControlState<T>) -> Result<(), GpError> {
        if !knot.is_finite() {
            return Err(GpError::InvalidArgument("non-finite control state".into()));
        }
        if let Some(&last) = self.times.last() {
            if !(knot.timestamp > last) {
                return Err(GpError::InvalidArgument(format!(
                    "knot time {} not after last knot {last}",
                    knot.timestamp
                )));
            }
        }
        self.times.push(knot.timestamp);
        self.knots.push(knot);
        Ok(())
    }

    pub fn prior(&self) -> &WnoaPrior<T> {
        &self.prior
    }

    pub fn knots(&self) -> &[ControlState<T>] {
        &self.knots
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn span(&self) -> Option<(T, T)> {
        Some((*self.times.first()?, *self.times.last()?))
    }

    /// Number of knot reads performed by queries since construction or the
    /// last [`reset_knot_reads`](Self::reset_knot_reads).
    pub fn knot_reads(&self) -> usize {
        self.knot_reads.load(Ordering::Relaxed)
    }

    pub fn reset_knot_reads(&self) {
        self.knot_reads.store(0, Ordering::Relaxed);
    }

    fn read_knot(&self, i: usize) -> &ControlState<T> {
        self.knot_reads.fetch_add(1, Ordering::Relaxed);
        &self.knots[i]
    }

    fn out_of_range(&self, tau: T) -> GpError {
        let (start, end) = self.span().map(|(a, b)| (a.as_f64(), b.as_f64())).unwrap_or((f64::NAN, f64::NAN));
        GpError::OutOfRange { tau: tau.as_f64(), start, end }
    }

    /// Index `l` of the interval `[s_l, s_{l+1}]` containing `tau`, or
    /// `Err(Ok(i))` when `tau` equals knot `i` exactly.
    fn locate(&self, tau: T) -> Result<Result<usize, usize>, GpError> {
        let (start, end) = self.span().ok_or_else(|| self.out_of_range(tau))?;
        if !(tau >= start && tau <= end) {
            return Err(self.out_of_range(tau));
        }
        Ok(match self.times.binary_search_by(|t| t.partial_cmp(&tau).expect("finite times")) {
            Ok(i) => Err(i),
            Err(i) => Ok(i - 1),
        })
    }

    /// Index of the left knot of the interval used for `tau`. A time equal
    /// to the last knot maps to the final interval.
    pub fn bracket(&self, tau: T) -> Result<usize, GpError> {
        if self.len() < 2 {
            return Err(self.out_of_range(tau));
        }
        Ok(match self.locate(tau)? {
            Ok(l) => l,
            Err(i) => i.min(self.len() - 2),
        })
    }

    /// Posterior mean at `tau` within the knot span.
    pub fn interpolate(&self, tau: T) -> Result<ControlState<T>, GpError> {
        match self.locate(tau)? {
            Err(i) => Ok(*self.read_knot(i)),
            Ok(l) => {
                let left = self.read_knot(l);
                let right = self.read_knot(l + 1);
                let ops = InterpolationOperators::new(&self.prior, left.timestamp, tau, right.timestamp)?;
                Ok(interpolate_pair(left, right, tau, &ops)?)
            }
        }
    }

    /// Constant-velocity prediction at `tau ≥` the last knot.
    pub fn extrapolate(&self, tau: T) -> Result<ControlState<T>, GpError> {
        let last = self.knots.len().checked_sub(1).ok_or_else(|| self.out_of_range(tau))?;
        extrapolate_state(self.read_knot(last), tau)
    }

    /// Interpolates inside the span and extrapolates (with the mean motion)
    /// on either side of it.
    pub fn sample(&self, tau: T) -> Result<ControlState<T>, GpError> {
        let (start, end) = self.span().ok_or_else(|| self.out_of_range(tau))?;
        if tau > end {
            self.extrapolate(tau)
        } else if tau < start {
            let first = self.read_knot(0);
            let pose = first.pose.retract(&first.velocity.scale(tau - start))?;
            Ok(ControlState { timestamp: tau, pose, velocity: first.velocity })
        } else {
            self.interpolate(tau)
        }
    }

    /// Prior residual and information of the link between knots `i` and `j = i + 1`.
    pub fn prior_residual(&self, i: usize, j: usize) -> Result<(Vector12<T>, Matrix12<T>), GpError> {
        if j != i + 1 || j >= self.len() {
            return Err(GpError::InvalidArgument(format!("knots {i} and {j} are not consecutive")));
        }
        gp_prior_residual(&self.knots[i], &self.knots[j], &self.prior)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_prior() -> WnoaPrior<f64> {
        WnoaPrior::isotropic(1.0).unwrap()
    }

    #[test]
    fn transition_forms() {
        assert_eq!(transition(0.0).unwrap(), Matrix12::identity());
        let p = transition(1.0).unwrap();
        assert_eq!(p.fixed_view::<6, 6>(0, 6).into_owned(), Matrix6::identity());
        assert!(transition(-1.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a: f64 = rng.random_range(0.0..3.0);
            let b: f64 = rng.random_range(0.0..3.0);
            let lhs = transition(a + b).unwrap();
            let rhs = transition(b).unwrap() * transition(a).unwrap();
            assert!((lhs - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn process_covariance_blocks() {
        let q = unit_prior().process_covariance(1.0).unwrap();
        let i = Matrix6::<f64>::identity();
        assert!((q.fixed_view::<6, 6>(0, 0) - i / 3.0).amax() < 1e-15);
        assert!((q.fixed_view::<6, 6>(0, 6) - i / 2.0).amax() < 1e-15);
        assert!((q.fixed_view::<6, 6>(6, 0) - i / 2.0).amax() < 1e-15);
        assert!((q.fixed_view::<6, 6>(6, 6) - i).amax() < 1e-15);
        for dt in [1e-6, 1.0, 1e3] {
            let q = unit_prior().process_covariance(dt).unwrap();
            assert!(Cholesky::new(q).is_some(), "dt = {dt}");
        }
        let scaled = WnoaPrior::isotropic(2.5).unwrap().process_covariance(0.7).unwrap();
        assert!((scaled - unit_prior().process_covariance(0.7).unwrap() * 2.5).amax() < 1e-14);
        assert!(unit_prior().process_covariance(0.0).is_err());
        assert!(unit_prior().process_covariance(-1.0).is_err());
    }

    #[test]
    fn information_matches_closed_form_inverse() {
        // [[12/dt³, −6/dt²], [−6/dt², 4/dt]] ⊗ Qc⁻¹
        let qc = WnoaPrior::from_diagonal([0.5, 1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let dt: f64 = 0.37;
        let info = qc.information(dt).unwrap();
        let qi = qc.qc().try_inverse().unwrap();
        let mut expected = Matrix12::zeros();
        expected.fixed_view_mut::<6, 6>(0, 0).copy_from(&(qi * (12.0 / dt.powi(3))));
        expected.fixed_view_mut::<6, 6>(0, 6).copy_from(&(qi * (-6.0 / dt.powi(2))));
        expected.fixed_view_mut::<6, 6>(6, 0).copy_from(&(qi * (-6.0 / dt.powi(2))));
        expected.fixed_view_mut::<6, 6>(6, 6).copy_from(&(qi * (4.0 / dt)));
        assert!(((info - expected).amax() / expected.amax()) < 1e-12);
    }

    #[test]
    fn invalid_qc_rejected() {
        assert!(WnoaPrior::from_diagonal([1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
        let mut m = Matrix6::<f64>::identity();
        m[(0, 0)] = -1.0;
        assert!(WnoaPrior::from_matrix(m).is_err());
    }

    #[test]
    fn operators_at_endpoints() {
        let p = unit_prior();
        let (l, s) = p.interpolation_operators(2.0, 2.0, 3.0).unwrap();
        assert!((l - Matrix12::identity()).amax() < 1e-12);
        assert!(s.amax() < 1e-12);
        let (l, s) = p.interpolation_operators(2.0, 3.0, 3.0).unwrap();
        assert!(l.amax() < 1e-12, "{}", l.amax());
        assert!((s - Matrix12::identity()).amax() < 1e-12);
    }

    #[test]
    fn operator_errors() {
        let p = unit_prior();
        assert!(matches!(p.interpolation_operators(0.0, 1.5, 1.0), Err(GpError::InvalidArgument(_))));
        assert!(matches!(p.interpolation_operators(1.0, 1.0, 1.0 + 1e-13), Err(GpError::DegenerateInterval { .. })));
    }

    /// WNOA kernel `K(t, t')` from an initial covariance at `t0`, with the
    /// process-noise integral evaluated by composite Simpson quadrature.
    fn dense_kernel(t: f64, tp: f64, t0: f64, p0: &DMatrix<f64>) -> DMatrix<f64> {
        let phi = |dt: f64| DMatrix::from_fn(2, 2, |r, c| if r == c { 1.0 } else if r == 0 && c == 1 { dt } else { 0.0 });
        let lo = t.min(tp);
        let n = 400;
        let h = (lo - t0) / n as f64;
        let mut integral = DMatrix::zeros(2, 2);
        if h > 0.0 {
            for k in 0..=n {
                let s = t0 + k as f64 * h;
                let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                let l = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
                integral += (&phi(t - s) * &l * l.transpose() * phi(tp - s).transpose()) * (w * h / 3.0);
            }
        }
        &phi(t - t0) * p0 * phi(tp - t0).transpose() + integral
    }

    #[test]
    fn operators_match_dense_regression() {
        // Scalar-channel posterior mean weights from the full kernel on three
        // timestamps; with Qc = I the 12×12 operators are these ⊗ I₆.
        let p0 = DMatrix::identity(2, 2) * 10.0;
        let (t0, s_l, tau, s_r) = (0.0, 0.0, 0.5, 1.0);
        let k_ss = {
            let mut m = DMatrix::zeros(4, 4);
            for (a, &ta) in [s_l, s_r].iter().enumerate() {
                for (b, &tb) in [s_l, s_r].iter().enumerate() {
                    m.view_mut((2 * a, 2 * b), (2, 2)).copy_from(&dense_kernel(ta, tb, t0, &p0));
                }
            }
            m
        };
        let mut k_ts = DMatrix::zeros(2, 4);
        k_ts.view_mut((0, 0), (2, 2)).copy_from(&dense_kernel(tau, s_l, t0, &p0));
        k_ts.view_mut((0, 2), (2, 2)).copy_from(&dense_kernel(tau, s_r, t0, &p0));
        let weights = k_ts * k_ss.try_inverse().unwrap();

        let (lambda, psi) = unit_prior().interpolation_operators(s_l, tau, s_r).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((lambda[(6 * r, 6 * c)] - weights[(r, c)]).abs() < 1e-9);
                assert!((psi[(6 * r, 6 * c)] - weights[(r, 2 + c)]).abs() < 1e-9);
                assert!(lambda[(6 * r + 1, 6 * c)].abs() < 1e-15);
            }
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, t: f64, angle: f64) -> ControlState<f64> {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pose = SE3Pose::exp(&Twist::new(v(), v() * angle)).unwrap();
        ControlState::new(t, pose, Twist::new(v(), v() * angle))
    }

    #[test]
    fn knots_are_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let knots: Vec<_> = (0..6).map(|i| random_state(&mut rng, 0.1 * i as f64 + 0.013, 1.0)).collect();
        let traj = TrajectoryGP::from_knots(unit_prior(), knots.clone()).unwrap();
        for k in &knots {
            assert_eq!(traj.interpolate(k.timestamp).unwrap(), *k);
        }
    }

    #[test]
    fn stationary_interpolation() {
        let pose = SE3Pose::exp(&Twist::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.1, 0.2, 0.3))).unwrap();
        let traj = TrajectoryGP::from_knots(
            unit_prior(),
            vec![ControlState::stationary(0.0, pose), ControlState::stationary(1.0, pose)],
        )
        .unwrap();
        for tau in [0.1, 0.5, 0.77] {
            let s = traj.interpolate(tau).unwrap();
            assert!((s.pose.rotation() - pose.rotation()).amax() < 1e-14);
            assert!((s.pose.translation() - pose.translation()).amax() < 1e-14);
            assert!(s.velocity.norm() < 1e-14);
        }
    }

    #[test]
    fn constant_velocity_translation_is_linear() {
        let v = Twist::new(Vector3::new(2.0, -1.0, 0.5), Vector3::zeros());
        let a = ControlState::new(1.0, SE3Pose::identity(), v);
        let b = ControlState::new(3.0, SE3Pose::from_translation(v.rho * 2.0), v);
        let traj = TrajectoryGP::from_knots(unit_prior(), vec![a, b]).unwrap();
        let mid = traj.interpolate(2.0).unwrap();
        assert!((mid.pose.translation() - v.rho).norm() < 1e-12);
        assert!((mid.velocity.to_vector() - v.to_vector()).norm() < 1e-12);
    }

    #[test]
    fn out_of_range_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let traj = TrajectoryGP::from_knots(unit_prior(), vec![random_state(&mut rng, 0.0, 0.5), random_state(&mut rng, 1.0, 0.5)]).unwrap();
        assert!(matches!(traj.interpolate(-0.1), Err(GpError::OutOfRange { .. })));
        assert!(matches!(traj.interpolate(1.1), Err(GpError::OutOfRange { .. })));
        assert!(traj.extrapolate(0.5).is_err());
    }

    #[test]
    fn knots_must_increase() {
        let mut traj = TrajectoryGP::new(unit_prior());
        traj.push_knot(ControlState::stationary(1.0, SE3Pose::identity())).unwrap();
        assert!(traj.push_knot(ControlState::stationary(1.0, SE3Pose::identity())).is_err());
        assert!(traj.push_knot(ControlState::stationary(0.5, SE3Pose::identity())).is_err());
    }

    #[test]
    fn extrapolation() {
        let v = Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros());
        let traj = TrajectoryGP::from_knots(unit_prior(), vec![ControlState::new(0.0, SE3Pose::identity(), v), ControlState::new(1.0, SE3Pose::from_translation(Vector3::x()), v)]).unwrap();
        assert_eq!(traj.extrapolate(1.0).unwrap(), traj.knots()[1]);
        let e = traj.extrapolate(3.0).unwrap();
        assert!((e.pose.translation() - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-14);
        assert_eq!(e.velocity, v);
        let still = ControlState::stationary(0.0, SE3Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)));
        let e = extrapolate_state(&still, 7.5).unwrap();
        assert_eq!(e.pose, still.pose);
    }

    #[test]
    fn extrapolate_then_interpolate_is_continuous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut traj = TrajectoryGP::from_knots(unit_prior(), vec![random_state(&mut rng, 0.0, 0.3), random_state(&mut rng, 0.4, 0.3)]).unwrap();
        let junction = 0.4;
        let next = traj.extrapolate(0.9).unwrap();
        traj.push_knot(next).unwrap();
        let eps = 1e-12;
        let left = traj.interpolate(junction - eps).unwrap();
        let right = traj.interpolate(junction + eps).unwrap();
        let d = left.local_coordinates(&right).unwrap();
        assert!(d.amax() < 1e-9, "{}", d.amax());
    }

    #[test]
    fn prior_residual_cases() {
        let p = unit_prior();
        let v = Twist::new(Vector3::new(0.3, 0.1, -0.2), Vector3::new(0.2, -0.1, 0.4));
        let a = ControlState::new(0.0, SE3Pose::identity(), v);
        let b = extrapolate_state(&a, 0.7).unwrap();
        let (e, w) = gp_prior_residual(&a, &b, &p).unwrap();
        assert!(e.amax() < 1e-14);
        assert!((w - p.information(0.7).unwrap()).amax() == 0.0);
        let s = ControlState::stationary(0.0, SE3Pose::identity());
        let (e, _) = gp_prior_residual(&s, &ControlState::stationary(1.0, SE3Pose::identity()), &p).unwrap();
        assert_eq!(e, Vector12::zeros());
        assert!(gp_prior_residual(&b, &a, &p).is_err());
        let traj = TrajectoryGP::from_knots(p, vec![a, b, extrapolate_state(&b, 1.0).unwrap()]).unwrap();
        assert!(traj.prior_residual(0, 2).is_err());
        assert!(traj.prior_residual(1, 2).is_ok());
    }

    #[test]
    fn prior_residual_is_gradient_direction_of_quadratic_form() {
        // The GN step on ½eᵀWe computed from the analytic Jacobian must agree
        // with a finite-difference gradient of the cost.
        let p = WnoaPrior::from_diagonal([0.5, 1.0, 2.0, 0.3, 0.4, 0.6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_state(&mut rng, 0.0, 0.3);
        let b = random_state(&mut rng, 0.5, 0.3);
        let cost = |x_j: &ControlState<f64>| {
            let (e, w) = gp_prior_residual(&a, x_j, &p).unwrap();
            0.5 * (e.transpose() * w * e)[(0, 0)]
        };
        let (e, _, d_j) = gp_prior_linearize(&a, &b).unwrap();
        let grad = d_j.transpose() * p.information(0.5).unwrap() * e;
        let h = 1e-6;
        for k in 0..12 {
            let mut d = Vector12::zeros();
            d[k] = h;
            let fd = (cost(&b.retract(&d).unwrap()) - cost(&b.retract(&(-d)).unwrap())) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + grad[k].abs()), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn access_counter_reads_two_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let knots: Vec<_> = (0..50).map(|i| random_state(&mut rng, i as f64 * 0.1, 0.2)).collect();
        let traj = TrajectoryGP::from_knots(unit_prior(), knots).unwrap();
        traj.reset_knot_reads();
        traj.interpolate(2.345).unwrap();
        assert_eq!(traj.knot_reads(), 2);
    }

    #[test]
    fn interpolation_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let prior = WnoaPrior::from_diagonal([0.5, 1.0, 2.0, 0.3, 0.4, 0.6]).unwrap();
        let h = 1e-6;
        for _ in 0..300 {
            let left = random_state(&mut rng, 0.2, 1.0);
            let dt = rng.random_range(0.05..1.0);
            let right = random_state(&mut rng, 0.2 + dt, 1.0);
            let tau = left.timestamp + rng.random_range(0.0..1.0) * (right.timestamp - left.timestamp);
            let ops = InterpolationOperators::new(&prior, left.timestamp, tau, right.timestamp).unwrap();
            let (at, jac) = interpolate_pair_with_jacobians(&left, &right, tau, &ops).unwrap();
            for (which, analytic) in [(0, jac.wrt_left), (1, jac.wrt_right)] {
                let mut numeric = Matrix12::zeros();
                for k in 0..12 {
                    let mut d = Vector12::zeros();
                    d[k] = h;
                    let eval = |d: &Vector12<f64>| {
                        let (l, r) = if which == 0 { (left.retract(d).unwrap(), right) } else { (left, right.retract(d).unwrap()) };
                        let s = interpolate_pair_with_jacobians(&l, &r, tau, &ops).unwrap().0;
                        at.local_coordinates(&s).unwrap()
                    };
                    numeric.set_column(k, &((eval(&d) - eval(&(-d))) / (2.0 * h)));
                }
                let rel = (analytic - numeric).norm() / analytic.norm().max(1e-12);
                assert!(rel < 1e-5, "side {which}: rel {rel}");
            }
        }
    }

    #[test]
    fn multi_knot_interpolation_matches_dense_posterior() {
        // Lift every knot into the tangent space at the query's left knot,
        // condition the full WNOA kernel on all of them, compare means.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p0 = DMatrix::identity(2, 2) * 4.0;
        for _ in 0..20 {
            let times = [0.0, 0.21, 0.5, 0.64, 1.0];
            let knots: Vec<_> = times.iter().map(|&t| random_state(&mut rng, t, 0.05)).collect();
            let traj = TrajectoryGP::from_knots(unit_prior(), knots.clone()).unwrap();
            let tau = rng.random_range(0.0..1.0);
            let l = traj.bracket(tau).unwrap();
            let base = knots[l].pose;
            let gammas: Vec<Vector12<f64>> = knots
                .iter()
                .map(|k| {
                    let mut g = Vector12::zeros();
                    g.fixed_rows_mut::<6>(0).copy_from(&base.local_coordinates(&k.pose).unwrap().to_vector());
                    g.fixed_rows_mut::<6>(6).copy_from(&k.velocity.to_vector());
                    g
                })
                .collect();
            let n = times.len();
            let mut k_ss = DMatrix::zeros(2 * n, 2 * n);
            let mut k_ts = DMatrix::zeros(2, 2 * n);
            for a in 0..n {
                for b in 0..n {
                    k_ss.view_mut((2 * a, 2 * b), (2, 2)).copy_from(&dense_kernel(times[a], times[b], 0.0, &p0));
                }
                k_ts.view_mut((0, 2 * a), (2, 2)).copy_from(&dense_kernel(tau, times[a], 0.0, &p0));
            }
            let weights = k_ts * k_ss.try_inverse().unwrap();
            let mut mean = Vector12::zeros();
            for ch in 0..6 {
                let obs = DMatrix::from_fn(2 * n, 1, |r, _| gammas[r / 2][ch + 6 * (r % 2)]);
                let m = &weights * obs;
                mean[ch] = m[(0, 0)];
                mean[ch + 6] = m[(1, 0)];
            }
            let dense_pose = base.retract(&Twist::from_vector(&mean.fixed_rows::<6>(0).into_owned())).unwrap();
            let got = traj.interpolate(tau).unwrap();
            let diff = dense_pose.local_coordinates(&got.pose).unwrap().to_vector();
            assert!(diff.amax() < 1e-6, "pose diff {}", diff.amax());
            assert!((got.velocity.to_vector() - mean.fixed_rows::<6>(6)).amax() < 1e-6);
        }
    }

    #[test]
    fn single_precision_interpolation() {
        let v = Twist::<f32>::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.5));
        let a = ControlState::new(0.0f32, SE3Pose::identity(), v);
        let b = extrapolate_state(&a, 1.0).unwrap();
        let traj = TrajectoryGP::from_knots(WnoaPrior::isotropic(1.0f32).unwrap(), vec![a, b]).unwrap();
        let mid = traj.interpolate(0.5).unwrap();
        let expected = extrapolate_state(&a, 0.5).unwrap();
        assert!((mid.pose.translation() - expected.pose.translation()).amax() < 1e-4);
    }
}
