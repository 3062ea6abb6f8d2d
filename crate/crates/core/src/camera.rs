//! Pinhole measurement model, its Jacobians and ray triangulation.
//!
//! Poses passed to this module are world-to-camera (`p_c = R p_w + t`).
//! Pose Jacobians are with respect to a right perturbation `T · exp(δ)`.

use nalgebra::{Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{hat, SE3Pose};
use crate::scalar::Real;

/// Points closer than this to the image plane are treated as behind the camera.
pub const DEPTH_MIN: f64 = 1e-3;
/// Minimum camera baseline accepted by [`triangulate`].
pub const MIN_BASELINE: f64 = 1e-6;
/// Minimum angle between rays accepted by [`triangulate`], in degrees.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.1;

pub type Matrix2x6<T> = SMatrix<T, 2, 6>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CameraError {
    #[error("point behind camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("rays nearly parallel ({angle_deg} deg)")]
    LowParallax { angle_deg: f64 },
    #[error("triangulated point behind a camera")]
    Cheirality,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("need at least two observations, got {0}")]
    TooFewObservations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: T,
    pub height: T,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: T, height: T) -> Result<Self, CameraError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let z = T::zero();
        if !(self.fx > z && self.fy > z) {
            return Err(CameraError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= z && self.cx < self.width && self.cy >= z && self.cy < self.height) {
            return Err(CameraError::InvalidIntrinsics("principal point outside sensor".into()));
        }
        Ok(())
    }

    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero() && pixel.x < self.width && pixel.y >= T::zero() && pixel.y < self.height
    }

    /// Camera-frame ray through `pixel` with unit depth.
    pub fn backproject(&self, pixel: &Vector2<T>) -> Vector3<T> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, T::one())
    }

    /// Projects a camera-frame point.
    pub fn project_camera_point(&self, p: &Vector3<T>) -> Result<Vector2<T>, CameraError> {
        if !(p.z > T::lit(DEPTH_MIN)) {
            return Err(CameraError::BehindCamera { depth: p.z.as_f64() });
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Derivative of [`Self::project_camera_point`] at `p`.
    pub fn projection_jacobian(&self, p: &Vector3<T>) -> Matrix2x3<T> {
        let inv_z = T::one() / p.z;
        Matrix2x3::new(
            self.fx * inv_z,
            T::zero(),
            -self.fx * p.x * inv_z * inv_z,
            T::zero(),
            self.fy * inv_z,
            -self.fy * p.y * inv_z * inv_z,
        )
    }
}

/// A 3D scene point in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Landmark<T: Real> {
    pub position: Vector3<T>,
}

impl<T: Real> Landmark<T> {
    pub fn new(position: Vector3<T>) -> Self {
        Self { position }
    }
}

pub fn project<T: Real>(
    pose: &SE3Pose<T>,
    lm: &Landmark<T>,
    k: &CameraIntrinsics<T>,
) -> Result<Vector2<T>, CameraError> {
    k.project_camera_point(&pose.transform_point(&lm.position))
}

/// Projection with `(pixel, d pixel / d pose, d pixel / d landmark)`.
pub fn project_jacobians<T: Real>(
    pose: &SE3Pose<T>,
    lm: &Landmark<T>,
    k: &CameraIntrinsics<T>,
) -> Result<(Vector2<T>, Matrix2x6<T>, Matrix2x3<T>), CameraError> {
    let pc = pose.transform_point(&lm.position);
    let pixel = k.project_camera_point(&pc)?;
    let d_pix_d_pc = k.projection_jacobian(&pc);
    let r = pose.rotation();
    // p_c(T·exp(δ)) ≈ p_c + R δρ − R [p_w]ₓ δφ
    let mut d_pc_d_pose = SMatrix::<T, 3, 6>::zeros();
    d_pc_d_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    d_pc_d_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(r * hat(&lm.position))));
    Ok((pixel, d_pix_d_pc * d_pc_d_pose, d_pix_d_pc * r))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation<T: Real> {
    pub landmark: Landmark<T>,
    /// Widest angle between the first observing ray and any other, in degrees.
    pub angle_deg: T,
}

fn world_ray<T: Real>(pose: &SE3Pose<T>, pixel: &Vector2<T>, k: &CameraIntrinsics<T>) -> (Vector3<T>, Vector3<T>) {
    let rt = pose.rotation().transpose();
    let center = -(rt * pose.translation());
    (center, (rt * k.backproject(pixel)).normalize())
}

fn angle_deg<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.cross(b).norm().atan2(a.dot(b)) * T::lit(180.0) / T::pi()
}

fn check_cheirality<T: Real>(point: &Vector3<T>, poses: &[&SE3Pose<T>]) -> Result<(), CameraError> {
    if poses.iter().all(|p| p.transform_point(point).z > T::lit(DEPTH_MIN)) {
        Ok(())
    } else {
        Err(CameraError::Cheirality)
    }
}

/// Midpoint of the common perpendicular of two back-projected rays.
pub fn triangulate<T: Real>(
    pose_a: &SE3Pose<T>,
    pose_b: &SE3Pose<T>,
    z_a: &Vector2<T>,
    z_b: &Vector2<T>,
    k: &CameraIntrinsics<T>,
) -> Result<Triangulation<T>, CameraError> {
    let (ca, da) = world_ray(pose_a, z_a, k);
    let (cb, db) = world_ray(pose_b, z_b, k);
    let angle = angle_deg(&da, &db);
    if (cb - ca).norm() < T::lit(MIN_BASELINE) || angle < T::lit(MIN_RAY_ANGLE_DEG) {
        return Err(CameraError::LowParallax { angle_deg: angle.as_f64() });
    }
    // minimize |ca + s da − cb − t db|²
    let w = ca - cb;
    let b = da.dot(&db);
    let d = da.dot(&w);
    let e = db.dot(&w);
    let denom = T::one() - b * b;
    let s = (b * e - d) / denom;
    let t = (e - b * d) / denom;
    if s <= T::zero() || t <= T::zero() {
        return Err(CameraError::Cheirality);
    }
    let point = (ca + da * s + cb + db * t) * T::lit(0.5);
    check_cheirality(&point, &[pose_a, pose_b])?;
    Ok(Triangulation { landmark: Landmark::new(point), angle_deg: angle })
}

/// Least-squares intersection of `n ≥ 2` rays (the point minimizing the sum
/// of squared perpendicular distances).
pub fn triangulate_rays<T: Real>(
    observations: &[(SE3Pose<T>, Vector2<T>)],
    k: &CameraIntrinsics<T>,
) -> Result<Triangulation<T>, CameraError> {
    if observations.len() < 2 {
        return Err(CameraError::TooFewObservations(observations.len()));
    }
    let rays: Vec<_> = observations.iter().map(|(p, z)| world_ray(p, z, k)).collect();
    let mut a = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (c, d) in &rays {
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        rhs += proj * c;
    }
    // Widest ray pair: against the first ray is enough to gate parallax.
    let angle = rays.iter().skip(1).map(|(_, d)| angle_deg(&rays[0].1, d)).fold(T::zero(), |m, x| m.max(x));
    let baseline = rays.iter().map(|(c, _)| (c - rays[0].0).norm()).fold(T::zero(), |m, x| m.max(x));
    if baseline < T::lit(MIN_BASELINE) || angle < T::lit(MIN_RAY_ANGLE_DEG) {
        return Err(CameraError::LowParallax { angle_deg: angle.as_f64() });
    }
    let point = a.cholesky().ok_or(CameraError::LowParallax { angle_deg: angle.as_f64() })?.solve(&rhs);
    let poses: Vec<_> = observations.iter().map(|(p, _)| p).collect();
    check_cheirality(&point, &poses)?;
    Ok(Triangulation { landmark: Landmark::new(point), angle_deg: angle })
}
