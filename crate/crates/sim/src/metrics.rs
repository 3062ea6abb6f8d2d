//! Trajectory accuracy: ATE after rigid alignment and fixed-delta RPE.

use ctvo_core::Pose;
use nalgebra::{Matrix3, Vector3};

use crate::SimError;

pub const DEFAULT_RPE_DELTA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    Se3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryMetrics {
    pub rpe: f64,
    pub ate: f64,
    /// Maps estimate coordinates onto ground truth.
    pub alignment: Pose,
    pub matched: usize,
}

/// Closed-form rigid (no scale) fit `dst ≈ R src + t`.
pub fn umeyama_se3(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len().min(dst.len());
    if n == 0 {
        return Pose::identity();
    }
    let mu_s = src[..n].iter().sum::<Vector3<f64>>() / n as f64;
    let mu_d = dst[..n].iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    Pose::from_parts(r, mu_d - r * mu_s)
}

/// Pairs samples by timestamp (within 1 µs). Both inputs must be time-sorted.
fn pair<'a>(estimate: &'a [(f64, Pose)], truth: &'a [(f64, Pose)]) -> Vec<(f64, &'a Pose, &'a Pose)> {
    let mut out = Vec::new();
    let mut j = 0;
    for (t, g) in truth {
        while j < estimate.len() && estimate[j].0 < t - 1e-6 {
            j += 1;
        }
        if j < estimate.len() && (estimate[j].0 - t).abs() <= 1e-6 {
            out.push((*t, &estimate[j].1, g));
        }
    }
    out
}

/// The estimate must already be sampled at ground-truth timestamps.
pub fn metrics_rpe_ate(
    estimate: &[(f64, Pose)],
    ground_truth: &[(f64, Pose)],
    alignment: Alignment,
    rpe_delta: f64,
) -> Result<TrajectoryMetrics, SimError> {
    let pairs = pair(estimate, ground_truth);
    if pairs.is_empty() {
        return Err(SimError::NoOverlap);
    }
    let src: Vec<_> = pairs.iter().map(|(_, e, _)| *e.translation()).collect();
    let dst: Vec<_> = pairs.iter().map(|(_, _, g)| *g.translation()).collect();
    let align = match alignment {
        Alignment::None => Pose::identity(),
        Alignment::Se3 => umeyama_se3(&src, &dst),
    };
    let ate = (src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (align.transform_point(s) - d).norm_squared())
        .sum::<f64>()
        / pairs.len() as f64)
        .sqrt();

    let mut sq = 0.0;
    let mut count = 0usize;
    let mut j = 0;
    for i in 0..pairs.len() {
        let target = pairs[i].0 + rpe_delta;
        while j < pairs.len() && pairs[j].0 < target - 1e-6 {
            j += 1;
        }
        if j >= pairs.len() {
            break;
        }
        if (pairs[j].0 - target).abs() > 0.5 * rpe_delta {
            continue;
        }
        let rel_est = pairs[i].1.inverse().compose(pairs[j].1);
        let rel_gt = pairs[i].2.inverse().compose(pairs[j].2);
        sq += rel_gt.inverse().compose(&rel_est).translation().norm_squared();
        count += 1;
    }
    let rpe = if count == 0 { 0.0 } else { (sq / count as f64).sqrt() };
    Ok(TrajectoryMetrics { rpe, ate, alignment: align, matched: pairs.len() })
}

/// Piecewise-geodesic interpolation of discrete poses, held constant
/// outside the sampled span.
pub fn interpolate_discrete(samples: &[(f64, Pose)], t: f64) -> Option<Pose> {
    let (first, last) = (samples.first()?, samples.last()?);
    if t <= first.0 {
        return Some(first.1);
    }
    if t >= last.0 {
        return Some(last.1);
    }
    let k = samples.partition_point(|(s, _)| *s <= t);
    let ((ta, a), (tb, b)) = (samples[k - 1], samples[k]);
    let alpha = (t - ta) / (tb - ta);
    let delta = a.local_coordinates(&b).ok()?;
    a.retract(&delta.scale(alpha)).ok()
}
