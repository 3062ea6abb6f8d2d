//! Geometric event model: a track fires whenever its noise-free projection
//! has moved `event_threshold_px` since that track's previous event.

use ctvo_core::{Event, Polarity, Pose};
use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scenario::SimScenario;
use crate::SimError;

const BISECTION_STEPS: usize = 48;
/// Mixed into the scenario seed for the outlier pixel stream.
const OUTLIER_STREAM: u64 = 0x6f75_746c_6965_7273;

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Globally time-sorted; ties broken by track id.
    pub events: Vec<Event>,
    /// Camera-to-world poses sampled at `ground_truth_rate`.
    pub ground_truth: Vec<(f64, Pose)>,
    /// Tracks whose pixels were replaced by uniform draws.
    pub outlier_tracks: Vec<u64>,
}

fn project(s: &SimScenario, t: f64, landmark: &Vector3<f64>) -> Option<Vector2<f64>> {
    let pc = s.pose(t).inverse().transform_point(landmark);
    let z = s.intrinsics.project_camera_point(&pc).ok()?;
    s.intrinsics.contains(&z).then_some(z)
}

/// Noise-free firing times and pixels of one track.
fn track_events(s: &SimScenario, landmark: &Vector3<f64>) -> Vec<(f64, Vector2<f64>, Polarity)> {
    let thr = s.event_threshold_px;
    let steps = (s.duration / s.time_resolution).ceil() as usize;
    let mut out: Vec<(f64, Vector2<f64>, Polarity)> = Vec::new();
    let mut reference: Option<Vector2<f64>> = None;
    let mut prev_t = 0.0;
    for k in 0..=steps {
        let t = (k as f64 * s.time_resolution).min(s.duration);
        let Some(z) = project(s, t, landmark) else {
            reference = None;
            prev_t = t;
            continue;
        };
        let Some(mut zr) = reference else {
            reference = Some(z);
            prev_t = t;
            continue;
        };
        // Several crossings can fall inside one grid step.
        let mut lo = prev_t;
        while (z - zr).norm() >= thr {
            let (mut a, mut b) = (lo, t);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (a + b);
                match project(s, mid, landmark) {
                    Some(zm) if (zm - zr).norm() < thr => a = mid,
                    _ => b = mid,
                }
            }
            let mut te = quantize(b);
            if let Some(&(last, _, _)) = out.last() {
                if te <= last {
                    te = quantize(last + 1e-9);
                }
            }
            let ze = project(s, b, landmark).unwrap_or(z);
            out.push((te, ze, polarity(&(ze - zr))));
            zr = ze;
            lo = b;
        }
        reference = Some(zr);
        prev_t = t;
    }
    out
}

/// Rounds to the nanosecond grid the stream file stores.
fn quantize(t: f64) -> f64 {
    format!("{t:.9}").parse().expect("formatted float parses")
}

fn polarity(motion: &Vector2<f64>) -> Polarity {
    let axis = if motion.x.abs() >= motion.y.abs() { motion.x } else { motion.y };
    if axis >= 0.0 {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

pub fn generate_events(s: &SimScenario) -> Result<SimOutput, SimError> {
    let any_in_front = s.landmarks.iter().any(|l| {
        let n = 200;
        (0..=n).any(|k| s.pose(s.duration * k as f64 / n as f64).inverse().transform_point(l).z > 0.0)
    });
    if !any_in_front {
        return Err(SimError::EmptyStream);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut order: Vec<usize> = (0..s.landmarks.len()).collect();
    order.shuffle(&mut rng);
    let n_out = (s.outlier_track_fraction * s.landmarks.len() as f64).round() as usize;
    let mut outlier_tracks: Vec<u64> = order[..n_out].iter().map(|&i| i as u64).collect();
    outlier_tracks.sort_unstable();

    let mut raw: Vec<(f64, u64, Vector2<f64>, Polarity)> = Vec::new();
    for (i, l) in s.landmarks.iter().enumerate() {
        raw.extend(track_events(s, l).into_iter().map(|(t, z, p)| (t, i as u64, z, p)));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let noise = Normal::new(0.0, s.pixel_noise_sigma).map_err(|e| SimError::Config(e.to_string()))?;
    // Outlier pixels come from their own stream and every event draws its
    // noise, so inlier pixels do not depend on the outlier fraction.
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(s.seed ^ OUTLIER_STREAM);
    let (w, h) = (s.intrinsics.width, s.intrinsics.height);
    let clamp = |z: Vector2<f64>| Vector2::new(z.x.clamp(0.0, w.next_down()), z.y.clamp(0.0, h.next_down()));
    let events = raw
        .into_iter()
        .map(|(t, id, z, p)| {
            let noisy = if s.pixel_noise_sigma > 0.0 {
                clamp(z + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)))
            } else {
                z
            };
            let pixel = if outlier_tracks.binary_search(&id).is_ok() {
                Vector2::new(outlier_rng.random_range(0.0..w), outlier_rng.random_range(0.0..h))
            } else {
                noisy
            };
            Event::new(t, pixel, p, Some(id))
        })
        .collect();

    Ok(SimOutput { events, ground_truth: sample_ground_truth(s), outlier_tracks })
}

pub fn sample_ground_truth(s: &SimScenario) -> Vec<(f64, Pose)> {
    let n = (s.duration * s.ground_truth_rate + 1e-9).floor() as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / s.ground_truth_rate;
            (t, s.pose(t))
        })
        .collect()
}
