//! Two-view initializers used to bootstrap the engine.

use nalgebra::{Matrix3, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EngineError;
use crate::camera::{CameraIntrinsics, Landmark};
use crate::event::EventObservation;
use crate::gp::{ControlState, WnoaPrior};
use crate::graph::{gauss_newton, Factor, FactorGraph, GaugePriorFactor, GaussNewtonConfig, ReprojectionFactor, Values};
use crate::lie::{SE3Pose, Twist};
use crate::scalar::Real;

/// First and last event of one track inside the bootstrap window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Real> {
    pub track_id: u64,
    pub first: EventObservation<T>,
    pub last: EventObservation<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct TwoViewProblem<'a, T: Real> {
    pub t0: T,
    pub t1: T,
    /// Camera-to-world pose of the first control state.
    pub pose0: SE3Pose<T>,
    pub correspondences: &'a [Correspondence<T>],
    pub intrinsics: &'a CameraIntrinsics<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoViewGuess<T: Real> {
    /// Camera-to-world pose at `t1`.
    pub pose1: SE3Pose<T>,
    /// Distance between the two camera centres; fixes the map scale.
    pub baseline: T,
}

pub trait TwoViewInitializer<T: Real>: Send + Sync {
    /// Camera-to-world pose given to the very first control state.
    fn first_pose(&mut self, _t0: T) -> SE3Pose<T> {
        SE3Pose::identity()
    }

    fn initialize(&mut self, problem: &TwoViewProblem<'_, T>) -> Result<TwoViewGuess<T>, EngineError>;
}

/// Ground-truth lookup for the simulator-assisted initializer.
pub type PoseOracle<T> = Box<dyn Fn(T) -> SE3Pose<T> + Send + Sync>;

/// Reads the second pose from ground truth and perturbs it.
pub struct SimAssistedInitializer<T: Real> {
    truth: PoseOracle<T>,
    translation_noise: T,
    rotation_noise_deg: T,
    rng: ChaCha8Rng,
}

impl<T: Real> SimAssistedInitializer<T> {
    pub fn new(truth: PoseOracle<T>, translation_noise: T, rotation_noise_deg: T, seed: u64) -> Self {
        Self { truth, translation_noise, rotation_noise_deg, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn jitter(&mut self, scale: T) -> Vector3<T> {
        let s = scale.as_f64();
        if s <= 0.0 {
            return Vector3::zeros();
        }
        Vector3::from_fn(|_, _| T::lit(self.rng.random_range(-s..=s)))
    }
}

impl<T: Real> TwoViewInitializer<T> for SimAssistedInitializer<T> {
    fn first_pose(&mut self, t0: T) -> SE3Pose<T> {
        (self.truth)(t0)
    }

    fn initialize(&mut self, problem: &TwoViewProblem<'_, T>) -> Result<TwoViewGuess<T>, EngineError> {
        let p0 = (self.truth)(problem.t0);
        let p1 = (self.truth)(problem.t1);
        let rho = self.jitter(self.translation_noise);
        let phi = self.jitter(self.rotation_noise_deg * T::pi() / T::lit(180.0));
        let pose1 = p1.retract(&Twist::new(rho, phi))?;
        Ok(TwoViewGuess { pose1, baseline: (p1.translation() - p0.translation()).norm() })
    }
}

/// Places every first observation at a jittered depth, then solves a small
/// two-view bundle adjustment from several translation-direction guesses.
pub struct RandomDepthInitializer<T: Real> {
    pub depth: T,
    pub jitter: T,
    pub baseline: T,
    rng: ChaCha8Rng,
}

impl<T: Real> RandomDepthInitializer<T> {
    pub fn new(depth: T, jitter: T, baseline: T, seed: u64) -> Self {
        Self { depth, jitter, baseline, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<T: Real> TwoViewInitializer<T> for RandomDepthInitializer<T> {
    fn initialize(&mut self, problem: &TwoViewProblem<'_, T>) -> Result<TwoViewGuess<T>, EngineError> {
        let k = problem.intrinsics;
        if problem.correspondences.len() < 5 {
            return Err(EngineError::Initializer(format!(
                "{} correspondences, need at least 5",
                problem.correspondences.len()
            )));
        }
        let j = self.jitter.as_f64();
        let landmarks: Vec<Landmark<T>> = problem
            .correspondences
            .iter()
            .map(|c| {
                let d = self.depth + T::lit(if j > 0.0 { self.rng.random_range(-j..=j) } else { 0.0 });
                Landmark::new(problem.pose0.transform_point(&(k.backproject(&c.first.pixel) * d)))
            })
            .collect();

        // Events are snapped to the two view times; velocities are pinned to zero.
        let (t0, t1) = (problem.t0, problem.t1);
        let prior = WnoaPrior::isotropic(T::one())?;
        let noise = ReprojectionFactor::isotropic_noise(T::lit(crate::graph::DEFAULT_PIXEL_SIGMA));
        let strong = Matrix6::identity() * T::lit(1e8);
        let mut graph = FactorGraph::new(*k);
        graph.add(Factor::Gauge(GaugePriorFactor::Pose { target: 0, mean: problem.pose0, information: strong }));
        for s in 0..2 {
            graph.add(Factor::Gauge(GaugePriorFactor::Velocity { target: s, mean: Twist::zero(), information: strong }));
        }
        graph.add(Factor::Gauge(GaugePriorFactor::Scale {
            target: 1,
            anchor: *problem.pose0.translation(),
            distance: self.baseline,
            information: T::lit(1e8),
        }));
        for (i, c) in problem.correspondences.iter().enumerate() {
            for (ev, t) in [(c.first, t0), (c.last, t1)] {
                let ev = EventObservation { timestamp: t, ..ev };
                graph.add(Factor::Reprojection(ReprojectionFactor::new(ev, i, 0, 1, t0, t1, &prior, noise)?));
            }
            graph.add(Factor::Gauge(GaugePriorFactor::Point {
                target: i,
                mean: landmarks[i].position,
                information: Matrix3::identity() * T::lit(1e-4),
            }));
        }

        let r0 = problem.pose0.rotation();
        let mut best: Option<(T, SE3Pose<T>)> = None;
        for axis in 0..3 {
            for sign in [T::one(), -T::one()] {
                let mut dir = Vector3::zeros();
                dir[axis] = sign * self.baseline;
                let pose1 = SE3Pose::from_parts(*r0, problem.pose0.translation() + r0 * dir);
                let init = Values::new(
                    vec![ControlState::stationary(t0, problem.pose0), ControlState::stationary(t1, pose1)],
                    landmarks.clone(),
                );
                let mut g = graph.clone();
                let Ok((values, report)) = gauss_newton(&mut g, init, &GaussNewtonConfig::default()) else { continue };
                if best.as_ref().is_none_or(|(c, _)| report.final_cost < *c) {
                    best = Some((report.final_cost, values.states[1].pose));
                }
            }
        }
        let (_, pose1) = best.ok_or_else(|| EngineError::Initializer("two-view refinement failed from every start".into()))?;
        Ok(TwoViewGuess { pose1, baseline: self.baseline })
    }
}
