//! Frame-based bundle adjustment: one zero-velocity state per usable frame,
//! reprojection factors only, gauge fixed like the asynchronous engine.

use std::collections::BTreeMap;

use ctvo_core::camera::triangulate_rays;
use ctvo_core::engine::{Correspondence, TwoViewInitializer, TwoViewProblem};
use ctvo_core::graph::{gauss_newton, Factor, GaugePriorFactor, GaussNewtonConfig, ReprojectionFactor, SolveError};
use ctvo_core::{ControlState, Event, Graph, Intrinsics, Polarity, Pose, Twist, Values, VariableIndex, WnoaPrior};
use nalgebra::{Matrix6, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::batch::EventFrame;
use crate::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub pixel_sigma: f64,
    pub gauge_information: f64,
    pub bootstrap_min_tracks: usize,
    pub min_parallax_deg: f64,
    /// Mapped tracks a frame needs before its pose is added.
    pub min_mapped_tracks: usize,
    /// Newest states optimized per incremental step; the final solve is full.
    pub lag: usize,
    pub max_iterations: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.5,
            gauge_information: 1e8,
            bootstrap_min_tracks: 8,
            min_parallax_deg: 1.0,
            min_mapped_tracks: 6,
            lag: 10,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    /// Fewer distinct tracks than `batch::MIN_FRAME_TRACKS`.
    Unusable { tracks: usize },
    TooFewMapped { mapped: usize },
    /// Timestamp not after the previous kept frame.
    NonIncreasing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedFrame {
    pub index: usize,
    pub timestamp: f64,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    /// One camera-to-world pose per kept frame timestamp.
    pub poses: Vec<(f64, Pose)>,
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub skipped: Vec<SkippedFrame>,
    /// Frames with fewer than `batch::MIN_FRAME_TRACKS` tracks, empty ones included.
    pub unusable_frames: usize,
    pub solves: usize,
    pub diverged_solves: usize,
    pub cost_trace: Vec<f64>,
    pub final_cost: f64,
}

struct Ba<'a> {
    cfg: &'a BaselineConfig,
    k: Intrinsics,
    prior: WnoaPrior<f64>,
    graph: Graph,
    values: Values<f64>,
    /// Kept frames, in state order.
    frames: Vec<&'a EventFrame>,
    landmark_of: BTreeMap<u64, usize>,
    result: BaselineResult,
}

fn rays_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

impl<'a> Ba<'a> {
    fn noise(&self) -> nalgebra::Matrix2<f64> {
        ReprojectionFactor::isotropic_noise(self.cfg.pixel_sigma)
    }

    fn push_state(&mut self, frame: &'a EventFrame, pose: Pose) {
        let s = self.values.states.len();
        self.values.states.push(ControlState::stationary(frame.timestamp, pose));
        self.frames.push(frame);
        let information = Matrix6::identity() * self.cfg.gauge_information;
        self.graph.add(Factor::Gauge(GaugePriorFactor::Velocity { target: s, mean: Twist::zero(), information }));
    }

    /// State `s` is read at its own knot: from the right end of `(s−1, s)`,
    /// or the left end of `(0, 1)` for the first state.
    fn add_observation(&mut self, s: usize, pixel: Vector2<f64>, landmark: usize) -> Result<(), SimError> {
        let (l, r) = if s == 0 { (0, 1) } else { (s - 1, s) };
        let t = self.values.states[s].timestamp;
        let ev = Event::new(t, pixel, Polarity::Positive, None);
        let (sl, sr) = (self.values.states[l].timestamp, self.values.states[r].timestamp);
        let f = ReprojectionFactor::new(ev, landmark, l, r, sl, sr, &self.prior, self.noise())?;
        self.graph.add(Factor::Reprojection(f));
        Ok(())
    }

    /// Maps every track seen in at least two kept frames with enough parallax.
    fn triangulate_new(&mut self) -> Result<usize, SimError> {
        let mut seen: BTreeMap<u64, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
        for (s, f) in self.frames.iter().enumerate() {
            for (id, o) in &f.observations {
                if !self.landmark_of.contains_key(id) {
                    seen.entry(*id).or_default().push((s, o.pixel));
                }
            }
        }
        let mut added = 0;
        for (id, obs) in seen {
            if obs.len() < 2 {
                continue;
            }
            // The camera module takes world-to-camera poses.
            let rays: Vec<_> = obs.iter().map(|(s, z)| (self.values.states[*s].pose.inverse(), *z)).collect();
            let Ok(tri) = triangulate_rays(&rays, &self.k) else { continue };
            if tri.angle_deg < self.cfg.min_parallax_deg {
                continue;
            }
            let li = self.values.landmarks.len();
            self.values.landmarks.push(tri.landmark);
            self.landmark_of.insert(id, li);
            for (s, z) in obs {
                self.add_observation(s, z, li)?;
            }
            added += 1;
        }
        Ok(added)
    }

    fn solve(&mut self, lag: Option<usize>) -> Result<(), SimError> {
        let n = self.values.states.len();
        let cut = lag.map_or(0, |l| n.saturating_sub(l));
        for s in 0..n {
            self.graph.set_frozen(VariableIndex::state(s), s < cut);
        }
        let config = GaussNewtonConfig { max_iters: self.cfg.max_iterations, ..GaussNewtonConfig::default() };
        let init = self.values.clone();
        let (values, report) = match gauss_newton(&mut self.graph, init, &config) {
            Ok(ok) => ok,
            Err(SolveError::Diverged { best, report }) => {
                self.result.diverged_solves += 1;
                (*best, report)
            }
            Err(SolveError::Graph(e)) => return Err(e.into()),
        };
        self.values = values;
        self.result.solves += 1;
        self.result.cost_trace.extend(&report.cost_trace);
        self.result.final_cost = report.final_cost;
        Ok(())
    }
}

/// Runs incremental frame-based BA over the usable frames of `frames`.
pub fn frame_based_ba(
    frames: &[EventFrame],
    intrinsics: &Intrinsics,
    initializer: &mut dyn TwoViewInitializer<f64>,
    config: &BaselineConfig,
) -> Result<BaselineResult, SimError> {
    let mut skipped = Vec::new();
    let mut usable: Vec<&EventFrame> = Vec::new();
    for f in frames {
        if !f.is_usable() {
            skipped.push(SkippedFrame {
                index: f.index,
                timestamp: f.timestamp,
                reason: SkipReason::Unusable { tracks: f.track_count() },
            });
        } else if usable.last().is_some_and(|p| f.timestamp <= p.timestamp) {
            skipped.push(SkippedFrame { index: f.index, timestamp: f.timestamp, reason: SkipReason::NonIncreasing });
        } else {
            usable.push(f);
        }
    }
    let unusable_frames = skipped.len();
    if usable.len() < 2 {
        return Err(SimError::TooFewFrames { usable: usable.len() });
    }

    let mut ba = Ba {
        cfg: config,
        k: *intrinsics,
        prior: WnoaPrior::isotropic(1.0)?,
        graph: Graph::new(*intrinsics),
        values: Values::default(),
        frames: Vec::new(),
        landmark_of: BTreeMap::new(),
        result: BaselineResult {
            poses: Vec::new(),
            landmarks: BTreeMap::new(),
            skipped,
            unusable_frames,
            solves: 0,
            diverged_solves: 0,
            cost_trace: Vec::new(),
            final_cost: 0.0,
        },
    };

    // Bootstrap: the first usable frame against the first later frame with
    // enough shared tracks and rotation-compensated parallax.
    let f0 = usable[0];
    let pose0 = initializer.first_pose(f0.timestamp);
    let mut boot = None;
    for (j, f1) in usable.iter().enumerate().skip(1) {
        let corr: Vec<Correspondence<f64>> = f0
            .observations
            .iter()
            .filter_map(|(id, a)| {
                let b = f1.observations.get(id)?;
                Some(Correspondence {
                    track_id: *id,
                    first: Event::new(f0.timestamp, a.pixel, Polarity::Positive, Some(*id)),
                    last: Event::new(f1.timestamp, b.pixel, Polarity::Positive, Some(*id)),
                })
            })
            .collect();
        if corr.len() < config.bootstrap_min_tracks {
            continue;
        }
        let raw = median(
            corr.iter()
                .map(|c| rays_angle_deg(&intrinsics.backproject(&c.first.pixel), &intrinsics.backproject(&c.last.pixel)))
                .collect(),
        );
        if raw < config.min_parallax_deg {
            continue;
        }
        let problem =
            TwoViewProblem { t0: f0.timestamp, t1: f1.timestamp, pose0, correspondences: &corr, intrinsics };
        let Ok(guess) = initializer.initialize(&problem) else { continue };
        let (r0, r1) = (pose0.rotation(), guess.pose1.rotation());
        let compensated = median(
            corr.iter()
                .map(|c| {
                    rays_angle_deg(
                        &(r0 * intrinsics.backproject(&c.first.pixel)),
                        &(r1 * intrinsics.backproject(&c.last.pixel)),
                    )
                })
                .collect(),
        );
        if compensated >= config.min_parallax_deg {
            boot = Some((j, guess));
            break;
        }
    }
    let Some((j1, guess)) = boot else {
        return Err(SimError::Baseline("no frame pair passed the bootstrap checks".into()));
    };
    let (t0, t1) = (f0.timestamp, usable[j1].timestamp);
    let delta = pose0.local_coordinates(&guess.pose1)?;
    for f in &usable[..=j1] {
        let pose = pose0.retract(&delta.scale((f.timestamp - t0) / (t1 - t0)))?;
        ba.push_state(f, pose);
    }
    ba.graph.add(Factor::Gauge(GaugePriorFactor::Pose {
        target: 0,
        mean: pose0,
        information: Matrix6::identity() * config.gauge_information,
    }));
    ba.graph.add(Factor::Gauge(GaugePriorFactor::Scale {
        target: j1,
        anchor: *pose0.translation(),
        distance: guess.baseline,
        information: config.gauge_information,
    }));
    if ba.triangulate_new()? < config.bootstrap_min_tracks {
        return Err(SimError::Baseline("too few tracks triangulated at bootstrap".into()));
    }
    ba.solve(None)?;

    for f in &usable[j1 + 1..] {
        let mapped: Vec<(usize, Vector2<f64>)> = f
            .observations
            .iter()
            .filter_map(|(id, o)| ba.landmark_of.get(id).map(|&l| (l, o.pixel)))
            .collect();
        if mapped.len() < config.min_mapped_tracks {
            ba.result.skipped.push(SkippedFrame {
                index: f.index,
                timestamp: f.timestamp,
                reason: SkipReason::TooFewMapped { mapped: mapped.len() },
            });
            continue;
        }
        let n = ba.values.states.len();
        let (a, b) = (&ba.values.states[n - 2], &ba.values.states[n - 1]);
        let step = a.pose.local_coordinates(&b.pose)?;
        let pose = b.pose.retract(&step.scale((f.timestamp - b.timestamp) / (b.timestamp - a.timestamp)))?;
        ba.push_state(f, pose);
        for (l, z) in mapped {
            ba.add_observation(n, z, l)?;
        }
        ba.solve(Some(config.lag))?;
        if ba.triangulate_new()? > 0 {
            ba.solve(Some(config.lag))?;
        }
    }
    ba.solve(None)?;

    ba.result.skipped.sort_by_key(|s| s.index);
    ba.result.poses = ba.values.states.iter().map(|s| (s.timestamp, s.pose)).collect();
    ba.result.landmarks =
        ba.landmark_of.iter().map(|(id, &l)| (*id, ba.values.landmarks[l].position)).collect();
    Ok(ba.result)
}
