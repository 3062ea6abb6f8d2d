//! Online estimator: grows the trajectory as events arrive, attaches event
//! factors once their bracketing knots exist, demotes outlier tracks and
//! re-solves warm.

mod initializer;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project, triangulate_rays, CameraError, CameraIntrinsics, Landmark};
use crate::event::EventObservation;
use crate::gp::{extrapolate_state, interpolate_pair, ControlState, GpError, InterpolationOperators, TrajectoryGP, WnoaPrior};
use crate::graph::{
    gauss_newton, Factor, FactorGraph, GaugePriorFactor, GaussNewtonConfig, GaussNewtonReport, GpPriorFactor, GraphError,
    Relinearization, ReprojectionFactor, SolveError, Values, VariableIndex,
};
use crate::lie::{LieError, SE3Pose};
use crate::scalar::Real;

pub use initializer::{
    Correspondence, PoseOracle, RandomDepthInitializer, SimAssistedInitializer, TwoViewGuess, TwoViewInitializer, TwoViewProblem,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("event at {timestamp} s precedes the last ingested event at {last} s")]
    NonMonotonic { timestamp: f64, last: f64 },
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("engine has not bootstrapped yet")]
    NotBootstrapped,
    #[error("two-view initializer failed: {0}")]
    Initializer(String),
    #[error("solve diverged (best cost {best_cost})")]
    Diverged { best_cost: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveTrigger {
    PerEvent,
    PerState,
    PerNEvents(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolveMode {
    /// Start from the current values, relinearizing only moved variables.
    Warm,
    /// Relinearize every factor.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "", default, deny_unknown_fields)]
pub struct EngineConfig<T: Real> {
    /// Minimum spacing between knots, seconds.
    pub state_insertion_period: T,
    /// Mean reprojection error above which a track is demoted, pixels.
    pub outlier_avg_reproj_px: T,
    /// Below this many active tracks the engine logs that the front-end
    /// should select new features.
    pub min_active_tracks: usize,
    pub solve_trigger: SolveTrigger,
    /// Tangent-norm motion that forces relinearization in warm solves.
    pub relin_threshold: T,
    /// Keep only the most recent `W` knots free (older ones are frozen).
    pub fixed_lag: Option<usize>,
    pub pixel_sigma: T,
    /// Diagonal of the white-noise-on-acceleration power spectral density,
    /// translation then rotation.
    pub qc_diagonal: [T; 6],
    pub bootstrap_min_tracks: usize,
    pub bootstrap_min_parallax_deg: T,
    /// Ray-angle spread required before a late track gets a landmark.
    pub landmark_min_parallax_deg: T,
    pub max_iterations: usize,
    /// Gauss-Newton stopping rule: relative cost decrease.
    pub rel_tol: T,
    /// Gauss-Newton stopping rule: largest increment component.
    pub abs_tol: T,
    /// Information of the gauge priors, per unit.
    pub gauge_information: T,
    /// Standard deviation of the weak landmark prior used while bootstrapping, metres.
    pub bootstrap_landmark_sigma: T,
}

impl<T: Real> Default for EngineConfig<T> {
    fn default() -> Self {
        Self {
            state_insertion_period: T::lit(0.05),
            outlier_avg_reproj_px: T::lit(3.0),
            min_active_tracks: 20,
            solve_trigger: SolveTrigger::PerState,
            relin_threshold: T::lit(1e-3),
            fixed_lag: None,
            pixel_sigma: T::lit(0.5),
            qc_diagonal: [T::one(); 6],
            bootstrap_min_tracks: 8,
            bootstrap_min_parallax_deg: T::one(),
            landmark_min_parallax_deg: T::one(),
            max_iterations: 50,
            rel_tol: T::lit(1e-8),
            abs_tol: T::lit(1e-10),
            gauge_information: T::lit(1e8),
            bootstrap_landmark_sigma: T::lit(100.0),
        }
    }
}

impl<T: Real> EngineConfig<T> {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("state_insertion_period", self.state_insertion_period),
            ("outlier_avg_reproj_px", self.outlier_avg_reproj_px),
            ("relin_threshold", self.relin_threshold),
            ("pixel_sigma", self.pixel_sigma),
            ("bootstrap_min_parallax_deg", self.bootstrap_min_parallax_deg),
            ("landmark_min_parallax_deg", self.landmark_min_parallax_deg),
            ("gauge_information", self.gauge_information),
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("bootstrap_landmark_sigma", self.bootstrap_landmark_sigma),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(EngineError::InvalidConfig(format!("{name} must be positive and finite")));
            }
        }
        if self.qc_diagonal.iter().any(|q| !(*q > T::zero())) {
            return Err(EngineError::InvalidConfig("qc_diagonal entries must be positive".into()));
        }
        if self.bootstrap_min_tracks < 2 {
            return Err(EngineError::InvalidConfig("bootstrap_min_tracks must be at least 2".into()));
        }
        if self.fixed_lag == Some(0) || self.fixed_lag == Some(1) {
            return Err(EngineError::InvalidConfig("fixed_lag must keep at least 2 knots".into()));
        }
        if matches!(self.solve_trigger, SolveTrigger::PerNEvents(0)) {
            return Err(EngineError::InvalidConfig("solve_trigger per_n_events needs n > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(EngineError::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Active,
    Outlier,
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EventTrack<T: Real> {
    pub track_id: u64,
    pub events: Vec<EventObservation<T>>,
    /// Landmark ordinal once triangulated.
    pub landmark: Option<usize>,
    pub status: TrackStatus,
    /// Indices of this track's factors in the graph.
    factors: Vec<usize>,
    /// Number of leading events already turned into factors.
    attached: usize,
    /// Bracketed event count at the last triangulation attempt.
    init_attempted_at: usize,
}

impl<T: Real> EventTrack<T> {
    fn new(track_id: u64) -> Self {
        Self {
            track_id,
            events: Vec::new(),
            landmark: None,
            status: TrackStatus::Active,
            factors: Vec::new(),
            attached: 0,
            init_attempted_at: 0,
        }
    }

    pub fn factor_indices(&self) -> &[usize] {
        &self.factors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Empty,
    Bootstrapping,
    Running,
}

/// What one call to [`Engine::ingest`] did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestOutcome<T: Real> {
    pub new_state: Option<VariableIndex>,
    pub factors_added: usize,
    pub bootstrapped: bool,
    pub bootstrap_deferred: bool,
    pub demoted: Vec<u64>,
    pub report: Option<GaussNewtonReport<T>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EngineStats<T: Real> {
    pub events_ingested: usize,
    pub factors_added: usize,
    pub solves: usize,
    pub gn_iterations: usize,
    pub demoted_tracks: Vec<u64>,
    /// Accepted-iteration costs of every solve, in order.
    pub cost_trace: Vec<T>,
    pub bootstrap_time: Option<T>,
    /// Solves that hit the divergence limit and kept their best values.
    pub diverged_solves: usize,
}

/// Serializable engine state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
struct Checkpoint<T: Real> {
    format: String,
    config: EngineConfig<T>,
    graph: FactorGraph<T>,
    values: Values<T>,
    tracks: BTreeMap<u64, EventTrack<T>>,
    phase: Phase,
    last_timestamp: Option<T>,
    pending_knot_times: Vec<T>,
    bootstrap_priors: Vec<usize>,
    events_since_solve: usize,
    graph_changed: bool,
    errors_fresh: bool,
    last_cost: T,
    stats: EngineStats<T>,
}

const CHECKPOINT_FORMAT: &str = "ctvo-engine-checkpoint-v1";


/// Minimum bracketed events before a late track is triangulated, and the
/// number of new ones between retries.
const TRACK_INIT_EVENTS: usize = 5;
/// Rays used per triangulation.
const TRACK_INIT_RAYS: usize = 20;
/// Tracks whose triangulated point reprojects worse than this multiple of
/// the outlier threshold are demoted without entering the graph.
const INIT_GATE_FACTOR: f64 = 10.0;
/// Gross-outlier pass during bootstrap refinement.
const BOOTSTRAP_GROSS_FACTOR: f64 = 5.0;

enum TrackInit<T: Real> {
    Wait,
    Outlier,
    Landmark(Landmark<T>),
}

/// Left knot of the interval containing `t`, if any.
fn bracket<T: Real>(states: &[ControlState<T>], t: T) -> Option<usize> {
    let (first, last) = (states.first()?, states.last()?);
    if states.len() < 2 || t < first.timestamp || t > last.timestamp {
        return None;
    }
    let idx = states.partition_point(|s| s.timestamp <= t);
    Some((idx - 1).min(states.len() - 2))
}

fn pose_at<T: Real>(states: &[ControlState<T>], prior: &WnoaPrior<T>, t: T) -> Result<SE3Pose<T>, EngineError> {
    if let [only] = states {
        if only.timestamp == t {
            return Ok(only.pose);
        }
    }
    let l = bracket(states, t).ok_or_else(|| EngineError::UnsupportedInput(format!("time {t} outside the knot span")))?;
    let (a, b) = (&states[l], &states[l + 1]);
    let ops = InterpolationOperators::new(prior, a.timestamp, t, b.timestamp)?;
    Ok(interpolate_pair(a, b, t, &ops)?.pose)
}

fn triangulate_track<T: Real>(
    states: &[ControlState<T>],
    prior: &WnoaPrior<T>,
    k: &CameraIntrinsics<T>,
    events: &[EventObservation<T>],
    min_parallax_deg: T,
    gate_px: T,
) -> Result<TrackInit<T>, EngineError> {
    let n = events.len();
    if n < 2 {
        return Ok(TrackInit::Wait);
    }
    let poses = events.iter().map(|e| pose_at(states, prior, e.timestamp)).collect::<Result<Vec<_>, _>>()?;
    let m = n.min(TRACK_INIT_RAYS);
    let obs: Vec<_> = (0..m)
        .map(|i| {
            let j = i * (n - 1) / (m - 1);
            (poses[j].inverse(), events[j].pixel)
        })
        .collect();
    let tri = match triangulate_rays(&obs, k) {
        Ok(tri) => tri,
        Err(CameraError::Cheirality) => return Ok(TrackInit::Outlier),
        Err(CameraError::LowParallax { .. } | CameraError::TooFewObservations(_)) => return Ok(TrackInit::Wait),
        Err(e) => return Err(e.into()),
    };
    if tri.angle_deg < min_parallax_deg {
        return Ok(TrackInit::Wait);
    }
    let mut sum = T::zero();
    for (pose, ev) in poses.iter().zip(events) {
        match project(&pose.inverse(), &tri.landmark, k) {
            Ok(z) => sum += (z - ev.pixel).norm(),
            Err(_) => return Ok(TrackInit::Outlier),
        }
    }
    if sum / T::lit(n as f64) > gate_px {
        return Ok(TrackInit::Outlier);
    }
    Ok(TrackInit::Landmark(tri.landmark))
}

fn median<T: Real>(values: impl Iterator<Item = T>) -> T {
    let mut v: Vec<T> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v[v.len() / 2]
}

fn angle_between_deg<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.cross(b).norm().atan2(a.dot(b)) * T::lit(180.0) / T::pi()
}

pub struct Engine<T: Real> {
    config: EngineConfig<T>,
    prior: WnoaPrior<T>,
    graph: FactorGraph<T>,
    values: Values<T>,
    tracks: BTreeMap<u64, EventTrack<T>>,
    phase: Phase,
    last_timestamp: Option<T>,
    /// Knot times chosen while waiting for enough parallax to bootstrap.
    pending_knot_times: Vec<T>,
    /// Weak landmark priors that are dropped once bootstrapping is done.
    bootstrap_priors: Vec<usize>,
    events_since_solve: usize,
    graph_changed: bool,
    /// Cached factor error norms match `values`.
    errors_fresh: bool,
    last_cost: T,
    stats: EngineStats<T>,
    snapshot: Arc<TrajectoryGP<T>>,
    initializer: Box<dyn TwoViewInitializer<T>>,
}

impl<T: Real> Engine<T> {
    pub fn new(
        config: EngineConfig<T>,
        intrinsics: CameraIntrinsics<T>,
        initializer: Box<dyn TwoViewInitializer<T>>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        intrinsics.validate()?;
        let prior = WnoaPrior::from_diagonal(config.qc_diagonal)?;
        Ok(Self {
            snapshot: Arc::new(TrajectoryGP::new(prior)),
            config,
            prior,
            graph: FactorGraph::new(intrinsics),
            values: Values::default(),
            tracks: BTreeMap::new(),
            phase: Phase::Empty,
            last_timestamp: None,
            pending_knot_times: Vec::new(),
            bootstrap_priors: Vec::new(),
            events_since_solve: 0,
            graph_changed: false,
            errors_fresh: false,
            last_cost: T::zero(),
            stats: EngineStats::default(),
            initializer,
        })
    }

    pub fn config(&self) -> &EngineConfig<T> {
        &self.config
    }

    pub fn prior(&self) -> &WnoaPrior<T> {
        &self.prior
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn values(&self) -> &Values<T> {
        &self.values
    }

    pub fn graph(&self) -> &FactorGraph<T> {
        &self.graph
    }

    pub fn tracks(&self) -> &BTreeMap<u64, EventTrack<T>> {
        &self.tracks
    }

    pub fn stats(&self) -> &EngineStats<T> {
        &self.stats
    }

    pub fn knot_count(&self) -> usize {
        self.values.states.len()
    }

    /// Cost reported by the last solve.
    pub fn last_cost(&self) -> T {
        self.last_cost
    }

    /// Trajectory as of the last committed solve. Cheap to clone and safe to
    /// query from other threads while ingestion continues.
    pub fn snapshot(&self) -> Arc<TrajectoryGP<T>> {
        Arc::clone(&self.snapshot)
    }

    pub fn active_track_count(&self) -> usize {
        self.tracks.values().filter(|t| t.status == TrackStatus::Active).count()
    }

    /// Number of enabled event factors.
    pub fn active_factor_count(&self) -> usize {
        self.tracks
            .values()
            .flat_map(|t| t.factors.iter())
            .filter(|&&f| self.graph.is_enabled(f))
            .count()
    }

    fn last_knot_time(&self) -> Option<T> {
        self.values.states.last().map(|s| s.timestamp)
    }

    fn mark_changed(&mut self) {
        self.graph_changed = true;
        self.errors_fresh = false;
    }

    pub fn ingest(&mut self, event: EventObservation<T>) -> Result<IngestOutcome<T>, EngineError> {
        let track_id = event.track_id.ok_or_else(|| {
            EngineError::UnsupportedInput("event without track id; feature tracking is not part of the engine".into())
        })?;
        if !event.timestamp.is_finite() || !event.pixel.iter().all(|v| v.is_finite()) {
            return Err(EngineError::UnsupportedInput("non-finite event".into()));
        }
        if let Some(last) = self.last_timestamp {
            if event.timestamp < last {
                return Err(EngineError::NonMonotonic { timestamp: event.timestamp.as_f64(), last: last.as_f64() });
            }
        }
        let track = self.tracks.entry(track_id).or_insert_with(|| EventTrack::new(track_id));
        if let Some(prev) = track.events.last() {
            if event.timestamp <= prev.timestamp {
                return Err(EngineError::NonMonotonic { timestamp: event.timestamp.as_f64(), last: prev.timestamp.as_f64() });
            }
        }
        track.events.push(event);
        self.last_timestamp = Some(event.timestamp);
        self.stats.events_ingested += 1;
        self.events_since_solve += 1;

        let mut out = IngestOutcome::default();
        match self.phase {
            Phase::Empty => {
                let pose = self.initializer.first_pose(event.timestamp);
                self.values.states.push(ControlState::stationary(event.timestamp, pose));
                self.pending_knot_times.push(event.timestamp);
                self.phase = Phase::Bootstrapping;
                out.new_state = Some(VariableIndex::state(0));
                out.bootstrap_deferred = true;
                return Ok(out);
            }
            Phase::Bootstrapping => {
                let last = *self.pending_knot_times.last().expect("first knot time");
                out.bootstrap_deferred = true;
                if event.timestamp > last + self.config.state_insertion_period {
                    self.pending_knot_times.push(event.timestamp);
                    if let Some((report, demoted)) = self.try_bootstrap()? {
                        out.bootstrap_deferred = false;
                        out.bootstrapped = true;
                        out.factors_added = self.graph.len();
                        out.demoted = demoted;
                        out.report = Some(report);
                        self.stats.factors_added += out.factors_added;
                    }
                }
                return Ok(out);
            }
            Phase::Running => {}
        }

        let before = self.graph.len();
        let last_knot = self.last_knot_time().expect("running engine has knots");
        if event.timestamp > last_knot + self.config.state_insertion_period {
            out.new_state = Some(self.insert_control_state(event.timestamp)?);
            let ids: Vec<u64> = self.tracks.keys().copied().collect();
            for id in ids {
                self.attach_pending(id)?;
            }
        } else {
            self.attach_pending(track_id)?;
        }
        if let Some(id) = self.maybe_initialize_track(track_id)? {
            out.demoted.push(id);
        }
        out.factors_added = self.graph.len() - before;
        self.stats.factors_added += out.factors_added;

        let due = match self.config.solve_trigger {
            SolveTrigger::PerEvent => true,
            SolveTrigger::PerState => out.new_state.is_some(),
            SolveTrigger::PerNEvents(n) => self.events_since_solve >= n,
        };
        if due && self.graph_changed {
            let mut report = self.online_solve()?;
            let demoted = self.remove_outlier_tracks()?;
            if !demoted.is_empty() {
                report = self.online_solve()?;
            }
            out.demoted.extend(demoted);
            out.report = Some(report);
            if self.active_track_count() < self.config.min_active_tracks {
                log::debug!("{} active tracks, below min_active_tracks", self.active_track_count());
            }
        }
        Ok(out)
    }

    /// Appends a knot at `t_c` predicted by constant-velocity extrapolation
    /// and links it to the previous knot with a motion prior.
    pub fn insert_control_state(&mut self, t_c: T) -> Result<VariableIndex, EngineError> {
        if self.phase != Phase::Running {
            return Err(EngineError::NotBootstrapped);
        }
        let last = *self.values.states.last().expect("running engine has knots");
        if !(t_c > last.timestamp) {
            return Err(GpError::InvalidArgument(format!("knot time {t_c} not after last knot {}", last.timestamp)).into());
        }
        let knot = extrapolate_state(&last, t_c)?;
        let j = self.values.states.len();
        let prior = GpPriorFactor::new(j - 1, j, t_c - last.timestamp, &self.prior)?;
        self.values.states.push(knot);
        self.graph.add(Factor::GpPrior(prior));
        self.mark_changed();
        Ok(VariableIndex::state(j))
    }

    /// Turns every not-yet-attached event of the track that is bracketed by
    /// knots into a reprojection factor.
    fn attach_pending(&mut self, track_id: u64) -> Result<usize, EngineError> {
        let Some(track) = self.tracks.get_mut(&track_id) else { return Ok(0) };
        let (TrackStatus::Active, Some(lm)) = (track.status, track.landmark) else { return Ok(0) };
        let Some(last_knot) = self.values.states.last().map(|s| s.timestamp) else { return Ok(0) };
        let noise = ReprojectionFactor::isotropic_noise(self.config.pixel_sigma);
        let mut added = 0;
        while let Some(ev) = track.events.get(track.attached).copied() {
            if ev.timestamp > last_knot {
                break;
            }
            track.attached += 1;
            let Some(l) = bracket(&self.values.states, ev.timestamp) else { continue };
            let (s_l, s_r) = (self.values.states[l].timestamp, self.values.states[l + 1].timestamp);
            let f = ReprojectionFactor::new(ev, lm, l, l + 1, s_l, s_r, &self.prior, noise)?;
            track.factors.push(self.graph.add(Factor::Reprojection(f)));
            added += 1;
        }
        if added > 0 {
            self.mark_changed();
        }
        Ok(added)
    }

    /// Triangulates a track that has no landmark yet once enough of its
    /// events are bracketed. Returns the id if the track was demoted.
    fn maybe_initialize_track(&mut self, track_id: u64) -> Result<Option<u64>, EngineError> {
        let Some(last_knot) = self.last_knot_time() else { return Ok(None) };
        let track = &self.tracks[&track_id];
        if track.status != TrackStatus::Active || track.landmark.is_some() {
            return Ok(None);
        }
        let first_knot = self.values.states[0].timestamp;
        let start = track.events.partition_point(|e| e.timestamp < first_knot);
        let end = track.events.partition_point(|e| e.timestamp <= last_knot);
        let usable = end.saturating_sub(start);
        if usable < TRACK_INIT_EVENTS || usable < track.init_attempted_at + TRACK_INIT_EVENTS {
            return Ok(None);
        }
        let init = triangulate_track(
            &self.values.states,
            &self.prior,
            self.graph.intrinsics(),
            &track.events[start..end],
            self.config.landmark_min_parallax_deg,
            self.config.outlier_avg_reproj_px * T::lit(INIT_GATE_FACTOR),
        )?;
        let track = self.tracks.get_mut(&track_id).expect("track exists");
        track.init_attempted_at = usable;
        match init {
            TrackInit::Wait => Ok(None),
            TrackInit::Outlier => {
                track.status = TrackStatus::Outlier;
                self.stats.demoted_tracks.push(track_id);
                Ok(Some(track_id))
            }
            TrackInit::Landmark(lm) => {
                track.landmark = Some(self.values.landmarks.len());
                self.values.landmarks.push(lm);
                self.attach_pending(track_id)?;
                Ok(None)
            }
        }
    }

    /// Attempts the two-view start over the knots collected so far.
    /// `None` means "keep accumulating".
    fn try_bootstrap(&mut self) -> Result<Option<(GaussNewtonReport<T>, Vec<u64>)>, EngineError> {
        let t0 = self.pending_knot_times[0];
        let tc = *self.pending_knot_times.last().expect("pending knots");
        let span = tc - t0;
        let k = *self.graph.intrinsics();

        let mut correspondences = Vec::new();
        for track in self.tracks.values().filter(|t| t.status == TrackStatus::Active) {
            let n = track.events.partition_point(|e| e.timestamp <= tc);
            if n < 2 {
                continue;
            }
            let (first, last) = (track.events[0], track.events[n - 1]);
            if last.timestamp - first.timestamp >= span * T::lit(0.5) {
                correspondences.push(Correspondence { track_id: track.track_id, first, last });
            }
        }
        let distinct: std::collections::BTreeSet<(i64, i64)> = correspondences
            .iter()
            .map(|c| (c.first.pixel.x.as_f64().round() as i64, c.first.pixel.y.as_f64().round() as i64))
            .collect();
        if distinct.len() < self.config.bootstrap_min_tracks {
            return Ok(None);
        }
        // Raw bearing change bounds the rotation-compensated parallax from
        // above only when rotation is small; it is a cheap pre-check.
        let raw = median(
            correspondences
                .iter()
                .map(|c| angle_between_deg(&k.backproject(&c.first.pixel), &k.backproject(&c.last.pixel))),
        );
        if raw <= self.config.bootstrap_min_parallax_deg {
            return Ok(None);
        }

        let pose0 = self.values.states[0].pose;
        let problem = TwoViewProblem { t0, t1: tc, pose0, correspondences: &correspondences, intrinsics: &k };
        let guess = match self.initializer.initialize(&problem) {
            Ok(g) => g,
            Err(e) => {
                log::debug!("bootstrap deferred at t = {tc}: {e}");
                return Ok(None);
            }
        };
        if !(guess.baseline > T::zero()) || !guess.pose1.is_finite() {
            return Ok(None);
        }
        let (r0, r1) = (pose0.rotation(), guess.pose1.rotation());
        let parallax = median(
            correspondences
                .iter()
                .map(|c| angle_between_deg(&(r0 * k.backproject(&c.first.pixel)), &(r1 * k.backproject(&c.last.pixel)))),
        );
        if parallax <= self.config.bootstrap_min_parallax_deg {
            return Ok(None);
        }

        // Knots on the geodesic between the two views, constant body velocity.
        let velocity = pose0.local_coordinates(&guess.pose1)?.scale(T::one() / span);
        let states = self
            .pending_knot_times
            .iter()
            .map(|&t| Ok(ControlState::new(t, pose0.retract(&velocity.scale(t - t0))?, velocity)))
            .collect::<Result<Vec<_>, LieError>>()?;

        let gate = self.config.outlier_avg_reproj_px * T::lit(INIT_GATE_FACTOR);
        let mut landmarks = Vec::new();
        let mut assigned = Vec::new();
        let mut rejected = Vec::new();
        for track in self.tracks.values().filter(|t| t.status == TrackStatus::Active) {
            let n = track.events.partition_point(|e| e.timestamp <= tc);
            let events = &track.events[..n];
            match triangulate_track(&states, &self.prior, &k, events, self.config.landmark_min_parallax_deg, gate)? {
                TrackInit::Wait => {}
                TrackInit::Outlier => rejected.push(track.track_id),
                TrackInit::Landmark(lm) => {
                    assigned.push((track.track_id, landmarks.len(), n));
                    landmarks.push(lm);
                }
            }
        }
        if landmarks.len() < self.config.bootstrap_min_tracks {
            return Ok(None);
        }

        let pending = std::mem::take(&mut self.pending_knot_times);
        let saved = (self.graph.clone(), self.values.clone(), self.tracks.clone(), self.stats.clone());
        match self.commit_bootstrap(states, landmarks, pose0, guess.baseline, &assigned, rejected, tc)? {
            Some(done) => Ok(Some(done)),
            None => {
                log::debug!("bootstrap refinement at t = {tc} is ill-conditioned, deferring");
                (self.graph, self.values, self.tracks, self.stats) = saved;
                self.bootstrap_priors.clear();
                self.snapshot = Arc::new(TrajectoryGP::new(self.prior));
                self.phase = Phase::Bootstrapping;
                self.pending_knot_times = pending;
                self.graph_changed = false;
                self.errors_fresh = false;
                Ok(None)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn commit_bootstrap(
        &mut self,
        states: Vec<ControlState<T>>,
        landmarks: Vec<Landmark<T>>,
        pose0: SE3Pose<T>,
        baseline: T,
        assigned: &[(u64, usize, usize)],
        rejected: Vec<u64>,
        tc: T,
    ) -> Result<Option<(GaussNewtonReport<T>, Vec<u64>)>, EngineError> {
        let n_states = states.len();
        self.values = Values::new(states, landmarks);
        for j in 1..n_states {
            let dt = self.values.states[j].timestamp - self.values.states[j - 1].timestamp;
            self.graph.add(Factor::GpPrior(GpPriorFactor::new(j - 1, j, dt, &self.prior)?));
        }
        let info = self.config.gauge_information;
        self.graph.add(Factor::Gauge(GaugePriorFactor::Pose { target: 0, mean: pose0, information: Matrix6::identity() * info }));
        self.graph.add(Factor::Gauge(GaugePriorFactor::Scale {
            target: n_states - 1,
            anchor: *pose0.translation(),
            distance: baseline,
            information: info,
        }));
        let sigma = self.config.bootstrap_landmark_sigma;
        for (i, lm) in self.values.landmarks.iter().enumerate() {
            self.bootstrap_priors.push(self.graph.add(Factor::Gauge(GaugePriorFactor::Point {
                target: i,
                mean: lm.position,
                information: Matrix3::identity() / (sigma * sigma),
            })));
        }
        for &(id, lm, n) in assigned {
            let track = self.tracks.get_mut(&id).expect("track exists");
            track.landmark = Some(lm);
            track.init_attempted_at = n;
        }
        let mut demoted = Vec::new();
        for id in rejected {
            self.tracks.get_mut(&id).expect("track exists").status = TrackStatus::Outlier;
            self.stats.demoted_tracks.push(id);
            demoted.push(id);
        }
        self.phase = Phase::Running;
        self.stats.bootstrap_time = Some(tc);
        let ids: Vec<u64> = self.tracks.keys().copied().collect();
        for id in ids {
            self.attach_pending(id)?;
        }
        self.mark_changed();

        let gross = self.config.outlier_avg_reproj_px * T::lit(BOOTSTRAP_GROSS_FACTOR);
        if self.solve(ResolveMode::Batch, None)?.1 {
            return Ok(None);
        }
        demoted.extend(self.demote_above(gross)?);
        if self.solve(ResolveMode::Batch, None)?.1 {
            return Ok(None);
        }
        demoted.extend(self.remove_outlier_tracks()?);
        for &i in &self.bootstrap_priors {
            self.graph.set_enabled(i, false);
        }
        self.mark_changed();
        let (report, diverged) = self.solve(ResolveMode::Batch, None)?;
        if diverged {
            return Ok(None);
        }
        Ok(Some((report, demoted)))
    }

    /// Demotes active tracks whose mean reprojection error over their events
    /// exceeds `outlier_avg_reproj_px`. Demotion is permanent.
    pub fn remove_outlier_tracks(&mut self) -> Result<Vec<u64>, EngineError> {
        self.demote_above(self.config.outlier_avg_reproj_px)
    }

    fn demote_above(&mut self, threshold: T) -> Result<Vec<u64>, EngineError> {
        if self.phase != Phase::Running {
            return Ok(Vec::new());
        }
        if !self.errors_fresh {
            self.graph.refresh_errors(&self.values)?;
            self.errors_fresh = true;
        }
        let mut demoted = Vec::new();
        for track in self.tracks.values_mut() {
            if track.status != TrackStatus::Active || track.factors.is_empty() {
                continue;
            }
            let (mut sum, mut n) = (T::zero(), 0usize);
            for &f in &track.factors {
                if let Some(e) = self.graph.last_error_norm(f) {
                    sum += e;
                    n += 1;
                }
            }
            // A track seen only from behind the camera is as bad as it gets.
            if n == 0 || sum / T::lit(n as f64) > threshold {
                for &f in &track.factors {
                    self.graph.set_enabled(f, false);
                }
                track.status = TrackStatus::Outlier;
                demoted.push(track.track_id);
            }
        }
        if !demoted.is_empty() {
            self.stats.demoted_tracks.extend_from_slice(&demoted);
            // Disabled factors leave stale norms behind; nothing else changed.
            self.graph_changed = true;
        }
        Ok(demoted)
    }

    /// Re-optimizes. `Warm` reuses cached Jacobians of variables that moved
    /// less than `relin_threshold`; `Batch` relinearizes everything.
    pub fn resolve(&mut self, mode: ResolveMode) -> Result<GaussNewtonReport<T>, EngineError> {
        if self.phase != Phase::Running {
            return Err(EngineError::NotBootstrapped);
        }
        match self.solve(mode, self.config.fixed_lag)? {
            (report, false) => Ok(report),
            (report, true) => Err(EngineError::Diverged { best_cost: report.final_cost.as_f64() }),
        }
    }

    /// Warm solve for the ingest path: divergence keeps the best values and
    /// is only logged, so the stream can continue.
    fn online_solve(&mut self) -> Result<GaussNewtonReport<T>, EngineError> {
        let (report, diverged) = self.solve(ResolveMode::Warm, self.config.fixed_lag)?;
        if diverged {
            log::warn!("warm solve diverged, kept best cost {}", report.final_cost);
        }
        Ok(report)
    }

    /// Runs Gauss-Newton and commits its values. A diverged run commits the
    /// best values it saw and returns `true` alongside its report.
    fn solve(&mut self, mode: ResolveMode, lag: Option<usize>) -> Result<(GaussNewtonReport<T>, bool), EngineError> {
        if !self.graph_changed {
            let report = GaussNewtonReport {
                iterations: 0,
                initial_cost: self.last_cost,
                final_cost: self.last_cost,
                cost_trace: Vec::new(),
                converged: true,
                linearizations: 0,
            };
            return Ok((report, false));
        }
        self.apply_fixed_lag(lag);
        let relinearization = match mode {
            ResolveMode::Warm => Relinearization::Selective { threshold: self.config.relin_threshold },
            ResolveMode::Batch => Relinearization::Full,
        };
        let cfg = GaussNewtonConfig {
            max_iters: self.config.max_iterations,
            abs_tol: self.config.abs_tol,
            rel_tol: self.config.rel_tol,
            relinearization,
        };
        let (values, report, diverged) = match gauss_newton(&mut self.graph, self.values.clone(), &cfg) {
            Ok((v, r)) => (v, r, false),
            Err(SolveError::Diverged { best, report }) => (*best, report, true),
            Err(SolveError::Graph(e)) => return Err(e.into()),
        };
        self.values = values;
        self.snapshot = Arc::new(TrajectoryGP::from_knots(self.prior, self.values.states.clone())?);
        self.graph_changed = false;
        self.errors_fresh = true;
        self.events_since_solve = 0;
        self.last_cost = report.final_cost;
        self.stats.solves += 1;
        self.stats.gn_iterations += report.iterations;
        self.stats.cost_trace.extend_from_slice(&report.cost_trace);
        if diverged {
            self.stats.diverged_solves += 1;
        }
        Ok((report, diverged))
    }

    /// Freezes knots older than the window and landmarks that no longer
    /// touch a free knot; `None` frees everything.
    fn apply_fixed_lag(&mut self, lag: Option<usize>) {
        let n = self.values.states.len();
        let first_free = lag.map_or(0, |w| n.saturating_sub(w));
        for i in 0..n {
            self.graph.set_frozen(VariableIndex::state(i), i < first_free);
        }
        for track in self.tracks.values() {
            let Some(lm) = track.landmark else { continue };
            let touches = track.factors.last().is_some_and(|&f| match self.graph.factor(f) {
                Factor::Reprojection(r) => r.right_state >= first_free,
                _ => true,
            });
            self.graph.set_frozen(VariableIndex::landmark(lm), !touches);
        }
    }

    /// Ends the stream: adds a last knot for trailing events, frees every
    /// variable and runs a batch solve followed by an outlier pass.
    pub fn finalize(&mut self) -> Result<GaussNewtonReport<T>, EngineError> {
        if self.phase != Phase::Running {
            return Err(EngineError::NotBootstrapped);
        }
        let last_knot = self.last_knot_time().expect("running engine has knots");
        if let Some(t) = self.last_timestamp.filter(|&t| t > last_knot) {
            self.insert_control_state(t)?;
            let ids: Vec<u64> = self.tracks.keys().copied().collect();
            for id in ids {
                self.attach_pending(id)?;
            }
        }
        self.mark_changed();
        let (mut report, mut diverged) = self.solve(ResolveMode::Batch, None)?;
        if !self.remove_outlier_tracks()?.is_empty() {
            (report, diverged) = self.solve(ResolveMode::Batch, None)?;
        }
        if diverged {
            return Err(EngineError::Diverged { best_cost: report.final_cost.as_f64() });
        }
        Ok(report)
    }

    /// Mean reprojection error in pixels over the enabled event factors at
    /// the current values.
    pub fn mean_reprojection_error(&mut self) -> Result<T, EngineError> {
        if !self.errors_fresh {
            self.graph.refresh_errors(&self.values)?;
            self.errors_fresh = true;
        }
        let (mut sum, mut n) = (T::zero(), 0usize);
        for track in self.tracks.values().filter(|t| t.status == TrackStatus::Active) {
            for &f in &track.factors {
                if let Some(e) = self.graph.last_error_norm(f) {
                    sum += e;
                    n += 1;
                }
            }
        }
        Ok(if n == 0 { T::zero() } else { sum / T::lit(n as f64) })
    }

    /// Serializes the full engine state (except the initializer) as JSON.
    pub fn checkpoint(&self) -> Result<String, EngineError> {
        let cp = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            graph: self.graph.clone(),
            values: self.values.clone(),
            tracks: self.tracks.clone(),
            phase: self.phase,
            last_timestamp: self.last_timestamp,
            pending_knot_times: self.pending_knot_times.clone(),
            bootstrap_priors: self.bootstrap_priors.clone(),
            events_since_solve: self.events_since_solve,
            graph_changed: self.graph_changed,
            errors_fresh: self.errors_fresh,
            last_cost: self.last_cost,
            stats: self.stats.clone(),
        };
        serde_json::to_string(&cp).map_err(|e| EngineError::Checkpoint(e.to_string()))
    }

    /// Rebuilds an engine from [`checkpoint`](Self::checkpoint) output.
    pub fn restore(checkpoint: &str, initializer: Box<dyn TwoViewInitializer<T>>) -> Result<Self, EngineError> {
        let cp: Checkpoint<T> = serde_json::from_str(checkpoint).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        if cp.format != CHECKPOINT_FORMAT {
            return Err(EngineError::Checkpoint(format!("unknown format {:?}", cp.format)));
        }
        cp.config.validate()?;
        let prior = WnoaPrior::from_diagonal(cp.config.qc_diagonal)?;
        let snapshot = if cp.phase == Phase::Running {
            TrajectoryGP::from_knots(prior, cp.values.states.clone())?
        } else {
            TrajectoryGP::new(prior)
        };
        Ok(Self {
            config: cp.config,
            prior,
            graph: cp.graph,
            values: cp.values,
            tracks: cp.tracks,
            phase: cp.phase,
            last_timestamp: cp.last_timestamp,
            pending_knot_times: cp.pending_knot_times,
            bootstrap_priors: cp.bootstrap_priors,
            events_since_solve: cp.events_since_solve,
            graph_changed: cp.graph_changed,
            errors_fresh: cp.errors_fresh,
            last_cost: cp.last_cost,
            stats: cp.stats,
            snapshot: Arc::new(snapshot),
            initializer,
        })
    }
}
