//! Factor graph over control states and landmarks: assembly of the sparse
//! normal equations and the Gauss-Newton loop.
//!
//! # Dump format
//!
//! [`FactorGraph::dump`] writes one record per line, variables first (states
//! then landmarks, by ordinal) and factors in insertion order:
//!
//! ```text
//! var state <ordinal> t=<seconds> <free|frozen|unused>
//! var landmark <ordinal> <free|frozen|unused>
//! factor <index> reprojection landmark=<o> left=<o> right=<o> t=<seconds> z=<u>,<v> track=<id|-> <enabled|disabled>
//! factor <index> gp_prior left=<o> right=<o> <enabled|disabled>
//! factor <index> gauge_<pose|scale|velocity|point> target=<o> <enabled|disabled>
//! ```
//!
//! Floats use `{:.9}`.

mod factors;
mod solver;
mod sparse;

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::camera::{CameraError, CameraIntrinsics, Landmark};
use crate::gp::{ControlState, GpError, Vector12};
use crate::lie::{LieError, SE3Pose};
use crate::scalar::Real;

pub use factors::{
    Factor, FactorLinearization, GaugePriorFactor, GpPriorFactor, ReprojectionFactor, ReprojectionLinearization,
    DEFAULT_PIXEL_SIGMA,
};
pub use solver::{gauss_newton, GaussNewtonConfig, GaussNewtonReport, SolveError};
pub use sparse::{minimum_degree_ordering, solve_normal_equations, BlockCholesky, BlockLayout, SparseBlockSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariableKind {
    ControlState,
    Landmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VariableIndex {
    pub kind: VariableKind,
    pub ordinal: usize,
}

impl VariableIndex {
    pub const fn state(ordinal: usize) -> Self {
        Self { kind: VariableKind::ControlState, ordinal }
    }

    pub const fn landmark(ordinal: usize) -> Self {
        Self { kind: VariableKind::Landmark, ordinal }
    }

    /// Tangent dimension.
    pub const fn dim(&self) -> usize {
        match self.kind {
            VariableKind::ControlState => 12,
            VariableKind::Landmark => 3,
        }
    }
}

impl fmt::Display for VariableIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariableKind::ControlState => write!(f, "state {}", self.ordinal),
            VariableKind::Landmark => write!(f, "landmark {}", self.ordinal),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("normal equations are rank deficient at {variable} (missing gauge prior or unobserved variable?)")]
    RankDeficient { variable: VariableIndex },
    #[error("unknown variable {0}")]
    MissingVariable(VariableIndex),
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error(transparent)]
    Camera(#[from] CameraError),
}

/// Current estimate of every variable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Values<T: Real> {
    pub states: Vec<ControlState<T>>,
    pub landmarks: Vec<Landmark<T>>,
}

impl<T: Real> Values<T> {
    pub fn new(states: Vec<ControlState<T>>, landmarks: Vec<Landmark<T>>) -> Self {
        Self { states, landmarks }
    }

    pub fn state(&self, i: usize) -> Result<&ControlState<T>, GraphError> {
        self.states.get(i).ok_or(GraphError::MissingVariable(VariableIndex::state(i)))
    }

    pub fn landmark(&self, i: usize) -> Result<&Landmark<T>, GraphError> {
        self.landmarks.get(i).ok_or(GraphError::MissingVariable(VariableIndex::landmark(i)))
    }

    pub fn contains(&self, var: VariableIndex) -> bool {
        match var.kind {
            VariableKind::ControlState => var.ordinal < self.states.len(),
            VariableKind::Landmark => var.ordinal < self.landmarks.len(),
        }
    }

    /// Applies a stacked increment laid out by `layout`.
    pub fn retract(&self, layout: &BlockLayout, delta: &DVector<T>) -> Result<Self, GraphError> {
        let mut out = self.clone();
        for (b, var) in layout.vars().iter().enumerate() {
            let off = layout.offset(b);
            match var.kind {
                VariableKind::ControlState => {
                    let d = Vector12::from_column_slice(&delta.as_slice()[off..off + 12]);
                    out.states[var.ordinal] = self.state(var.ordinal)?.retract(&d)?;
                }
                VariableKind::Landmark => {
                    let p = &mut out.landmarks[var.ordinal].position;
                    *p += delta.rows(off, 3);
                }
            }
        }
        Ok(out)
    }

    /// Tangent-space distance of one variable between two value sets.
    pub fn distance(&self, other: &Self, var: VariableIndex) -> Result<T, GraphError> {
        Ok(match var.kind {
            VariableKind::ControlState => other.state(var.ordinal)?.local_coordinates(self.state(var.ordinal)?)?.norm(),
            VariableKind::Landmark => (self.landmark(var.ordinal)?.position - other.landmark(var.ordinal)?.position).norm(),
        })
    }
}

/// How `assemble` treats cached Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relinearization<T> {
    /// Every active factor is relinearized.
    Full,
    /// Factors are relinearized only when one of their variables moved more
    /// than `threshold` (tangent norm) since its last linearization point;
    /// otherwise the cached Jacobian is used with a fresh error.
    Selective { threshold: T },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
struct FactorEntry<T: Real> {
    factor: Factor<T>,
    enabled: bool,
    cache: LinearizationCache<T>,
}

impl<T: Real> FactorEntry<T> {
    fn new(factor: Factor<T>, enabled: bool) -> Self {
        Self { factor, enabled, cache: LinearizationCache::default() }
    }

    fn factor_vars(&self) -> SmallVec<[VariableIndex; 3]> {
        self.factor.variables()
    }
}

/// Per-variable boolean flags indexed like [`Values`].
#[derive(Debug, Clone)]
struct VarFlags {
    states: Vec<bool>,
    landmarks: Vec<bool>,
}

impl VarFlags {
    fn new<T: Real>(values: &Values<T>) -> Self {
        Self { states: vec![false; values.states.len()], landmarks: vec![false; values.landmarks.len()] }
    }

    fn set(&mut self, v: VariableIndex) {
        match v.kind {
            VariableKind::ControlState => self.states[v.ordinal] = true,
            VariableKind::Landmark => self.landmarks[v.ordinal] = true,
        }
    }

    fn get(&self, v: VariableIndex) -> bool {
        match v.kind {
            VariableKind::ControlState => self.states[v.ordinal],
            VariableKind::Landmark => self.landmarks[v.ordinal],
        }
    }

    /// Set flags, states then landmarks, by ordinal.
    fn iter(&self) -> impl Iterator<Item = VariableIndex> + '_ {
        let states = self.states.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| VariableIndex::state(i));
        let landmarks = self.landmarks.iter().enumerate().filter(|(_, f)| **f).map(|(i, _)| VariableIndex::landmark(i));
        states.chain(landmarks)
    }
}

/// Cached Jacobian of one factor, plus for event factors the interpolated
/// camera pose keyed by the bracketing knots it was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
struct LinearizationCache<T: Real> {
    jacobian: Option<DMatrix<T>>,
    /// Only the landmark columns of `jacobian` are valid.
    partial: bool,
    interpolated: Option<(ControlState<T>, ControlState<T>, SE3Pose<T>)>,
    /// Error norm at the last assembly, `None` when inactive.
    error_norm: Option<T>,
}

impl<T: Real> Default for LinearizationCache<T> {
    fn default() -> Self {
        Self { jacobian: None, partial: false, interpolated: None, error_norm: None }
    }
}

impl<T: Real> LinearizationCache<T> {
    fn update_reprojection(
        &mut self,
        f: &ReprojectionFactor<T>,
        vars: &[VariableIndex],
        values: &Values<T>,
        k: &CameraIntrinsics<T>,
        dirty: &VarFlags,
        frozen: &VarFlags,
    ) -> Result<Option<(DVector<T>, bool)>, GraphError> {
        let (l, r) = (values.state(f.left_state)?, values.state(f.right_state)?);
        let lm = values.landmark(f.landmark)?;
        let cached_pose = match &self.interpolated {
            Some((cl, cr, pose)) if cl == l && cr == r => Some(*pose),
            _ => None,
        };
        let states_frozen = frozen.get(vars[0]) && frozen.get(vars[1]);
        let stale = self.jacobian.is_none() || vars.iter().any(|v| dirty.get(*v)) || (self.partial && !states_frozen);
        if !stale {
            let pose = match cached_pose {
                Some(p) => p,
                None => {
                    let p = f.interpolate_pose(values)?;
                    self.interpolated = Some((*l, *r, p));
                    p
                }
            };
            return Ok(f.error_at_pose(&pose, lm, k).map(|e| (e, false)));
        }
        if let (true, Some(pose)) = (states_frozen, cached_pose) {
            let Some((e, d_lm)) = f.landmark_jacobian_at_pose(&pose, lm, k) else { return Ok(None) };
            let mut jac = DMatrix::zeros(2, 27);
            jac.view_mut((0, 24), (2, 3)).copy_from(&d_lm);
            self.jacobian = Some(jac);
            self.partial = true;
            return Ok(Some((e, true)));
        }
        match f.linearize_with_pose(values, k)? {
            Some((lin, pose)) => {
                self.interpolated = Some((*l, *r, pose));
                self.jacobian = Some(lin.jacobian);
                self.partial = false;
                Ok(Some((lin.error, true)))
            }
            None => Ok(None),
        }
    }
}

/// Output of [`FactorGraph::assemble`].
#[derive(Debug, Clone)]
pub struct Assembly<T: Real> {
    pub system: SparseBlockSystem<T>,
    pub cost: T,
    pub active_factors: usize,
    pub inactive_factors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FactorGraph<T: Real> {
    intrinsics: CameraIntrinsics<T>,
    factors: Vec<FactorEntry<T>>,
    frozen: BTreeSet<VariableIndex>,
    lin_point: Option<Values<T>>,
    /// Variables whose linearization point is set in `lin_point`.
    linearized: BTreeSet<VariableIndex>,
    linearizations: usize,
}

impl<T: Real> FactorGraph<T> {
    pub fn new(intrinsics: CameraIntrinsics<T>) -> Self {
        Self {
            intrinsics,
            factors: Vec::new(),
            frozen: BTreeSet::new(),
            lin_point: None,
            linearized: BTreeSet::new(),
            linearizations: 0,
        }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics<T> {
        &self.intrinsics
    }

    /// Adds a factor, returning its index.
    pub fn add(&mut self, factor: Factor<T>) -> usize {
        self.factors.push(FactorEntry::new(factor, true));
        self.factors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn factor(&self, i: usize) -> &Factor<T> {
        &self.factors[i].factor
    }

    pub fn factors(&self) -> impl Iterator<Item = &Factor<T>> {
        self.factors.iter().map(|e| &e.factor)
    }

    pub fn is_enabled(&self, i: usize) -> bool {
        self.factors[i].enabled
    }

    /// Enables or disables a factor. Disabled factors contribute nothing.
    pub fn set_enabled(&mut self, i: usize, enabled: bool) {
        self.factors[i].enabled = enabled;
    }

    /// Replaces a factor in place (its cached Jacobian is dropped).
    pub fn replace(&mut self, i: usize, factor: Factor<T>) {
        self.factors[i] = FactorEntry::new(factor, self.factors[i].enabled);
    }

    /// Error norm of factor `i` at the most recent assembly (`None` if it
    /// was disabled or inactive then).
    pub fn last_error_norm(&self, i: usize) -> Option<T> {
        self.factors[i].cache.error_norm
    }

    pub fn enabled_count(&self) -> usize {
        self.factors.iter().filter(|e| e.enabled).count()
    }

    /// Frozen variables keep their value and are left out of the solve.
    pub fn set_frozen(&mut self, var: VariableIndex, frozen: bool) {
        if frozen {
            self.frozen.insert(var);
        } else {
            self.frozen.remove(&var);
        }
    }

    pub fn is_frozen(&self, var: VariableIndex) -> bool {
        self.frozen.contains(&var)
    }

    /// Total factor Jacobian evaluations so far.
    pub fn linearization_count(&self) -> usize {
        self.linearizations
    }

    /// Drops every cached linearization.
    pub fn invalidate_linearization(&mut self) {
        self.lin_point = None;
        self.linearized.clear();
        for e in &mut self.factors {
            e.cache = LinearizationCache::default();
        }
    }

    fn check_variables(&self, values: &Values<T>) -> Result<(), GraphError> {
        for e in &self.factors {
            for v in e.factor.variables() {
                if !values.contains(v) {
                    return Err(GraphError::MissingVariable(v));
                }
            }
        }
        Ok(())
    }

    /// Negative log posterior (up to a constant) of the enabled factors.
    pub fn cost(&self, values: &Values<T>) -> Result<T, GraphError> {
        self.check_variables(values)?;
        let k = &self.intrinsics;
        let terms: Result<Vec<T>, GraphError> = self
            .factors
            .par_iter()
            .filter(|e| e.enabled)
            .map(|e| {
                Ok(match e.factor.error(values, k)? {
                    Some(err) => e.factor.cost_of(&err),
                    None => T::zero(),
                })
            })
            .collect();
        Ok(terms?.into_iter().fold(T::zero(), |a, b| a + b))
    }

    /// Errors of the enabled factors (`None` for inactive ones), in factor order.
    pub fn errors(&self, values: &Values<T>) -> Result<Vec<Option<DVector<T>>>, GraphError> {
        let k = &self.intrinsics;
        self.factors
            .par_iter()
            .map(|e| if e.enabled { e.factor.error(values, k) } else { Ok(None) })
            .collect()
    }

    /// Recomputes the cached error norms at `values` without relinearizing.
    pub fn refresh_errors(&mut self, values: &Values<T>) -> Result<(), GraphError> {
        self.check_variables(values)?;
        let k = self.intrinsics;
        self.factors.par_iter_mut().try_for_each(|e| {
            e.cache.error_norm = if e.enabled { e.factor.error(values, &k)?.map(|x| x.norm()) } else { None };
            Ok(())
        })
    }

    /// Variables of enabled factors that are not frozen, states then
    /// landmarks, by ordinal.
    pub fn free_variables(&self) -> Vec<VariableIndex> {
        let mut set = BTreeSet::new();
        for e in self.factors.iter().filter(|e| e.enabled) {
            for v in e.factor.variables() {
                if !self.frozen.contains(&v) {
                    set.insert(v);
                }
            }
        }
        set.into_iter().collect()
    }

    fn dirty_variables(&mut self, values: &Values<T>, policy: Relinearization<T>) -> Result<VarFlags, GraphError> {
        let mut used = VarFlags::new(values);
        for e in self.factors.iter().filter(|e| e.enabled) {
            for v in e.factor.variables() {
                used.set(v);
            }
        }
        let mut dirty = VarFlags::new(values);
        let lin = self.lin_point.get_or_insert_with(|| values.clone());
        // Keep the linearization snapshot sized like the current values.
        lin.states.extend_from_slice(&values.states[lin.states.len().min(values.states.len())..]);
        lin.landmarks.extend_from_slice(&values.landmarks[lin.landmarks.len().min(values.landmarks.len())..]);
        for v in used.iter() {
            let moved = match policy {
                Relinearization::Full => true,
                Relinearization::Selective { threshold } => {
                    !self.linearized.contains(&v) || values.distance(lin, v)? > threshold
                }
            };
            if moved {
                match v.kind {
                    VariableKind::ControlState => lin.states[v.ordinal] = values.states[v.ordinal],
                    VariableKind::Landmark => lin.landmarks[v.ordinal] = values.landmarks[v.ordinal],
                }
                self.linearized.insert(v);
                dirty.set(v);
            }
        }
        Ok(dirty)
    }

    /// Builds `A δ = b` at `values`, with `A = Σ JᵀWJ` and `b = −Σ JᵀWe`
    /// over the active factors.
    pub fn assemble(&mut self, values: &Values<T>, policy: Relinearization<T>) -> Result<Assembly<T>, GraphError> {
        self.check_variables(values)?;
        let dirty = self.dirty_variables(values, policy)?;
        let mut frozen = VarFlags::new(values);
        for v in &self.frozen {
            if values.contains(*v) {
                frozen.set(*v);
            }
        }
        let k = self.intrinsics;

        // Per-factor work is independent; results are merged below in factor order.
        let results: Vec<Result<Option<(DVector<T>, bool)>, GraphError>> = self
            .factors
            .par_iter_mut()
            .map(|e| {
                if !e.enabled {
                    return Ok(None);
                }
                match &e.factor {
                    Factor::Reprojection(f) => e.cache.update_reprojection(f, &e.factor_vars(), values, &k, &dirty, &frozen),
                    _ => {
                        let stale = e.cache.jacobian.is_none() || e.factor.variables().iter().any(|v| dirty.get(*v));
                        if stale {
                            let Some(lin) = e.factor.linearize(values, &k)? else { return Ok(None) };
                            e.cache.jacobian = Some(lin.jacobian);
                            Ok(Some((lin.error, true)))
                        } else {
                            Ok(e.factor.error(values, &k)?.map(|err| (err, false)))
                        }
                    }
                }
            })
            .collect();

        let mut active = vec![false; self.factors.len()];
        let mut errors = Vec::with_capacity(self.factors.len());
        let mut inactive = 0;
        for (i, r) in results.into_iter().enumerate() {
            let r = r?;
            self.factors[i].cache.error_norm = r.as_ref().map(|(e, _)| e.norm());
            match r {
                Some((err, fresh)) => {
                    if fresh {
                        self.linearizations += 1;
                    }
                    active[i] = true;
                    errors.push(Some(err));
                }
                None => {
                    if self.factors[i].enabled {
                        inactive += 1;
                    }
                    errors.push(None);
                }
            }
        }

        let mut free = VarFlags::new(values);
        for (i, e) in self.factors.iter().enumerate() {
            if active[i] {
                for v in e.factor.variables() {
                    if !frozen.get(v) {
                        free.set(v);
                    }
                }
            }
        }
        let layout = BlockLayout::new(free.iter().collect());
        let mut system = SparseBlockSystem::zeros(layout);
        let mut cost = T::zero();
        let mut active_factors = 0;
        for (i, e) in self.factors.iter().enumerate() {
            let Some(err) = &errors[i] else { continue };
            active_factors += 1;
            cost += e.factor.cost_of(err);
            let positions: SmallVec<[Option<usize>; 3]> =
                e.factor.variables().iter().map(|v| system.layout().position(v)).collect();
            if positions.iter().all(Option::is_none) {
                continue;
            }
            let w = e.factor.information();
            let jac = e.cache.jacobian.as_ref().expect("active factor has a Jacobian");
            let wj = &w * jac;
            let we = &w * err;
            let mut col = 0;
            let blocks: SmallVec<[(Option<usize>, usize, usize); 3]> = e
                .factor
                .variables()
                .into_iter()
                .zip(positions)
                .map(|(v, pos)| {
                    let b = (pos, col, v.dim());
                    col += v.dim();
                    b
                })
                .collect();
            for &(pa, ca, da) in &blocks {
                let Some(pa) = pa else { continue };
                system.sub_rhs_tr(pa, jac.columns(ca, da), &we);
                for &(pb, cb, db) in &blocks {
                    match pb {
                        Some(pb) if pb <= pa => system.add_gram(pa, pb, jac.columns(ca, da), wj.columns(cb, db)),
                        _ => {}
                    }
                }
            }
        }
        system.symmetrize_diagonal();
        Ok(Assembly { system, cost, active_factors, inactive_factors: inactive })
    }

    /// Diffable text dump, see the module docs for the grammar.
    pub fn dump(&self, values: &Values<T>) -> String {
        let used: BTreeSet<VariableIndex> = self
            .factors
            .iter()
            .filter(|e| e.enabled)
            .flat_map(|e| e.factor.variables())
            .collect();
        let status = |v: VariableIndex| {
            if self.frozen.contains(&v) {
                "frozen"
            } else if used.contains(&v) {
                "free"
            } else {
                "unused"
            }
        };
        let mut out = String::new();
        for (i, s) in values.states.iter().enumerate() {
            let _ = writeln!(out, "var state {i} t={:.9} {}", s.timestamp.as_f64(), status(VariableIndex::state(i)));
        }
        for i in 0..values.landmarks.len() {
            let _ = writeln!(out, "var landmark {i} {}", status(VariableIndex::landmark(i)));
        }
        for (i, e) in self.factors.iter().enumerate() {
            let en = if e.enabled { "enabled" } else { "disabled" };
            let _ = match &e.factor {
                Factor::Reprojection(f) => writeln!(
                    out,
                    "factor {i} reprojection landmark={} left={} right={} t={:.9} z={:.9},{:.9} track={} {en}",
                    f.landmark,
                    f.left_state,
                    f.right_state,
                    f.event.timestamp.as_f64(),
                    f.event.pixel.x.as_f64(),
                    f.event.pixel.y.as_f64(),
                    f.event.track_id.map_or_else(|| "-".to_string(), |t| t.to_string()),
                ),
                Factor::GpPrior(f) => writeln!(out, "factor {i} gp_prior left={} right={} {en}", f.left_state, f.right_state),
                Factor::Gauge(g) => {
                    let kind = match g {
                        GaugePriorFactor::Pose { .. } => "pose",
                        GaugePriorFactor::Scale { .. } => "scale",
                        GaugePriorFactor::Velocity { .. } => "velocity",
                        GaugePriorFactor::Point { .. } => "point",
                    };
                    writeln!(out, "factor {i} gauge_{kind} target={} {en}", g.target().ordinal)
                }
            };
        }
        out
    }
}
