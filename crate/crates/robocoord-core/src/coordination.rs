//! Intersection geometry, the coordinator database, robust exit-time
//! optimization, safety-constraint checks, and the event handlers of the
//! coordination protocol.
//!
//! The coordinator is a passive database: vehicles are indexed by entry
//! order, and each one plans against the stored trajectories (and published
//! uncertainty characterizations) of every lower-indexed vehicle. Planning
//! minimizes the exit time of an unconstrained cubic subject to worst-case
//! tightened lateral-headway, rear-end, and speed constraints; the
//! tightening shrinks every gap by the extreme endpoints of the published
//! confidence tubes, so the constraints hold for all in-tube realizations.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::gp::{GpError, GpModel};
use crate::trajectory::{
    feasible_exit_window, solve_coefficients, time_at_position, within_limits,
    BoundaryConditions, MotionLimits, PolyCoefficients, TrajectoryError,
};
use crate::uncertainty::{build_tube, ConfidenceLevels, ConfidenceTube, UncertaintyError};

/// Queue index assigned at entry; lower ids entered earlier and plan first.
pub type CavId = u32;
/// Index into the layout's path table.
pub type PathId = usize;
/// Identifier of a conflict point shared by two paths.
pub type ConflictId = u32;

/// Time grid step for rear-end and speed constraint checks, s.
pub const CONSTRAINT_DT: f64 = 0.05;
/// Coarse exit-time scan step, s.
pub const TF_SCAN_DT: f64 = 0.1;
/// Bisection tolerance on the exit-time feasibility boundary, s.
pub const TF_REFINE_TOL: f64 = 1e-4;
/// Position grid step for confidence tubes, m.
pub const TUBE_GRID_STEP: f64 = 1.0;
/// Constraint slacks above this (negative) tolerance count as satisfied.
pub const SLACK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum CoordinationError {
    InvalidLayout(&'static str),
    InvalidSafetyConfig(&'static str),
    UnknownPath(PathId),
    UnknownCav(CavId),
    /// The conflict point is not shared by both plans' paths.
    ConflictNotShared(ConflictId),
    /// Rear-end checks require a same-path predecessor pairing.
    NotAPredecessor { leader: CavId, follower: CavId },
    Trajectory(TrajectoryError),
    Uncertainty(UncertaintyError),
    GpFit(GpError),
}

impl fmt::Display for CoordinationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidLayout(msg) => write!(f, "invalid layout: {msg}"),
            Self::InvalidSafetyConfig(msg) => write!(f, "invalid safety config: {msg}"),
            Self::UnknownPath(id) => write!(f, "unknown path {id}"),
            Self::UnknownCav(id) => write!(f, "unknown CAV {id}"),
            Self::ConflictNotShared(id) => write!(f, "conflict {id} not shared by both paths"),
            Self::NotAPredecessor { leader, follower } => write!(
                f,
                "CAV {leader} does not precede CAV {follower} on the same path"
            ),
            Self::Trajectory(e) => write!(f, "trajectory error: {e}"),
            Self::Uncertainty(e) => write!(f, "uncertainty error: {e}"),
            Self::GpFit(e) => write!(f, "GP fit error: {e}"),
        }
    }
}

impl core::error::Error for CoordinationError {}

impl From<TrajectoryError> for CoordinationError {
    fn from(e: TrajectoryError) -> Self {
        Self::Trajectory(e)
    }
}

impl From<UncertaintyError> for CoordinationError {
    fn from(e: UncertaintyError) -> Self {
        Self::Uncertainty(e)
    }
}

/// One path through the control zone: its length and the distances of the
/// conflict points it crosses, measured from the path entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGeometry {
    pub length: f64,
    pub conflicts: Vec<(ConflictId, f64)>,
}

/// The set of paths and the conflict points they share.
#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionLayout {
    paths: Vec<PathGeometry>,
}

impl IntersectionLayout {
    /// Validates that path lengths are positive, conflict distances strictly
    /// increasing and strictly inside the path, and that every conflict id
    /// is referenced by at least two paths.
    pub fn new(paths: Vec<PathGeometry>) -> Result<Self, CoordinationError> {
        if paths.is_empty() {
            return Err(CoordinationError::InvalidLayout("no paths"));
        }
        let mut refs: BTreeMap<ConflictId, usize> = BTreeMap::new();
        for path in &paths {
            if !(path.length > 0.0) || !path.length.is_finite() {
                return Err(CoordinationError::InvalidLayout("non-positive path length"));
            }
            let mut last = 0.0;
            for &(id, d) in &path.conflicts {
                if !(d > last) || d >= path.length {
                    return Err(CoordinationError::InvalidLayout(
                        "conflict distances must be strictly increasing inside (0, length)",
                    ));
                }
                last = d;
                *refs.entry(id).or_insert(0) += 1;
            }
        }
        if refs.values().any(|&n| n < 2) {
            return Err(CoordinationError::InvalidLayout(
                "every conflict must be shared by at least two paths",
            ));
        }
        Ok(Self { paths })
    }

    pub fn paths(&self) -> &[PathGeometry] {
        &self.paths
    }

    pub fn path(&self, id: PathId) -> Result<&PathGeometry, CoordinationError> {
        self.paths.get(id).ok_or(CoordinationError::UnknownPath(id))
    }

    /// Distance of a conflict point along a path, if the path crosses it.
    pub fn conflict_distance(&self, path: PathId, conflict: ConflictId) -> Option<f64> {
        self.paths
            .get(path)?
            .conflicts
            .iter()
            .find(|(id, _)| *id == conflict)
            .map(|(_, d)| *d)
    }

    pub fn min_path_length(&self) -> f64 {
        self.paths
            .iter()
            .map(|p| p.length)
            .fold(f64::INFINITY, f64::min)
    }

    /// The default four-leg intersection: two orthogonal two-lane roads with
    /// 3.5 m lanes, four straight movements, and two left turns exiting onto
    /// outer lanes via 13.25 m arcs. All paths are 400 m long and cross the
    /// junction around the 200 m mark; the conflict distances are the
    /// lane-center crossing points of that geometry.
    pub fn default_signal_free() -> Self {
        let paths = vec![
            // 0: west -> east
            PathGeometry {
                length: 400.0,
                conflicts: vec![(1, 198.25), (9, 199.03), (2, 201.75)],
            },
            // 1: east -> west
            PathGeometry {
                length: 400.0,
                conflicts: vec![(4, 198.25), (6, 199.03), (3, 201.75)],
            },
            // 2: north -> south
            PathGeometry {
                length: 400.0,
                conflicts: vec![(3, 198.25), (5, 200.18), (1, 201.75), (10, 202.53)],
            },
            // 3: south -> north
            PathGeometry {
                length: 400.0,
                conflicts: vec![(2, 198.25), (8, 200.18), (4, 201.75), (7, 202.53)],
            },
            // 4: west -> north left turn
            PathGeometry {
                length: 400.0,
                conflicts: vec![(5, 198.51), (6, 201.86), (7, 202.96)],
            },
            // 5: east -> south left turn
            PathGeometry {
                length: 400.0,
                conflicts: vec![(8, 198.51), (9, 201.86), (10, 202.96)],
            },
        ];
        Self::new(paths).expect("default layout is valid")
    }
}

/// Safety parameters shared by every constraint check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetyConfig {
    /// Minimum lateral time headway at a conflict point, s.
    pub t_h: f64,
    /// Standstill distance, m.
    pub gamma: f64,
    /// Reaction time, s.
    pub varphi: f64,
    pub limits: MotionLimits,
    /// Uncertainty characterization point, m.
    pub p_z: f64,
    pub levels: ConfidenceLevels,
}

impl SafetyConfig {
    pub fn validate(&self, layout: &IntersectionLayout) -> Result<(), CoordinationError> {
        if !(self.t_h > 0.0 && self.gamma > 0.0 && self.varphi > 0.0 && self.p_z > 0.0) {
            return Err(CoordinationError::InvalidSafetyConfig(
                "t_h, gamma, varphi, p_z must be positive",
            ));
        }
        self.limits.validate()?;
        self.levels.validate()?;
        if self.p_z >= layout.min_path_length() {
            return Err(CoordinationError::InvalidSafetyConfig(
                "p_z must lie strictly inside every path",
            ));
        }
        Ok(())
    }
}

/// Crossing commitment for a conflict point the vehicle has already passed:
/// the nominal crossing time and the E bounds its plan carried there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingRecord {
    pub conflict: ConflictId,
    pub t_cross: f64,
    pub e_lo: f64,
    pub e_hi: f64,
}

/// One vehicle's current plan: the cubic over the remaining distance, its
/// published tube (once characterized), and frozen crossing commitments for
/// conflicts behind the segment origin.
#[derive(Debug, Clone, PartialEq)]
pub struct CavPlan {
    pub cav_id: CavId,
    pub path: PathId,
    /// Absolute position of the segment origin along the path, m.
    pub p_offset: f64,
    /// Boundary conditions in segment coordinates (pf = remaining distance).
    pub bc: BoundaryConditions,
    /// Cubic coefficients in absolute time and segment position.
    pub phi: PolyCoefficients,
    pub plan_version: u32,
    pub tube: Option<ConfidenceTube>,
    /// Set when no exit time in the feasible window satisfied every
    /// constraint and the plan fell back to the window's upper edge.
    pub infeasible: bool,
    pub crossed: Vec<CrossingRecord>,
}

impl CavPlan {
    pub fn tf(&self) -> f64 {
        self.bc.tf
    }

    pub fn exit_speed(&self) -> f64 {
        self.phi.speed(self.bc.tf)
    }

    /// Absolute position at absolute time `t`; constant-speed extrapolation
    /// beyond the exit, clamped to the segment origin before the start.
    pub fn position_at(&self, t: f64) -> f64 {
        if t <= self.bc.t0 {
            self.p_offset
        } else if t >= self.bc.tf {
            self.p_offset + self.bc.pf + self.exit_speed() * (t - self.bc.tf)
        } else {
            self.p_offset + self.phi.position(t)
        }
    }

    pub fn speed_at(&self, t: f64) -> f64 {
        if t <= self.bc.t0 {
            self.bc.v0
        } else if t >= self.bc.tf {
            self.exit_speed()
        } else {
            self.phi.speed(t)
        }
    }

    pub fn control_at(&self, t: f64) -> f64 {
        if t < self.bc.t0 || t > self.bc.tf {
            0.0
        } else {
            self.phi.control(t)
        }
    }

    /// Nominal crossing time of an absolute position ahead of the segment
    /// origin.
    pub fn time_at_abs_position(&self, p_abs: f64) -> Result<f64, TrajectoryError> {
        time_at_position(&self.phi, &self.bc, p_abs - self.p_offset)
    }

    /// E bounds at an absolute position; zero-width without a tube.
    pub fn e_bounds_at(&self, p_abs: f64) -> (f64, f64) {
        match &self.tube {
            Some(tube) => tube.e_at_position(p_abs),
            None => (0.0, 0.0),
        }
    }

    /// F bounds at a time; zero-width without a tube.
    pub fn f_bounds_at(&self, t: f64) -> (f64, f64) {
        match &self.tube {
            Some(tube) => tube.f_at_time(t),
            None => (0.0, 0.0),
        }
    }

    /// G bounds at a time; zero-width without a tube.
    pub fn g_bounds_at(&self, t: f64) -> (f64, f64) {
        match &self.tube {
            Some(tube) => tube.g_at_time(t),
            None => (0.0, 0.0),
        }
    }

    /// Crossing time and E bounds at a conflict: computed from the live plan
    /// when the conflict lies ahead of the segment origin, otherwise taken
    /// from the frozen commitment.
    pub fn crossing_info(&self, conflict: ConflictId, distance: f64) -> Option<(f64, f64, f64)> {
        if distance > self.p_offset {
            let t = self.time_at_abs_position(distance).ok()?;
            let (e_lo, e_hi) = self.e_bounds_at(distance);
            Some((t, e_lo, e_hi))
        } else {
            self.crossed
                .iter()
                .find(|r| r.conflict == conflict)
                .map(|r| (r.t_cross, r.e_lo, r.e_hi))
        }
    }
}

/// Queue-ordered store of all plans and uncertainty characterizations.
///
/// Events are processed strictly sequentially, so the database has a single
/// writer; ids are assigned in entry order and never reused. Vehicles that
/// left the control zone move to a retained history that keeps their
/// crossing commitments visible to lateral checks and audits.
#[derive(Debug, Default)]
pub struct CoordinatorDatabase {
    active: BTreeMap<CavId, CavPlan>,
    exited: Vec<CavPlan>,
    models: BTreeMap<CavId, GpModel>,
    next_id: CavId,
}

impl CoordinatorDatabase {
    pub fn new() -> Self {
        Self {
            active: BTreeMap::new(),
            exited: Vec::new(),
            models: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn allocate_id(&mut self) -> CavId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn insert(&mut self, plan: CavPlan) {
        self.active.insert(plan.cav_id, plan);
    }

    pub fn plan(&self, id: CavId) -> Option<&CavPlan> {
        self.active.get(&id)
    }

    pub fn active_plans(&self) -> impl Iterator<Item = &CavPlan> {
        self.active.values()
    }

    pub fn active_ids(&self) -> Vec<CavId> {
        self.active.keys().copied().collect()
    }

    pub fn len_active(&self) -> usize {
        self.active.len()
    }

    pub fn exited(&self) -> &[CavPlan] {
        &self.exited
    }

    /// Moves a vehicle out of the active set, retaining its plan.
    pub fn retire(&mut self, id: CavId) -> bool {
        match self.active.remove(&id) {
            Some(plan) => {
                self.exited.push(plan);
                true
            }
            None => false,
        }
    }

    pub fn store_model(&mut self, id: CavId, model: GpModel) {
        self.models.insert(id, model);
    }

    pub fn model(&self, id: CavId) -> Option<&GpModel> {
        self.models.get(&id)
    }

    /// Nearest lower-indexed active vehicle on the same path.
    pub fn predecessor_on_path(&self, id: CavId, path: PathId) -> Option<&CavPlan> {
        self.active
            .range(..id)
            .rev()
            .map(|(_, plan)| plan)
            .find(|plan| plan.path == path)
    }

    /// Active and exited plans with ids below `id`.
    fn earlier_plans(&self, id: CavId) -> impl Iterator<Item = &CavPlan> {
        self.active
            .range(..id)
            .map(|(_, plan)| plan)
            .chain(self.exited.iter().filter(move |plan| plan.cav_id < id))
    }
}

fn worst_case_lateral_slack(mine: (f64, f64, f64), other: (f64, f64, f64), t_h: f64) -> f64 {
    let (t_i, e_i_lo, e_i_hi) = mine;
    let (t_j, e_j_lo, e_j_hi) = other;
    if t_i > t_j {
        (t_i + e_i_lo) - (t_j + e_j_hi) - t_h
    } else {
        (t_j + e_j_lo) - (t_i + e_i_hi) - t_h
    }
}

/// Worst-case lateral-headway slack (s) between two plans at a shared
/// conflict point; nonnegative means the robust constraint holds.
pub fn lateral_gap(
    plan_i: &CavPlan,
    plan_j: &CavPlan,
    conflict: ConflictId,
    layout: &IntersectionLayout,
    cfg: &SafetyConfig,
) -> Result<f64, CoordinationError> {
    let d_i = layout
        .conflict_distance(plan_i.path, conflict)
        .ok_or(CoordinationError::ConflictNotShared(conflict))?;
    let d_j = layout
        .conflict_distance(plan_j.path, conflict)
        .ok_or(CoordinationError::ConflictNotShared(conflict))?;
    let mine = plan_i
        .crossing_info(conflict, d_i)
        .ok_or(CoordinationError::ConflictNotShared(conflict))?;
    let other = plan_j
        .crossing_info(conflict, d_j)
        .ok_or(CoordinationError::ConflictNotShared(conflict))?;
    Ok(worst_case_lateral_slack(mine, other, cfg.t_h))
}

/// Worst-case rear-end slack (m) at time `t` between follower `plan_i` and
/// its same-path predecessor `plan_k`; nonnegative means the robust
/// constraint holds. The predecessor's position extrapolates at constant
/// exit speed beyond its own exit time.
pub fn rear_end_slack(
    plan_i: &CavPlan,
    plan_k: &CavPlan,
    t: f64,
    cfg: &SafetyConfig,
) -> Result<f64, CoordinationError> {
    if plan_i.path != plan_k.path || plan_k.cav_id >= plan_i.cav_id {
        return Err(CoordinationError::NotAPredecessor {
            leader: plan_k.cav_id,
            follower: plan_i.cav_id,
        });
    }
    Ok(rear_end_slack_unchecked(plan_i, plan_k, t, cfg))
}

fn rear_end_slack_unchecked(plan_i: &CavPlan, plan_k: &CavPlan, t: f64, cfg: &SafetyConfig) -> f64 {
    let (f_k_lo, _) = plan_k.f_bounds_at(t);
    let (_, f_i_hi) = plan_i.f_bounds_at(t);
    let (_, g_i_hi) = plan_i.g_bounds_at(t);
    let leader = plan_k.position_at(t) + f_k_lo;
    let follower = plan_i.position_at(t) + f_i_hi;
    let headway = cfg.gamma + cfg.varphi * (plan_i.speed_at(t) + g_i_hi);
    leader - follower - headway
}

/// Interior stationary points of the tube-free rear-end slack, which is
/// piecewise cubic in time (both cubics active, then the leader
/// extrapolating linearly).
fn rear_end_critical_times(
    plan_i: &CavPlan,
    plan_k: &CavPlan,
    varphi: f64,
    lo: f64,
    hi: f64,
    out: &mut Vec<f64>,
) {
    let pieces = [
        (lo, hi.min(plan_k.bc.tf), true),
        (plan_k.bc.tf.max(lo), hi, false),
    ];
    for (a, b, leader_cubic) in pieces {
        if b <= a {
            continue;
        }
        let (k3, k2, k1) = if leader_cubic {
            (plan_k.phi.phi3, plan_k.phi.phi2, plan_k.phi.phi1)
        } else {
            (0.0, 0.0, plan_k.exit_speed())
        };
        // d(t) = p_k - p_i - varphi*v_i up to constants; derivative quadratic.
        let c3 = k3 - plan_i.phi.phi3;
        let c2 = k2 - plan_i.phi.phi2 - varphi * 3.0 * plan_i.phi.phi3;
        let c1 = k1 - plan_i.phi.phi1 - varphi * 2.0 * plan_i.phi.phi2;
        let qa = 3.0 * c3;
        let qb = 2.0 * c2;
        let qc = c1;
        if qa.abs() < 1e-15 {
            if qb.abs() > 1e-15 {
                let root = -qc / qb;
                if root > a && root < b {
                    out.push(root);
                }
            }
            continue;
        }
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let sq = libm::sqrt(disc);
            for root in [(-qb + sq) / (2.0 * qa), (-qb - sq) / (2.0 * qa)] {
                if root > a && root < b {
                    out.push(root);
                }
            }
        }
    }
}

/// Minimum worst-case rear-end slack over `[t_from, t_to]`, checked on the
/// constraint grid plus the analytic extrema of the cubic part.
pub fn min_rear_end_slack(
    plan_i: &CavPlan,
    plan_k: &CavPlan,
    t_from: f64,
    t_to: f64,
    cfg: &SafetyConfig,
) -> f64 {
    if t_to <= t_from {
        return f64::INFINITY;
    }
    let mut min_slack = f64::INFINITY;
    let steps = ((t_to - t_from) / CONSTRAINT_DT) as usize + 1;
    for k in 0..=steps {
        let t = (t_from + k as f64 * CONSTRAINT_DT).min(t_to);
        min_slack = min_slack.min(rear_end_slack_unchecked(plan_i, plan_k, t, cfg));
        if t >= t_to {
            break;
        }
    }
    let mut critical = Vec::new();
    rear_end_critical_times(plan_i, plan_k, cfg.varphi, t_from, t_to, &mut critical);
    critical.push(plan_k.bc.tf.clamp(t_from, t_to));
    for t in critical {
        min_slack = min_slack.min(rear_end_slack_unchecked(plan_i, plan_k, t, cfg));
    }
    min_slack
}

/// Checks the robust speed bounds of a plan over its whole segment: every
/// in-tube speed realization must stay inside the limits. Without a tube
/// this reduces to the analytic speed-range check.
pub fn speed_bounds_ok(plan: &CavPlan, limits: &MotionLimits) -> bool {
    let tube = match &plan.tube {
        None => {
            let (v_lo, v_hi) = crate::trajectory::speed_range(&plan.phi, plan.bc.t0, plan.bc.tf);
            return v_lo >= limits.v_min - SLACK_TOL && v_hi <= limits.v_max + SLACK_TOL;
        }
        Some(tube) => tube,
    };
    let (t0, tf) = (plan.bc.t0, plan.bc.tf);
    let steps = ((tf - t0) / CONSTRAINT_DT) as usize + 1;
    for k in 0..=steps {
        let t = (t0 + k as f64 * CONSTRAINT_DT).min(tf);
        let v = plan.phi.speed(t);
        let (g_lo, g_hi) = tube.g_at_time(t);
        if v + g_lo < limits.v_min - SLACK_TOL || v + g_hi > limits.v_max + SLACK_TOL {
            return false;
        }
        if t >= tf {
            break;
        }
    }
    true
}

/// Inputs of one exit-time solve: the vehicle's current state, the queue
/// index it plans under, and the crossing commitments carried over from its
/// previous plan.
#[derive(Debug, Clone)]
pub struct SolveRequest {
    pub cav_id: CavId,
    pub path: PathId,
    pub t_start: f64,
    pub v_start: f64,
    pub p_start: f64,
    pub plan_version: u32,
    pub carried_crossings: Vec<CrossingRecord>,
}

struct LateralFoe {
    my_distance: f64,
    crossing: (f64, f64, f64),
}

fn collect_lateral_foes(
    req: &SolveRequest,
    db: &CoordinatorDatabase,
    layout: &IntersectionLayout,
) -> Result<Vec<LateralFoe>, CoordinationError> {
    let path_geom = layout.path(req.path)?;
    let mut foes = Vec::new();
    for &(conflict, d_mine) in &path_geom.conflicts {
        if d_mine <= req.p_start {
            continue; // already crossed; the commitment is frozen, not re-planned
        }
        for other in db.earlier_plans(req.cav_id) {
            if other.path == req.path {
                continue;
            }
            if let Some(d_other) = layout.conflict_distance(other.path, conflict) {
                if let Some(crossing) = other.crossing_info(conflict, d_other) {
                    foes.push(LateralFoe {
                        my_distance: d_mine,
                        crossing,
                    });
                }
            }
        }
    }
    Ok(foes)
}

fn build_candidate(
    req: &SolveRequest,
    tf: f64,
    remaining: f64,
    own_model: Option<&GpModel>,
    conflict_anchors: &[f64],
    cfg: &SafetyConfig,
) -> Result<CavPlan, CoordinationError> {
    let bc = BoundaryConditions {
        t0: req.t_start,
        v0: req.v_start,
        tf,
        pf: remaining,
    };
    let phi = solve_coefficients(&bc)?;
    let tube = match own_model {
        Some(model) => Some(build_tube(
            model,
            &phi,
            &bc,
            req.p_start,
            TUBE_GRID_STEP,
            conflict_anchors,
            cfg.levels,
        )?),
        None => None,
    };
    Ok(CavPlan {
        cav_id: req.cav_id,
        path: req.path,
        p_offset: req.p_start,
        bc,
        phi,
        plan_version: req.plan_version,
        tube,
        infeasible: false,
        crossed: req.carried_crossings.clone(),
    })
}

fn candidate_feasible(
    cand: &CavPlan,
    foes: &[LateralFoe],
    predecessor: Option<&CavPlan>,
    cfg: &SafetyConfig,
) -> bool {
    if !within_limits(&cand.phi, cand.bc.t0, cand.bc.tf, &cfg.limits) {
        return false;
    }
    if !speed_bounds_ok(cand, &cfg.limits) {
        return false;
    }
    for foe in foes {
        let t_mine = match cand.time_at_abs_position(foe.my_distance) {
            Ok(t) => t,
            Err(_) => return false,
        };
        let e_mine = cand.e_bounds_at(foe.my_distance);
        let mine = (t_mine, e_mine.0, e_mine.1);
        if worst_case_lateral_slack(mine, foe.crossing, cfg.t_h) < -SLACK_TOL {
            return false;
        }
    }
    if let Some(pred) = predecessor {
        if min_rear_end_slack(cand, pred, cand.bc.t0, cand.bc.tf, cfg) < -SLACK_TOL {
            return false;
        }
    }
    true
}

/// Solves the robust exit-time minimization for one vehicle against the
/// current database.
///
/// The exit time is searched inside the feasible window computed from the
/// vehicle's current state: a coarse forward scan finds the first feasible
/// cell (the lateral disjunctions make the feasible set non-convex, so the
/// scan preserves minimality to grid resolution), then bisection sharpens
/// the boundary of that cell. When the vehicle has characterized its
/// uncertainty, every candidate carries a freshly built confidence tube,
/// since the tube depends on the candidate's own coefficients. If nothing
/// in the window is feasible, the plan at the window's upper edge is
/// returned with the `infeasible` flag set.
pub fn solve_exit_time(
    req: &SolveRequest,
    db: &CoordinatorDatabase,
    own_model: Option<&GpModel>,
    layout: &IntersectionLayout,
    cfg: &SafetyConfig,
) -> Result<CavPlan, CoordinationError> {
    let path_geom = layout.path(req.path)?;
    let remaining = path_geom.length - req.p_start;
    if !(remaining > 0.0) {
        return Err(CoordinationError::Trajectory(
            TrajectoryError::InvalidBoundary,
        ));
    }
    let (w_lo, w_hi) = feasible_exit_window(req.t_start, req.v_start, remaining, &cfg.limits)?;

    let foes = collect_lateral_foes(req, db, layout)?;
    let predecessor = db.predecessor_on_path(req.cav_id, req.path);
    let conflict_anchors: Vec<f64> = path_geom.conflicts.iter().map(|(_, d)| *d).collect();

    let try_candidate = |tf: f64| -> Option<CavPlan> {
        let cand = build_candidate(req, tf, remaining, own_model, &conflict_anchors, cfg).ok()?;
        candidate_feasible(&cand, &foes, predecessor, cfg).then_some(cand)
    };

    let mut last_infeasible: Option<f64> = None;
    let mut first_feasible: Option<(f64, CavPlan)> = None;
    let mut tf = w_lo;
    loop {
        match try_candidate(tf) {
            Some(plan) => {
                first_feasible = Some((tf, plan));
                break;
            }
            None => last_infeasible = Some(tf),
        }
        if tf >= w_hi {
            break;
        }
        tf = (tf + TF_SCAN_DT).min(w_hi);
    }

    match (first_feasible, last_infeasible) {
        (Some((_, plan)), None) => Ok(plan),
        (Some((tf_good, plan_good)), Some(tf_bad)) => {
            let (mut bad, mut good, mut plan) = (tf_bad, tf_good, plan_good);
            while good - bad > TF_REFINE_TOL {
                let mid = 0.5 * (bad + good);
                match try_candidate(mid) {
                    Some(p) => {
                        good = mid;
                        plan = p;
                    }
                    None => bad = mid,
                }
            }
            let _ = good;
            Ok(plan)
        }
        (None, _) => {
            let mut plan =
                build_candidate(req, w_hi, remaining, own_model, &conflict_anchors, cfg)?;
            plan.infeasible = true;
            Ok(plan)
        }
    }
}

/// Freezes crossing commitments for every conflict at or behind `up_to_p`,
/// carrying forward commitments the plan had already frozen.
pub fn freeze_crossings(
    plan: &CavPlan,
    layout: &IntersectionLayout,
    up_to_p: f64,
) -> Result<Vec<CrossingRecord>, CoordinationError> {
    let path_geom = layout.path(plan.path)?;
    let mut records = Vec::new();
    for &(conflict, distance) in &path_geom.conflicts {
        if distance > up_to_p {
            continue;
        }
        if let Some((t_cross, e_lo, e_hi)) = plan.crossing_info(conflict, distance) {
            records.push(CrossingRecord {
                conflict,
                t_cross,
                e_lo,
                e_hi,
            });
        }
    }
    Ok(records)
}

/// Registers a vehicle entering the control zone: assigns the next queue
/// index and stores its entry plan, solved with empty intervals of its own
/// but robust against every published tube of earlier vehicles.
pub fn handle_entry(
    path: PathId,
    t0: f64,
    v0: f64,
    db: &mut CoordinatorDatabase,
    layout: &IntersectionLayout,
    cfg: &SafetyConfig,
) -> Result<CavId, CoordinationError> {
    let cav_id = db.allocate_id();
    let req = SolveRequest {
        cav_id,
        path,
        t_start: t0,
        v_start: v0,
        p_start: 0.0,
        plan_version: 1,
        carried_crossings: Vec::new(),
    };
    let plan = solve_exit_time(&req, db, None, layout, cfg)?;
    db.insert(plan);
    Ok(cav_id)
}

/// Outcome of a characterization event: the ids that must replan, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplanBroadcast {
    pub from_cav: CavId,
    pub targets: Vec<CavId>,
}

/// Characterizes a vehicle's uncertainty at the characterization point and
/// replans it from its measured state.
///
/// Fits the GP on the observation set, publishes the model and the new
/// plan's tube, re-solves from `(t_z, p_z, v_z)` over the distance still to
/// cover, and returns the replanning broadcast for every later-queued
/// vehicle. A GP fit failure leaves the old plan in place (the error is
/// surfaced so the caller can log it).
pub fn handle_characterization(
    cav_id: CavId,
    obs: &crate::gp::ObservationSet,
    t_z: f64,
    v_z: f64,
    fit_seed: u64,
    db: &mut CoordinatorDatabase,
    layout: &IntersectionLayout,
    cfg: &SafetyConfig,
) -> Result<ReplanBroadcast, CoordinationError> {
    let old_plan = db
        .plan(cav_id)
        .ok_or(CoordinationError::UnknownCav(cav_id))?
        .clone();

    let theta =
        crate::gp::fit_hyperparameters_seeded(obs, fit_seed).map_err(CoordinationError::GpFit)?;
    let model = GpModel::build(obs, theta).map_err(CoordinationError::GpFit)?;

    let carried = freeze_crossings(&old_plan, layout, cfg.p_z)?;
    let req = SolveRequest {
        cav_id,
        path: old_plan.path,
        t_start: t_z,
        v_start: v_z,
        p_start: cfg.p_z,
        plan_version: old_plan.plan_version + 1,
        carried_crossings: carried,
    };
    let plan = solve_exit_time(&req, db, Some(&model), layout, cfg)?;
    db.store_model(cav_id, model);
    db.insert(plan);

    let targets: Vec<CavId> = db
        .active_ids()
        .into_iter()
        .filter(|&j| j > cav_id)
        .collect();
    Ok(ReplanBroadcast {
        from_cav: cav_id,
        targets,
    })
}

/// Sequentially replans every vehicle queued after `broadcast.from_cav`, in
/// ascending order, each from its measured state at the event time and
/// against the just-updated plans of everyone before it. Vehicles keep the
/// uncertainty model they characterized earlier. Returns the ids replanned.
pub fn handle_replanning(
    broadcast: &ReplanBroadcast,
    measured_state: impl Fn(&CavPlan) -> (f64, f64, f64),
    db: &mut CoordinatorDatabase,
    layout: &IntersectionLayout,
    cfg: &SafetyConfig,
) -> Result<Vec<CavId>, CoordinationError> {
    let mut replanned = Vec::new();
    for &cav_id in &broadcast.targets {
        let old_plan = match db.plan(cav_id) {
            Some(plan) => plan.clone(),
            None => continue, // exited between broadcast and processing
        };
        let (t_now, p_now, v_now) = measured_state(&old_plan);
        let carried = freeze_crossings(&old_plan, layout, p_now)?;
        let req = SolveRequest {
            cav_id,
            path: old_plan.path,
            t_start: t_now,
            v_start: v_now,
            p_start: p_now,
            plan_version: old_plan.plan_version + 1,
            carried_crossings: carried,
        };
        let model = db.model(cav_id).cloned();
        let plan = solve_exit_time(&req, db, model.as_ref(), layout, cfg)?;
        db.insert(plan);
        replanned.push(cav_id);
    }
    Ok(replanned)
}

/// Result of a global database audit.
#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub ok: bool,
    /// Worst worst-case lateral slack over all audited pairs, s.
    pub min_lateral_slack: f64,
    /// Worst worst-case rear-end slack over all audited pairs, m.
    pub min_rear_end_slack: f64,
    pub lateral_violations: Vec<(CavId, CavId, ConflictId)>,
    pub rear_end_violations: Vec<(CavId, CavId)>,
    pub speed_violations: Vec<CavId>,
    pub skipped_infeasible: Vec<CavId>,
}

/// Audits every stored plan pair: worst-case lateral slack at each shared
/// conflict, worst-case rear-end slack over the follower's segment for each
/// same-path predecessor pair, and robust speed bounds per plan. Pairs
/// involving an infeasible-flagged plan are skipped and reported.
pub fn audit(
    db: &CoordinatorDatabase,
    layout: &IntersectionLayout,
    cfg: &SafetyConfig,
) -> AuditReport {
    let mut report = AuditReport {
        ok: true,
        min_lateral_slack: f64::INFINITY,
        min_rear_end_slack: f64::INFINITY,
        ..AuditReport::default()
    };

    let mut all_plans: Vec<&CavPlan> = db.active_plans().collect();
    all_plans.extend(db.exited().iter());
    all_plans.sort_by_key(|plan| plan.cav_id);
    for plan in &all_plans {
        if plan.infeasible && !report.skipped_infeasible.contains(&plan.cav_id) {
            report.skipped_infeasible.push(plan.cav_id);
        }
    }

    // Lateral: every pair sharing a conflict, provided at least one side is
    // still active.
    for (idx, plan_i) in all_plans.iter().enumerate() {
        for plan_j in all_plans.iter().skip(idx + 1) {
            if plan_i.infeasible || plan_j.infeasible {
                continue;
            }
            let both_exited =
                db.plan(plan_i.cav_id).is_none() && db.plan(plan_j.cav_id).is_none();
            if both_exited || plan_i.path == plan_j.path {
                continue;
            }
            let Ok(geom_i) = layout.path(plan_i.path) else {
                continue;
            };
            for &(conflict, d_i) in &geom_i.conflicts {
                let Some(d_j) = layout.conflict_distance(plan_j.path, conflict) else {
                    continue;
                };
                let (Some(mine), Some(other)) = (
                    plan_i.crossing_info(conflict, d_i),
                    plan_j.crossing_info(conflict, d_j),
                ) else {
                    continue;
                };
                let slack = worst_case_lateral_slack(mine, other, cfg.t_h);
                report.min_lateral_slack = report.min_lateral_slack.min(slack);
                if slack < -SLACK_TOL {
                    report.ok = false;
                    report
                        .lateral_violations
                        .push((plan_i.cav_id, plan_j.cav_id, conflict));
                }
            }
        }
    }

    // Rear-end: consecutive same-path pairs among active vehicles.
    let active: Vec<&CavPlan> = db.active_plans().collect();
    for follower in &active {
        let Some(leader) = db.predecessor_on_path(follower.cav_id, follower.path) else {
            continue;
        };
        if follower.infeasible || leader.infeasible {
            continue;
        }
        let from = follower.bc.t0.max(leader.bc.t0);
        let slack = min_rear_end_slack(follower, leader, from, follower.bc.tf, cfg);
        report.min_rear_end_slack = report.min_rear_end_slack.min(slack);
        if slack < -SLACK_TOL {
            report.ok = false;
            report
                .rear_end_violations
                .push((follower.cav_id, leader.cav_id));
        }
    }

    for plan in &active {
        if plan.infeasible {
            continue;
        }
        if !speed_bounds_ok(plan, &cfg.limits) {
            report.ok = false;
            report.speed_violations.push(plan.cav_id);
        }
    }

    report
}
