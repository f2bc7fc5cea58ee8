//! Scripted oracle: skill solvers driven by a greedy predicate scheduler.
//!
//! Solvers read everything they need from the world state and their fixed
//! parameters. Caches (routes, throw plans, parking spots) only save work and
//! are rebuilt whenever they no longer match the state.

use std::collections::BTreeSet;

use parry3d_f64::glamx::{DQuat, DVec2, DVec3};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geom::{distance, overlap_fraction, pose_error_weighted, quat_angle, wrap_angle, Footprint, Pose, Shape};
use crate::planner::{ballistic_release, balance_partition, rrt_connect, straight_line_clear, MovingBody, PlanQuery};
use crate::predicates::{is_inside, rotation_error, Predicate, PredicateTree, Status, TouchMode};
use crate::world::{vertical_axis_deviation, Action, ObjectKind, Support, WorldState};

/// Gap between tip and top face when grasping.
const GRASP_GAP: f64 = 0.01;
/// Height a held object is released above its resting pose.
const DROP_GAP: f64 = 0.003;
/// Vertical approach distance above grasp and place poses.
const APPROACH: f64 = 0.06;
/// Tip height while pushing along the table.
const PUSH_Z: f64 = 0.002;
/// Push advance per step.
const PUSH_STEP: f64 = 0.01;
/// Horizontal sweep advance per step when toppling.
const SWEEP_STEP: f64 = 0.01;
const SWEEP_RUNUP: f64 = 0.05;
/// Launch profile: cumulative displacement in units of `dt·v` after each step
/// (five ramp steps, two at full speed); the release step adds one more unit.
const LAUNCH_PROFILE: [f64; 8] = [0.0, 0.2, 0.6, 1.2, 2.0, 3.0, 4.0, 5.0];
const THROW_ANGLE_DEG: f64 = 45.0;
const REACHED: f64 = 1e-6;
/// Reach limit used to decide whether a region needs a throw.
const REACH_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    Pick,
    Place,
    Move,
    Trace,
    Touch,
    Push,
    Hit,
    ToppleStructure,
    BalanceScale,
    PickMovePlace,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Pick => "Pick",
            SolverKind::Place => "Place",
            SolverKind::Move => "Move",
            SolverKind::Trace => "Trace",
            SolverKind::Touch => "Touch",
            SolverKind::Push => "Push",
            SolverKind::Hit => "Hit",
            SolverKind::ToppleStructure => "ToppleStructure",
            SolverKind::BalanceScale => "BalanceScale",
            SolverKind::PickMovePlace => "PickMovePlace",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Running,
    Done,
    Failed(String),
}

/// What the solver is doing this step, by object index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Moving,
    Approaching(usize),
    Grasping(usize),
    Lifting(usize),
    Carrying(usize),
    Releasing(usize),
    Retreating,
    Pushing(usize),
    Sweeping(usize),
    Throwing(usize),
    Touching(usize),
    Waiting,
}

/// Fixed table from predicate variant to solver kind.
pub fn solver_kind(pred: &Predicate) -> Result<SolverKind> {
    use Predicate::*;
    Ok(match pred {
        EEAtPos { .. } | EEAtPose { .. } => SolverKind::Move,
        AtPos { .. } | AtPose { .. } | OnTop { .. } | Inside { .. } | RotatedBy { .. } => SolverKind::PickMovePlace,
        Touch { mode: TouchMode::Gentle, .. } | TouchedGently { .. } => SolverKind::Touch,
        Touch { mode: TouchMode::Push, .. } | TouchPushed { .. } | PushProgress { .. } => SolverKind::Push,
        Touch { mode: TouchMode::Topple, .. } | ToppleStructure { .. } => SolverKind::ToppleStructure,
        Hit { .. } => SolverKind::Hit,
        Grasped { .. } => SolverKind::Pick,
        Balanced { .. } => SolverKind::BalanceScale,
        TraceGoals { .. } => SolverKind::Trace,
        other => return Err(Error::NoSolver(other.to_string())),
    })
}

/// Where a manipulated object should come to rest.
#[derive(Debug, Clone, PartialEq)]
enum Placement {
    /// Position with the current orientation kept.
    Position(DVec3),
    Pose(Pose),
    OnTop(usize),
    Inside(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum PushEnd {
    /// Stop near the point.
    Point,
    /// Stop near the point and leave the object resting there (tolerance-checked).
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
enum ToppleGoal {
    /// Every object ends resting on the table.
    Table,
    /// The object ends tipped over.
    Tipped,
}

#[derive(Debug, Clone, PartialEq)]
enum HitTarget {
    Object(usize),
    Region(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Goal {
    Move { position: DVec3, orientation: Option<DQuat> },
    Trace,
    Pick { obj: usize },
    PickMovePlace { obj: usize, placement: Placement, tol: f64 },
    Touch { obj: usize },
    Push { obj: usize, to: DVec2, end: PushEnd },
    /// Push along a clear direction far enough to count as pushed.
    Shove { obj: usize, distance: f64 },
    Hit { obj: usize, target: HitTarget },
    Topple { objs: Vec<usize>, goal: ToppleGoal },
    Balance { objs: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
struct Route {
    key: RouteKey,
    waypoints: Vec<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
struct RouteKey {
    goal: Pose,
    attached: Option<usize>,
    exclude: Vec<usize>,
    descent: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct ThrowPlan {
    key: (usize, DVec3, DVec3),
    /// EE position where the launch profile starts.
    start: DVec3,
    velocity: DVec3,
}

#[derive(Debug, Clone, PartialEq)]
struct SweepPlan {
    obj: usize,
    pose: Pose,
    dir: DVec2,
    start: DVec3,
}

/// One skill solver bound to a predicate node.
#[derive(Debug, Clone)]
pub struct SkillSolver {
    pub kind: SolverKind,
    goal: Goal,
    /// Footprint circles other objects must not be parked on.
    reserved: Vec<(DVec2, f64)>,
    route: Option<Route>,
    throw: Option<ThrowPlan>,
    sweep: Option<SweepPlan>,
    parking: Option<(usize, DVec2)>,
    /// Object, push direction and where the push started.
    shove_dir: Option<(usize, DVec2, DVec2)>,
    partition: Option<(Vec<usize>, Vec<usize>)>,
    used: BTreeSet<SolverKind>,
    phase: Phase,
}

type Step = std::result::Result<(Action, SolverStatus), String>;

fn running(a: Action) -> Step {
    Ok((a, SolverStatus::Running))
}

impl SkillSolver {
    /// Solver for leaf `node` of `tree` in state `st`.
    pub fn for_node(tree: &PredicateTree, node: usize, st: &WorldState) -> Result<SkillSolver> {
        let n = &tree.nodes[node];
        let kind = solver_kind(&n.pred)?;
        let o = &n.objects;
        let never_grasped: Vec<usize> = tree
            .nodes
            .iter()
            .filter(|m| matches!(m.pred, Predicate::NeverGrasped { .. }))
            .flat_map(|m| m.objects.iter().copied())
            .collect();
        let mut kind = kind;
        let goal = match &n.pred {
            Predicate::EEAtPos { target, .. } => Goal::Move { position: DVec3::from_array(*target), orientation: None },
            Predicate::EEAtPose { target, .. } => {
                Goal::Move { position: target.position, orientation: Some(target.orientation) }
            }
            Predicate::AtPos { target, tol, .. } => {
                if never_grasped.contains(&o[0]) {
                    kind = SolverKind::Push;
                    Goal::Push { obj: o[0], to: DVec3::from_array(*target).truncate(), end: PushEnd::Exact }
                } else {
                    Goal::PickMovePlace { obj: o[0], placement: Placement::Position(DVec3::from_array(*target)), tol: *tol }
                }
            }
            Predicate::AtPose { target, tol, .. } => {
                Goal::PickMovePlace { obj: o[0], placement: Placement::Pose(*target), tol: *tol }
            }
            Predicate::OnTop { .. } => Goal::PickMovePlace { obj: o[0], placement: Placement::OnTop(o[1]), tol: 0.0 },
            Predicate::Inside { .. } => {
                if reachable(st, o[1]) {
                    Goal::PickMovePlace { obj: o[0], placement: Placement::Inside(o[1]), tol: 0.0 }
                } else {
                    kind = SolverKind::Hit;
                    Goal::Hit { obj: o[0], target: HitTarget::Region(o[1]) }
                }
            }
            Predicate::RotatedBy { angle_deg, direction, .. } => {
                let base = n.baseline.poses[0];
                let yaw = direction.sign() * angle_deg.to_radians();
                let q = DQuat::from_rotation_z(yaw) * base.orientation;
                Goal::PickMovePlace { obj: o[0], placement: Placement::Pose(Pose::new(base.position, q)), tol: 0.02 }
            }
            Predicate::Touch { mode: TouchMode::Gentle, .. } | Predicate::TouchedGently { .. } => Goal::Touch { obj: o[0] },
            Predicate::Touch { mode: TouchMode::Push, .. } => Goal::Shove { obj: o[0], distance: 0.06 },
            Predicate::TouchPushed { min_move, .. } => Goal::Shove { obj: o[0], distance: min_move + 0.03 },
            Predicate::Touch { mode: TouchMode::Topple, .. } => Goal::Topple { objs: vec![o[0]], goal: ToppleGoal::Tipped },
            Predicate::ToppleStructure { .. } => Goal::Topple { objs: o.clone(), goal: ToppleGoal::Table },
            Predicate::Hit { .. } => Goal::Hit { obj: o[0], target: HitTarget::Object(o[1]) },
            Predicate::Grasped { .. } => Goal::Pick { obj: o[0] },
            Predicate::PushProgress { reduce_frac, .. } => {
                let p0 = n.baseline.poses[0].xy();
                let g = n.baseline.poses[1].xy();
                let d0 = p0.distance(g);
                let u = (g - p0) / d0.max(1e-9);
                Goal::Push { obj: o[0], to: p0 + u * d0 * (reduce_frac + 0.15).min(0.6), end: PushEnd::Point }
            }
            Predicate::Balanced { .. } => Goal::Balance { objs: o.clone() },
            Predicate::TraceGoals { .. } => Goal::Trace,
            other => return Err(Error::NoSolver(other.to_string())),
        };
        Ok(SkillSolver {
            kind,
            goal,
            reserved: reserved_targets(tree, st),
            route: None,
            throw: None,
            sweep: None,
            parking: None,
            shove_dir: None,
            partition: None,
            used: BTreeSet::new(),
            phase: Phase::Idle,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Skill kinds this solver has exercised so far, itself included.
    pub fn kinds_used(&self) -> &BTreeSet<SolverKind> {
        &self.used
    }

    /// One control step.
    pub fn act(&mut self, st: &WorldState, cfg: &Config) -> (Action, SolverStatus) {
        self.used.insert(self.kind);
        let out = match self.goal.clone() {
            Goal::Move { position, orientation } => self.act_move(st, cfg, position, orientation),
            Goal::Trace => self.act_trace(st, cfg),
            Goal::Pick { obj } => self.act_pick(st, cfg, obj),
            Goal::PickMovePlace { obj, placement, tol } => self.act_pmp(st, cfg, obj, &placement, tol),
            Goal::Touch { obj } => self.act_touch(st, cfg, obj),
            Goal::Push { obj, to, end } => self.act_push(st, cfg, obj, to, &end),
            Goal::Shove { obj, distance } => self.act_shove(st, cfg, obj, distance),
            Goal::Hit { obj, target } => self.act_hit(st, cfg, obj, &target),
            Goal::Topple { objs, goal } => self.act_topple(st, cfg, &objs, &goal),
            Goal::Balance { objs } => self.act_balance(st, cfg, &objs),
        };
        match out {
            Ok((a, s)) => (a.clamped(&st.config), s),
            Err(reason) => (hold(st), SolverStatus::Failed(reason)),
        }
    }

    fn act_move(&mut self, st: &WorldState, cfg: &Config, position: DVec3, orientation: Option<DQuat>) -> Step {
        let goal = Pose::new(position, orientation.unwrap_or(st.ee.pose.orientation));
        self.phase = Phase::Moving;
        match self.drive(st, cfg, goal, &[], 0.0)? {
            Some(a) => running(a),
            None => Ok((hold(st), SolverStatus::Done)),
        }
    }

    fn act_trace(&mut self, st: &WorldState, cfg: &Config) -> Step {
        let Some(g) = st.goals.iter().find(|g| g.status == crate::world::GoalStatus::Active) else {
            self.phase = Phase::Idle;
            return Ok((hold(st), SolverStatus::Done));
        };
        self.used.insert(SolverKind::Move);
        let goal = Pose::new(DVec3::from_array(g.position), st.ee.pose.orientation);
        self.phase = Phase::Moving;
        match self.drive(st, cfg, goal, &[], 0.0)? {
            Some(a) => running(a),
            None => running(hold(st)),
        }
    }

    fn act_pick(&mut self, st: &WorldState, cfg: &Config, obj: usize) -> Step {
        if st.ee.attached == Some(obj) {
            self.phase = Phase::Lifting(obj);
            let o = &st.objects[obj];
            let a = if o.bottom() < 0.08 { lift(st, 0.02, 1.0) } else { hold(st) };
            return Ok((a, SolverStatus::Done));
        }
        if let Some(other) = st.ee.attached {
            return self.park(st, cfg, other);
        }
        self.grasp(st, cfg, obj)
    }

    /// Approach `obj` from above and switch suction on.
    fn grasp(&mut self, st: &WorldState, cfg: &Config, obj: usize) -> Step {
        self.used.insert(SolverKind::Pick);
        if st.ee.suction_on && st.ee.attached.is_none() {
            self.phase = Phase::Approaching(obj);
            return running(Action::zero());
        }
        let o = &st.objects[obj];
        let goal = Pose::new(DVec3::new(o.pose.position.x, o.pose.position.y, o.top() + GRASP_GAP), st.ee.pose.orientation);
        self.used.insert(SolverKind::Move);
        match self.drive(st, cfg, goal, &[obj], APPROACH)? {
            Some(a) => {
                self.phase = Phase::Approaching(obj);
                running(a)
            }
            None => {
                self.phase = Phase::Grasping(obj);
                running(Action::new(DVec3::ZERO, DVec3::ZERO, 1.0))
            }
        }
    }

    /// Lower the held object onto `target` (its resting pose) and let go.
    fn put_down(&mut self, st: &WorldState, cfg: &Config, obj: usize, target: Pose, exclude: &[usize]) -> Step {
        self.used.insert(SolverKind::Place);
        self.used.insert(SolverKind::Move);
        let mut drop = target;
        drop.position.z += DROP_GAP;
        let ee_goal = drop.compose(&st.ee.grasp_offset.inverse());
        match self.drive(st, cfg, ee_goal, exclude, APPROACH)? {
            Some(a) => {
                self.phase = Phase::Carrying(obj);
                running(with_grip(a, 1.0))
            }
            None => {
                if st.ee_velocity().length() > 0.02 {
                    self.phase = Phase::Carrying(obj);
                    running(hold(st))
                } else {
                    self.phase = Phase::Releasing(obj);
                    running(Action::zero())
                }
            }
        }
    }

    /// Move away upwards from `obj` until clear.
    fn retreat(&mut self, st: &WorldState, obj: Option<usize>) -> Step {
        let clear = match obj {
            Some(j) => st.ee_distance(j) > 0.02 && st.tip().z > st.objects[j].top() + 0.03,
            None => true,
        };
        let blocked_above = st.tip().z >= st.config.bounds_max[2] - 0.03;
        if clear || blocked_above {
            self.phase = Phase::Idle;
            Ok((Action::zero(), SolverStatus::Done))
        } else {
            self.phase = Phase::Retreating;
            running(lift(st, 0.02, 0.0))
        }
    }

    fn act_pmp(&mut self, st: &WorldState, cfg: &Config, obj: usize, placement: &Placement, tol: f64) -> Step {
        if let Some(other) = st.ee.attached {
            if other != obj {
                return self.park(st, cfg, other);
            }
        }
        let target = target_pose(st, obj, placement);
        let blockers = blockers(st, obj, &target, placement);
        if st.ee.attached == Some(obj) {
            if blockers.is_empty() {
                let exclude = support_of_placement(placement);
                return self.put_down(st, cfg, obj, target, &exclude);
            }
            return self.park(st, cfg, obj);
        }
        if placed(st, obj, placement, &target, tol) {
            return self.retreat(st, Some(obj));
        }
        if let Some(&b) = blockers.first() {
            return self.relocate(st, cfg, b);
        }
        self.grasp(st, cfg, obj)
    }

    /// Move object `b` out of the way: pick it if needed, then park it.
    fn relocate(&mut self, st: &WorldState, cfg: &Config, b: usize) -> Step {
        if st.ee.attached == Some(b) {
            return self.park(st, cfg, b);
        }
        self.grasp(st, cfg, b)
    }

    /// Carry the held object `b` to a free table spot and release it.
    fn park(&mut self, st: &WorldState, cfg: &Config, b: usize) -> Step {
        let spot = match self.parking {
            Some((k, s)) if k == b => s,
            _ => {
                let s = free_spot(st, b, &self.reserved).ok_or("no free spot to set an object down")?;
                self.parking = Some((b, s));
                s
            }
        };
        let o = &st.objects[b];
        let target = Pose::new(DVec3::new(spot.x, spot.y, o.half_height()), o.pose.orientation);
        self.put_down(st, cfg, b, target, &[])
    }

    fn act_touch(&mut self, st: &WorldState, cfg: &Config, obj: usize) -> Step {
        let o = &st.objects[obj];
        let top = DVec3::new(o.pose.position.x, o.pose.position.y, o.top());
        if st.ee_touching(obj) {
            self.phase = Phase::Touching(obj);
            return Ok((Action::zero(), SolverStatus::Done));
        }
        let tip = st.tip();
        let over = tip.truncate().distance(top.truncate()) < 1e-4 && tip.z <= top.z + 0.031 && tip.z >= top.z - 1e-6;
        if over {
            self.phase = Phase::Touching(obj);
            let dz = (top.z - tip.z - 0.002).max(-0.01);
            return running(Action::new(DVec3::new(0.0, 0.0, dz), DVec3::ZERO, 0.0));
        }
        self.used.insert(SolverKind::Move);
        self.phase = Phase::Approaching(obj);
        let goal = Pose::new(top + DVec3::Z * 0.03, st.ee.pose.orientation);
        match self.drive(st, cfg, goal, &[], 0.0)? {
            Some(a) => running(a),
            None => running(Action::zero()),
        }
    }

    fn act_shove(&mut self, st: &WorldState, cfg: &Config, obj: usize, dist: f64) -> Step {
        let (dir, start) = match self.shove_dir {
            Some((k, d, s)) if k == obj => (d, s),
            _ => {
                let d = shove_direction(st, obj).ok_or("no clear direction to push")?;
                let s = st.objects[obj].pose.xy();
                self.shove_dir = Some((obj, d, s));
                (d, s)
            }
        };
        self.act_push(st, cfg, obj, start + dir * dist, &PushEnd::Point)
    }

    fn act_push(&mut self, st: &WorldState, cfg: &Config, obj: usize, to: DVec2, end: &PushEnd) -> Step {
        if let Some(other) = st.ee.attached {
            return self.park(st, cfg, other);
        }
        if st.ee.suction_on {
            return running(Action::zero());
        }
        let o = &st.objects[obj];
        let c = o.pose.xy();
        let is_box = matches!(o.shape, Shape::OrientedBox { .. });
        let tol = match end {
            PushEnd::Point => 0.004,
            PushEnd::Exact => 0.003,
        };
        // direction and remaining distance of the current push leg
        let leg = if is_box {
            let yaw = o.pose.yaw();
            let e1 = DVec2::new(yaw.cos(), yaw.sin());
            let e2 = e1.perp();
            let d = to - c;
            let (a, b) = (d.dot(e1), d.dot(e2));
            if a.abs() > tol {
                Some((e1 * a.signum(), a.abs()))
            } else if b.abs() > tol {
                Some((e2 * b.signum(), b.abs()))
            } else {
                None
            }
        } else {
            let d = to - c;
            (d.length() > tol).then(|| (d.normalize(), d.length()))
        };
        let Some((n, remaining)) = leg else {
            return self.retreat(st, Some(obj));
        };
        if *end == PushEnd::Exact {
            if let Some(b) = corridor_blocker(st, obj, to) {
                let park = corridor_parking(st, obj, to, b);
                self.used.insert(SolverKind::Push);
                return self.push_leg(st, cfg, b, park, tol);
            }
        }
        self.push_step(st, cfg, obj, n, remaining)
    }

    /// Push `obj` towards `to` along the centre line (round) or one face normal (box).
    fn push_leg(&mut self, st: &WorldState, cfg: &Config, obj: usize, to: DVec2, tol: f64) -> Step {
        let c = st.objects[obj].pose.xy();
        let d = to - c;
        if d.length() <= tol {
            return self.retreat(st, Some(obj));
        }
        self.push_step(st, cfg, obj, d.normalize(), d.length())
    }

    fn push_step(&mut self, st: &WorldState, cfg: &Config, obj: usize, n: DVec2, remaining: f64) -> Step {
        let o = &st.objects[obj];
        let c = o.pose.xy();
        let reach = contact_reach(st, obj, n);
        let tip = st.tip();
        let rel = tip.truncate() - c;
        let along = rel.dot(n);
        let lateral = rel.perp_dot(n).abs();
        let engaged = lateral <= 0.004 && along <= -reach + 0.002 && along >= -reach - 0.06 && tip.z <= PUSH_Z + 0.004;
        if engaged {
            self.phase = Phase::Pushing(obj);
            let s = remaining.min(PUSH_STEP);
            let want = c - n * reach + n * s;
            let mut t = (want - tip.truncate()).extend(PUSH_Z - tip.z);
            let len = t.length();
            if len > 0.03 {
                t *= 0.03 / len;
            }
            return running(Action::new(t, DVec3::ZERO, 0.0));
        }
        self.used.insert(SolverKind::Move);
        self.phase = Phase::Approaching(obj);
        let start = c - n * (reach + 0.03);
        let goal = Pose::new(start.extend(PUSH_Z), st.ee.pose.orientation);
        match self.drive(st, cfg, goal, &[], APPROACH)? {
            Some(a) => running(a),
            None => {
                // at the run-up point; the next step engages
                let t = (n * 0.02).extend(0.0);
                running(Action::new(t, DVec3::ZERO, 0.0))
            }
        }
    }

    fn act_hit(&mut self, st: &WorldState, cfg: &Config, obj: usize, target: &HitTarget) -> Step {
        let o = &st.objects[obj];
        if o.in_flight {
            self.phase = Phase::Waiting;
            return running(Action::zero());
        }
        match st.ee.attached {
            Some(h) if h != obj => return self.park(st, cfg, h),
            None => {
                if let HitTarget::Region(r) = target {
                    if is_inside(st, obj, *r) {
                        return self.retreat(st, None);
                    }
                }
                return self.grasp(st, cfg, obj);
            }
            Some(_) => {}
        }
        let aim = hit_aim(st, obj, target).ok_or("no free landing spot")?;
        let off = o.pose.position - st.tip();
        let key = (obj, aim, off);
        if self.throw.as_ref().is_none_or(|p| p.key != key) {
            let plan = plan_throw(st, cfg, obj, aim, off, target).ok_or("no feasible throw")?;
            self.throw = Some(ThrowPlan { key, start: plan.0, velocity: plan.1 });
        }
        let plan = self.throw.clone().expect("throw plan cached");
        let dt = st.config.dt;
        let tip = st.tip();
        let q_ok = quat_angle(st.ee.pose.orientation, st.ee.pose.orientation) < 1e-9;
        for (j, c) in LAUNCH_PROFILE.iter().enumerate() {
            let p = plan.start + plan.velocity * dt * *c;
            if q_ok && p.distance(tip) < 1e-6 {
                self.phase = Phase::Throwing(obj);
                return if j + 1 < LAUNCH_PROFILE.len() {
                    let d = plan.velocity * dt * (LAUNCH_PROFILE[j + 1] - c);
                    running(Action::new(d, DVec3::ZERO, 1.0))
                } else {
                    running(Action::new(plan.velocity * dt, DVec3::ZERO, 0.0))
                };
            }
        }
        self.used.insert(SolverKind::Move);
        self.phase = Phase::Carrying(obj);
        let goal = Pose::new(plan.start, st.ee.pose.orientation);
        match self.drive(st, cfg, goal, &[], 0.0)? {
            Some(a) => running(with_grip(a, 1.0)),
            None => running(hold(st)),
        }
    }

    fn act_topple(&mut self, st: &WorldState, cfg: &Config, objs: &[usize], goal: &ToppleGoal) -> Step {
        if let Some(h) = st.ee.attached {
            return self.park(st, cfg, h);
        }
        if st.ee.suction_on {
            return running(Action::zero());
        }
        let pending: Vec<usize> = objs
            .iter()
            .copied()
            .filter(|&j| match goal {
                ToppleGoal::Table => st.support_of(j) != Support::Table,
                ToppleGoal::Tipped => vertical_axis_deviation(&st.objects[j]) <= std::f64::consts::FRAC_PI_4,
            })
            .collect();
        let Some(&j) = pending.iter().max_by(|&&a, &&b| st.objects[a].top().total_cmp(&st.objects[b].top()).then(b.cmp(&a)))
        else {
            return self.retreat(st, None);
        };
        let stale = self.sweep.as_ref().is_none_or(|p| p.obj != j || p.pose != st.objects[j].pose);
        if stale {
            match plan_sweep(st, cfg, j, goal) {
                Some(plan) => self.sweep = Some(plan),
                // nothing clear to tip it onto: lift it down instead
                None if *goal == ToppleGoal::Table => return self.relocate(st, cfg, j),
                None => return Err("no clear direction to topple".into()),
            }
        }
        let plan = self.sweep.clone().expect("sweep plan cached");
        let tip = st.tip();
        let rel = tip.truncate() - plan.start.truncate();
        let along = rel.dot(plan.dir);
        let lateral = rel.perp_dot(plan.dir).abs();
        let run = st.objects[j].pose.xy().distance(plan.start.truncate());
        if lateral < 0.003 && (tip.z - plan.start.z).abs() < 0.003 && along >= -1e-9 && along <= run {
            self.phase = Phase::Sweeping(j);
            let t = (plan.dir * SWEEP_STEP).extend(plan.start.z - tip.z);
            return running(Action::new(t, DVec3::ZERO, 0.0));
        }
        self.used.insert(SolverKind::Move);
        self.phase = Phase::Approaching(j);
        let g = Pose::new(plan.start, st.ee.pose.orientation);
        match self.drive(st, cfg, g, &[], 0.0)? {
            Some(a) => running(a),
            None => running(Action::zero()),
        }
    }

    fn act_balance(&mut self, st: &WorldState, cfg: &Config, objs: &[usize]) -> Step {
        let Some(scale) = st.scale.as_ref() else { return Err("scene has no scale".into()) };
        let (left_pan, right_pan) = (scale.left_pan, scale.right_pan);
        if self.partition.is_none() {
            let masses: Vec<f64> = objs.iter().map(|&i| st.objects[i].mass).collect();
            let (l, r) = balance_partition(&masses).ok_or("masses admit no balanced split")?;
            self.partition = Some((l.iter().map(|&k| objs[k]).collect(), r.iter().map(|&k| objs[k]).collect()));
        }
        let (left, _) = self.partition.clone().expect("partition cached");
        let pan_for = |i: usize| if left.contains(&i) { left_pan } else { right_pan };
        let on_pan = |i: usize| st.support_of(i) == Support::Object(pan_for(i));
        self.used.insert(SolverKind::PickMovePlace);
        if let Some(h) = st.ee.attached {
            if !objs.contains(&h) {
                return self.park(st, cfg, h);
            }
            let target = target_pose(st, h, &Placement::Inside(pan_for(h)));
            return self.put_down(st, cfg, h, target, &[pan_for(h)]);
        }
        let tip = st.tip();
        let next = objs
            .iter()
            .copied()
            .filter(|&i| !on_pan(i))
            .min_by(|&a, &b| {
                let da = st.objects[a].pose.position.distance(tip);
                let db = st.objects[b].pose.position.distance(tip);
                da.total_cmp(&db).then(a.cmp(&b))
            });
        match next {
            Some(i) => self.grasp(st, cfg, i),
            None => {
                let touching = objs.iter().copied().find(|&i| st.ee_distance(i) <= 0.02);
                self.retreat(st, touching)
            }
        }
    }

    /// Steps along a collision-free route to `goal`. `None` once there.
    fn drive(&mut self, st: &WorldState, cfg: &Config, goal: Pose, exclude: &[usize], descent: f64) -> std::result::Result<Option<Action>, String> {
        let ee = st.ee.pose;
        if ee.position.distance(goal.position) < REACHED && quat_angle(ee.orientation, goal.orientation) < REACHED {
            return Ok(None);
        }
        let key = RouteKey { goal, attached: st.ee.attached, exclude: exclude.to_vec(), descent };
        let stale = match &self.route {
            None => true,
            Some(r) => r.key != key || closest_on_route(&r.waypoints, ee.position).2 > cfg.solver.replan_deviation,
        };
        if stale {
            let waypoints = plan_route(st, cfg, goal, exclude, descent)?;
            self.route = Some(Route { key, waypoints });
        }
        let route = self.route.as_ref().expect("route cached");
        let (t, r) = follow(&route.waypoints, &ee, cfg.solver.move_step, 0.9 * st.config.max_rotation);
        let grip = if st.ee.attached.is_some() { 1.0 } else { 0.0 };
        Ok(Some(Action::new(t, r, grip)))
    }
}

fn hold(st: &WorldState) -> Action {
    Action::new(DVec3::ZERO, DVec3::ZERO, if st.ee.attached.is_some() { 1.0 } else { 0.0 })
}

fn lift(st: &WorldState, dz: f64, grip: f64) -> Action {
    let room = (st.config.bounds_max[2] - st.tip().z).max(0.0);
    Action::new(DVec3::new(0.0, 0.0, dz.min(room)), DVec3::ZERO, grip)
}

fn with_grip(mut a: Action, grip: f64) -> Action {
    a.grip = grip;
    a
}

fn reachable(st: &WorldState, region: usize) -> bool {
    let c = st.objects[region].pose.position;
    let (lo, hi) = (st.config.bounds_min, st.config.bounds_max);
    (0..2).all(|k| c[k] >= lo[k] + REACH_MARGIN && c[k] <= hi[k] - REACH_MARGIN)
}

/// Horizontal bounding radius of an object's footprint around its centre.
fn plan_radius(st: &WorldState, i: usize) -> f64 {
    let o = &st.objects[i];
    let c = o.pose.xy();
    o.footprint().outline().iter().map(|p| p.distance(c)).fold(0.0, f64::max)
}

/// Targets of pending placement leaves, kept free when parking objects.
fn reserved_targets(tree: &PredicateTree, st: &WorldState) -> Vec<(DVec2, f64)> {
    let mut out = Vec::new();
    for n in &tree.nodes {
        if n.status == Status::Done {
            continue;
        }
        let xy = match &n.pred {
            Predicate::AtPos { target, .. } => DVec2::new(target[0], target[1]),
            Predicate::AtPose { target, .. } => target.xy(),
            Predicate::RotatedBy { .. } => n.baseline.poses[0].xy(),
            Predicate::OnTop { .. } | Predicate::Inside { .. } => st.objects[n.objects[1]].pose.xy(),
            _ => continue,
        };
        let r = match &n.pred {
            Predicate::OnTop { .. } | Predicate::Inside { .. } => plan_radius(st, n.objects[1]),
            _ => plan_radius(st, n.objects[0]),
        };
        out.push((xy, r));
    }
    out
}

fn yaw_rotated(q: DQuat, dyaw: f64) -> DQuat {
    DQuat::from_rotation_z(dyaw) * q
}

/// Orientation among `base_yaw + k·90°` closest to the object's, for boxes.
fn aligned_orientations(st: &WorldState, obj: usize, base_yaw: f64) -> Vec<DQuat> {
    let o = &st.objects[obj];
    let cur = o.pose.yaw();
    let mut opts: Vec<(f64, DQuat)> = (0..4)
        .map(|k| {
            let d = wrap_angle(base_yaw + k as f64 * std::f64::consts::FRAC_PI_2 - cur);
            (d.abs(), yaw_rotated(o.pose.orientation, d))
        })
        .collect();
    opts.sort_by(|a, b| a.0.total_cmp(&b.0));
    opts.into_iter().map(|(_, q)| q).collect()
}

fn is_box(st: &WorldState, i: usize) -> bool {
    matches!(st.objects[i].shape, Shape::OrientedBox { .. })
}

/// Slots (centre, half size) inside a container, area or pan.
fn slots(st: &WorldState, region: usize) -> Vec<(DVec2, DVec2)> {
    let r = &st.objects[region];
    let wall = st.config.container_wall;
    let Shape::OrientedBox { half_extents: [hx, hy, _] } = r.shape else {
        return vec![(r.pose.xy(), DVec2::splat(0.03))];
    };
    let (ix, iy) = match r.kind {
        ObjectKind::Container => (hx - wall, hy - wall),
        _ => (hx, hy),
    };
    let yaw = r.pose.yaw();
    let (ex, ey) = (DVec2::new(yaw.cos(), yaw.sin()), DVec2::new(-yaw.sin(), yaw.cos()));
    let c = r.pose.xy();
    if ix >= 0.1 && iy >= 0.1 {
        // square regions hold a 2×2 grid
        let (qx, qy) = (ix / 2.0, iy / 2.0);
        return [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|&(sx, sy)| (c + ex * sx * qx + ey * sy * qy, DVec2::new(qx, qy)))
            .collect();
    }
    if iy >= ix {
        vec![(c - ey * iy / 2.0, DVec2::new(ix, iy / 2.0)), (c + ey * iy / 2.0, DVec2::new(ix, iy / 2.0))]
    } else {
        vec![(c - ex * ix / 2.0, DVec2::new(ix / 2.0, iy)), (c + ex * ix / 2.0, DVec2::new(ix / 2.0, iy))]
    }
}

/// Resting pose for `obj` under `placement`.
fn target_pose(st: &WorldState, obj: usize, placement: &Placement) -> Pose {
    let o = &st.objects[obj];
    match placement {
        Placement::Position(p) => Pose::new(*p, o.pose.orientation),
        Placement::Pose(p) => *p,
        Placement::OnTop(base) => {
            let b = &st.objects[*base];
            let mut q = o.pose.orientation;
            if is_box(st, obj) && is_box(st, *base) {
                let bfp = b.footprint();
                let mut best = -1.0;
                for cand in aligned_orientations(st, obj, b.pose.yaw()).into_iter().take(2) {
                    let fp = o.shape.footprint(&Pose::new(b.pose.position, cand));
                    let f = overlap_fraction(&fp, &bfp);
                    if f > best + 1e-9 {
                        best = f;
                        q = cand;
                    }
                }
            }
            let hh = o.shape.vertical_half_extent(q);
            Pose::new(DVec3::new(b.pose.position.x, b.pose.position.y, b.top() + hh), q)
        }
        Placement::Inside(region) => {
            let r = &st.objects[*region];
            let floor = r.floor_top(st.config.container_wall);
            let ryaw = r.pose.yaw();
            let (ex, ey) = (DVec2::new(ryaw.cos(), ryaw.sin()), DVec2::new(-ryaw.sin(), ryaw.cos()));
            let orientations = if is_box(st, obj) { aligned_orientations(st, obj, ryaw) } else { vec![o.pose.orientation] };
            let all = slots(st, *region);
            let mut fallback = None;
            for (c, half) in &all {
                let cell = Footprint::rect(*c, *half, ryaw);
                let occupied = st
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(k, other)| k != obj && k != *region && !other.is_static && !st.is_attached(k) && other.footprint().intersects(&cell));
                for q in &orientations {
                    let fp = o.shape.footprint(&Pose::new(c.extend(0.0), *q));
                    let fits = fp.outline().iter().all(|p| {
                        let d = *p - *c;
                        d.dot(ex).abs() <= half.x + 1e-9 && d.dot(ey).abs() <= half.y + 1e-9
                    });
                    let pose = Pose::new(c.extend(floor + o.shape.vertical_half_extent(*q)), *q);
                    if fits && !occupied {
                        return pose;
                    }
                    if fallback.is_none() && !occupied {
                        fallback = Some(pose);
                    }
                }
            }
            fallback.unwrap_or_else(|| {
                let q = orientations[0];
                Pose::new(r.pose.xy().extend(floor + o.shape.vertical_half_extent(q)), q)
            })
        }
    }
}

fn support_of_placement(p: &Placement) -> Vec<usize> {
    match p {
        Placement::OnTop(b) | Placement::Inside(b) => vec![*b],
        _ => Vec::new(),
    }
}

/// Free objects occupying the spot `obj` must go to.
fn blockers(st: &WorldState, obj: usize, target: &Pose, placement: &Placement) -> Vec<usize> {
    let o = &st.objects[obj];
    let mut out = Vec::new();
    match placement {
        Placement::OnTop(base) => {
            for k in 0..st.objects.len() {
                if k != obj && !st.is_attached(k) && st.support_of(k) == Support::Object(*base) {
                    out.push(k);
                }
            }
        }
        Placement::Inside(_) => {}
        Placement::Position(_) | Placement::Pose(_) => {
            let fp = o.shape.footprint(target);
            for (k, other) in st.objects.iter().enumerate() {
                if k == obj || other.is_static || st.is_attached(k) || other.in_flight {
                    continue;
                }
                if other.footprint().intersects(&fp) && other.bottom() < target.position.z + o.half_height() {
                    out.push(k);
                }
            }
        }
    }
    out
}

/// Whether `obj` rests where `placement` wants it.
fn placed(st: &WorldState, obj: usize, placement: &Placement, target: &Pose, tol: f64) -> bool {
    let o = &st.objects[obj];
    if st.is_attached(obj) || o.in_flight {
        return false;
    }
    match placement {
        Placement::OnTop(base) => st.support_of(obj) == Support::Object(*base),
        Placement::Inside(region) => is_inside(st, obj, *region),
        Placement::Position(p) => o.pose.position.distance(*p) <= tol * 0.5,
        Placement::Pose(p) => {
            let e = pose_error_weighted(&o.pose, p, crate::geom::ROTATION_WEIGHT);
            let (yaw_err, _) = rotation_error(p, &o.pose, 0.0, crate::predicates::Direction::AntiClockwise);
            e.combined <= tol.max(0.01) * 0.5 && yaw_err < 0.02 && target.position.distance(o.pose.position) <= tol.max(0.01)
        }
    }
}

/// Table spot near object `b` clear of every other object and reserved target.
fn free_spot(st: &WorldState, b: usize, reserved: &[(DVec2, f64)]) -> Option<DVec2> {
    let c0 = st.objects[b].pose.xy();
    let rb = plan_radius(st, b);
    let lim = 0.42 - rb;
    for ring in 1..30 {
        let r = 0.04 * ring as f64;
        let n = (8 * ring).min(48);
        for k in 0..n {
            let a = k as f64 / n as f64 * std::f64::consts::TAU;
            let p = c0 + DVec2::new(a.cos(), a.sin()) * r;
            if p.x.abs() > lim || p.y.abs() > lim {
                continue;
            }
            let clear_objects = st.objects.iter().enumerate().all(|(j, o)| {
                j == b || st.is_attached(j) || o.pose.xy().distance(p) >= rb + plan_radius(st, j) + 0.03
            });
            let clear_reserved = reserved.iter().all(|(q, rr)| q.distance(p) >= rb + rr + 0.03);
            if clear_objects && clear_reserved {
                return Some(p);
            }
        }
    }
    None
}

/// Horizontal distance between the tip axis and the centre of `obj` at push contact along `n`.
fn contact_reach(st: &WorldState, obj: usize, n: DVec2) -> f64 {
    let o = &st.objects[obj];
    let r = st.config.ee_radius;
    match o.shape {
        Shape::OrientedBox { .. } => o.footprint().support(n) + r,
        Shape::Disc { radius, .. } => radius + r,
        Shape::Sphere { radius } => {
            let dz = o.pose.position.z - (PUSH_Z + r);
            ((radius + r).powi(2) - dz * dz).max(0.0).sqrt()
        }
    }
}

/// A push direction (face normal for boxes) with free room ahead and behind.
fn shove_direction(st: &WorldState, obj: usize) -> Option<DVec2> {
    let o = &st.objects[obj];
    let c = o.pose.xy();
    let dirs: Vec<DVec2> = match o.shape {
        Shape::OrientedBox { .. } => {
            let y = o.pose.yaw();
            (0..4).map(|k| DVec2::from_angle(y + k as f64 * std::f64::consts::FRAC_PI_2)).collect()
        }
        _ => (0..8).map(|k| DVec2::from_angle(k as f64 * std::f64::consts::FRAC_PI_4)).collect(),
    };
    let r = plan_radius(st, obj);
    let mut best: Option<(f64, DVec2)> = None;
    for d in dirs {
        let ahead = c + d * 0.15;
        let behind = c - d * (r + 0.05);
        if ahead.x.abs() > 0.45 || ahead.y.abs() > 0.45 || behind.x.abs() > 0.5 || behind.y.abs() > 0.5 {
            continue;
        }
        let clearance = st
            .objects
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != obj)
            .map(|(j, _)| {
                let p = st.objects[j].pose.xy();
                seg_dist(p, behind, ahead) - plan_radius(st, j) - r
            })
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(b, _)| clearance > b + 1e-9) {
            best = Some((clearance, d));
        }
    }
    best.map(|(_, d)| d)
}

fn seg_dist(p: DVec2, a: DVec2, b: DVec2) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.length_squared().max(1e-12)).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Free object in the way of pushing `obj` to `to`.
fn corridor_blocker(st: &WorldState, obj: usize, to: DVec2) -> Option<usize> {
    let c = st.objects[obj].pose.xy();
    let r = plan_radius(st, obj);
    (0..st.objects.len())
        .filter(|&j| j != obj && !st.objects[j].is_static && !st.is_attached(j))
        .filter(|&j| seg_dist(st.objects[j].pose.xy(), c, to) < r + plan_radius(st, j) + 0.01)
        .min_by(|&a, &b| {
            let da = st.objects[a].pose.xy().distance(c);
            let db = st.objects[b].pose.xy().distance(c);
            da.total_cmp(&db)
        })
}

/// Side spot for corridor blocker `b`, fixed by the corridor geometry.
fn corridor_parking(st: &WorldState, obj: usize, to: DVec2, b: usize) -> DVec2 {
    let c = st.objects[obj].pose.xy();
    let u = (to - c).normalize_or_zero();
    let pb = st.objects[b].pose.xy();
    let foot = c + u * (pb - c).dot(u);
    let off = plan_radius(st, obj) + plan_radius(st, b) + 0.07;
    let side = |s: f64| foot + u.perp() * s * off;
    let score = |p: DVec2| {
        st.objects
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != obj && *j != b)
            .map(|(j, o)| o.pose.xy().distance(p) - plan_radius(st, j))
            .fold(f64::INFINITY, f64::min)
            .min(0.45 - p.x.abs())
            .min(0.45 - p.y.abs())
    };
    // stay on whichever side the blocker already leans towards when both are usable
    let lean = (pb - foot).dot(u.perp());
    let (a, bb) = (side(1.0), side(-1.0));
    let (sa, sb) = (score(a), score(bb));
    if sa > 0.05 && sb > 0.05 {
        if lean >= 0.0 {
            a
        } else {
            bb
        }
    } else if sa >= sb {
        a
    } else {
        bb
    }
}

/// Point the thrown object's centre should reach.
fn hit_aim(st: &WorldState, obj: usize, target: &HitTarget) -> Option<DVec3> {
    let o = &st.objects[obj];
    match target {
        HitTarget::Object(t) => {
            let t = &st.objects[*t];
            Some(DVec3::new(t.pose.position.x, t.pose.position.y, t.top() + o.half_height()))
        }
        HitTarget::Region(r) => {
            let region = &st.objects[*r];
            let c = region.pose.xy();
            let radial = c.normalize_or_zero();
            let lateral = radial.perp();
            let Shape::OrientedBox { half_extents: [hx, hy, _] } = region.shape else {
                return Some(c.extend(region.top() + o.half_height()));
            };
            let q = 0.45 * hx.min(hy);
            for s in [-1.0, 1.0] {
                let p = c + lateral * s * q;
                let free = st.objects.iter().enumerate().all(|(k, other)| {
                    k == obj || k == *r || other.is_static || other.pose.xy().distance(p) > plan_radius(st, k) + 0.04
                });
                if free {
                    return Some(p.extend(region.top() + o.half_height()));
                }
            }
            None
        }
    }
}

/// (EE launch start, release velocity) for throwing the held `obj` to `aim`.
fn plan_throw(st: &WorldState, cfg: &Config, obj: usize, aim: DVec3, off: DVec3, target: &HitTarget) -> Option<(DVec3, DVec3)> {
    let o = &st.objects[obj];
    let dt = st.config.dt;
    let g = st.config.gravity;
    let angle = THROW_ANGLE_DEG.to_radians();
    let pref = (aim.truncate() - o.pose.xy()).normalize_or_zero();
    let pref_angle = pref.y.atan2(pref.x);
    let mut cands: Vec<f64> = (0..24).map(|k| pref_angle + k as f64 * std::f64::consts::TAU / 24.0).collect();
    cands.sort_by(|a, b| wrap_angle(a - pref_angle).abs().total_cmp(&wrap_angle(b - pref_angle).abs()));
    let target_idx = match target {
        HitTarget::Object(t) | HitTarget::Region(t) => *t,
    };
    let (lo, hi) = (DVec3::from_array(st.config.bounds_min), DVec3::from_array(st.config.bounds_max));
    let inside = |p: DVec3| (0..3).all(|k| p[k] >= lo[k] + 0.02 && p[k] <= hi[k] - 0.02);
    for dist in [0.4, 0.45, 0.35, 0.3] {
        for height in [0.35, 0.3, 0.4] {
            for a in &cands {
                let d = DVec2::from_angle(*a);
                let release = (aim.truncate() - d * dist).extend(height);
                let Ok(v) = ballistic_release(release, aim, angle, g) else { continue };
                if (v * dt).abs().max_element() > st.config.max_translation {
                    continue;
                }
                let start_obj = release - v * dt * 6.0;
                let start = start_obj - off;
                let end = release - off;
                if !inside(start) || !inside(end) || start_obj.z - o.half_height() < 0.08 {
                    continue;
                }
                let q = PlanQuery {
                    start: Pose::new(start, st.ee.pose.orientation),
                    goal: Pose::new(end, st.ee.pose.orientation),
                    body: MovingBody { ee_radius: st.config.ee_radius, attached: Some((o.shape, st.ee.grasp_offset)) },
                    obstacles: obstacles(st, &[]),
                    bounds: (st.config.bounds_min, st.config.bounds_max),
                    seed: 0,
                };
                if !straight_line_clear(&q, &cfg.planner) {
                    continue;
                }
                if !flight_clear(st, obj, target_idx, release, v, aim) {
                    continue;
                }
                return Some((start, v));
            }
        }
    }
    None
}

/// The ballistic path keeps clear of everything but the target until it arrives.
fn flight_clear(st: &WorldState, obj: usize, target: usize, release: DVec3, v: DVec3, aim: DVec3) -> bool {
    let o = &st.objects[obj];
    let g = DVec3::new(0.0, 0.0, -st.config.gravity);
    let horizontal = (aim - release).truncate().length();
    let vh = v.truncate().length().max(1e-9);
    let t_end = horizontal / vh;
    let n = 60;
    let wall = st.config.container_wall;
    for k in 0..=n {
        let t = t_end * k as f64 / n as f64;
        let p = release + v * t + 0.5 * g * t * t;
        if p.z - o.half_height() < -1e-6 {
            return false;
        }
        let pose = Pose::new(p, o.pose.orientation);
        for (j, other) in st.objects.iter().enumerate() {
            if j == obj || j == target {
                continue;
            }
            for (s, sp) in other.parts(wall) {
                if distance(&o.shape, &pose, &s, &sp) < 0.01 {
                    return false;
                }
            }
        }
    }
    true
}

/// A sweep that tips `j` onto a clear patch of table.
fn plan_sweep(st: &WorldState, cfg: &Config, j: usize, goal: &ToppleGoal) -> Option<SweepPlan> {
    let o = &st.objects[j];
    let c = o.pose.xy();
    // face normals first for boxes, then any of 16 directions
    let mut dirs: Vec<DVec2> = match o.shape {
        Shape::OrientedBox { .. } => {
            let y = o.pose.yaw();
            (0..4).map(|k| DVec2::from_angle(y + k as f64 * std::f64::consts::FRAC_PI_2)).collect()
        }
        _ => Vec::new(),
    };
    let faces = dirs.len();
    dirs.extend((0..16).map(|k| DVec2::from_angle(k as f64 * std::f64::consts::TAU / 16.0)));
    let r = st.config.ee_radius;
    let z = o.bottom() + 0.8 * o.height() - r;
    let mut scored: Vec<(f64, SweepPlan)> = Vec::new();
    for (k, h) in dirs.into_iter().enumerate() {
        if k == faces && !scored.is_empty() {
            break;
        }
        let reach = o.footprint().support(h) + r;
        let start = (c - h * (reach + SWEEP_RUNUP)).extend(z);
        if start.x.abs() > 0.55 || start.y.abs() > 0.55 || z < 0.0 {
            continue;
        }
        let mut sim = st.clone();
        sim.topple(j, h);
        sim.settle();
        let moved_others = (0..st.objects.len()).any(|k| k != j && sim.objects[k].pose.position.distance(st.objects[k].pose.position) > 1e-9);
        let lands = match goal {
            ToppleGoal::Table => sim.support_of(j) == Support::Table,
            ToppleGoal::Tipped => vertical_axis_deviation(&sim.objects[j]) > std::f64::consts::FRAC_PI_4,
        };
        let p = sim.objects[j].pose.xy();
        if moved_others || !lands || p.x.abs() > 0.5 || p.y.abs() > 0.5 {
            continue;
        }
        // the run-up must not touch anything but the target
        let q = PlanQuery {
            start: Pose::new(start, st.ee.pose.orientation),
            goal: Pose::new((c - h * reach).extend(z), st.ee.pose.orientation),
            body: MovingBody::bare(r),
            obstacles: obstacles(st, &[j]),
            bounds: (st.config.bounds_min, st.config.bounds_max),
            seed: 0,
        };
        if !straight_line_clear(&q, &cfg.planner) {
            continue;
        }
        let margin = st
            .objects
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != j)
            .map(|(k, other)| other.pose.xy().distance(p) - plan_radius(st, k))
            .fold(1.0, f64::min);
        scored.push((margin, SweepPlan { obj: j, pose: o.pose, dir: h, start }));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().next().map(|(_, p)| p)
}

/// Collision primitives of every free-standing object except `skip` and the held one.
fn obstacles(st: &WorldState, skip: &[usize]) -> Vec<(Shape, Pose)> {
    let wall = st.config.container_wall;
    let mut out = Vec::new();
    for (j, o) in st.objects.iter().enumerate() {
        if skip.contains(&j) || st.is_attached(j) || o.in_flight {
            continue;
        }
        out.extend(o.parts(wall));
    }
    out
}

fn moving_body(st: &WorldState) -> MovingBody {
    MovingBody {
        ee_radius: st.config.ee_radius,
        attached: st.ee.attached.map(|i| (st.objects[i].shape, st.ee.grasp_offset)),
    }
}

/// Objects within clearance of the moving body at the current pose.
fn touching(st: &WorldState, cfg: &Config) -> Vec<usize> {
    let body = moving_body(st).placed(&st.ee.pose);
    let wall = st.config.container_wall;
    (0..st.objects.len())
        .filter(|&j| !st.is_attached(j))
        .filter(|&j| {
            st.objects[j]
                .parts(wall)
                .iter()
                .any(|(s, p)| body.iter().any(|(bs, bp)| distance(bs, bp, s, p) < cfg.planner.clearance + 1e-9))
        })
        .collect()
}

/// Waypoints from the current EE pose to `goal`, arriving vertically from `descent` above it.
fn plan_route(st: &WorldState, cfg: &Config, goal: Pose, exclude: &[usize], descent: f64) -> std::result::Result<Vec<Pose>, String> {
    let start = st.ee.pose;
    let pre = Pose::new(goal.position + DVec3::Z * descent, goal.orientation);
    let near = touching(st, cfg);
    let mut skip_start: Vec<usize> = near.clone();
    if descent == 0.0 {
        skip_start.extend_from_slice(exclude);
    }
    let body = moving_body(st);
    let bounds = (st.config.bounds_min, st.config.bounds_max);
    let query = |a: Pose, b: Pose, skip: &[usize]| PlanQuery {
        start: a,
        goal: b,
        body: body.clone(),
        obstacles: obstacles(st, skip),
        bounds,
        seed: st.step as u64,
    };
    let skip_end: Vec<usize> = if descent == 0.0 { exclude.to_vec() } else { Vec::new() };
    let mut skip_all = skip_start.clone();
    skip_all.extend_from_slice(&skip_end);
    let mut path: Option<Vec<Pose>> = None;
    if straight_line_clear(&query(start, pre, &skip_all), &cfg.planner) && end_clear(&query(pre, pre, &skip_end), cfg) {
        path = Some(vec![start, pre]);
    }
    if path.is_none() {
        let hang = st.ee.attached.map_or(0.0, |i| st.tip().z - st.objects[i].bottom());
        let top = st
            .objects
            .iter()
            .enumerate()
            .filter(|(j, o)| !st.is_attached(*j) && !o.in_flight)
            .map(|(_, o)| o.top())
            .fold(0.0, f64::max);
        let tz = (top + hang + 0.04).max(start.position.z).max(pre.position.z).min(st.config.bounds_max[2] - 0.01);
        let l1 = Pose::new(start.position.truncate().extend(tz), start.orientation);
        let l2 = Pose::new(pre.position.truncate().extend(tz), pre.orientation);
        let ok = straight_line_clear(&query(start, l1, &skip_start), &cfg.planner)
            && straight_line_clear(&query(l1, l2, &[]), &cfg.planner)
            && straight_line_clear(&query(l2, pre, &skip_end), &cfg.planner);
        if ok {
            path = Some(vec![start, l1, l2, pre]);
        }
    }
    let mut waypoints = match path {
        Some(p) => p,
        None => {
            let q = query(start, pre, &skip_all);
            rrt_connect(&q, &cfg.planner).map_err(|e| format!("planning failed: {e}"))?.waypoints
        }
    };
    if descent > 0.0 {
        waypoints.push(goal);
    }
    waypoints.dedup_by(|a, b| a.position.distance(b.position) < 1e-12 && quat_angle(a.orientation, b.orientation) < 1e-12);
    Ok(waypoints)
}

fn end_clear(q: &PlanQuery, cfg: &Config) -> bool {
    straight_line_clear(q, &cfg.planner)
}

/// (segment index, parameter, distance) of the route point closest to `p`, preferring later segments.
fn closest_on_route(w: &[Pose], p: DVec3) -> (usize, f64, f64) {
    if w.len() < 2 {
        return (0, 1.0, w.first().map_or(0.0, |a| a.position.distance(p)));
    }
    let mut best = (0, 0.0, f64::INFINITY);
    for k in 0..w.len() - 1 {
        let (a, b) = (w[k].position, w[k + 1].position);
        let ab = b - a;
        let t = if ab.length_squared() < 1e-18 { 1.0 } else { ((p - a).dot(ab) / ab.length_squared()).clamp(0.0, 1.0) };
        let d = (a + ab * t).distance(p);
        if d <= best.2 + 1e-9 {
            best = (k, t, d);
        }
    }
    best
}

/// Translation and rotation vector for one step along the route, never cutting corners.
fn follow(w: &[Pose], ee: &Pose, step: f64, rot_step: f64) -> (DVec3, DVec3) {
    let (mut k, mut t, _) = closest_on_route(w, ee.position);
    if w.len() < 2 {
        let goal = w.first().copied().unwrap_or(*ee);
        return toward(ee, &goal, step, rot_step);
    }
    // skip exhausted segments (reached their end in both position and orientation)
    loop {
        let b = &w[k + 1];
        let at_end = t >= 1.0 - 1e-12 || w[k].position.distance(b.position) < 1e-12;
        if at_end && ee.position.distance(b.position) < REACHED && quat_angle(ee.orientation, b.orientation) < REACHED && k + 2 < w.len() {
            k += 1;
            t = 0.0;
            continue;
        }
        break;
    }
    let a = &w[k];
    let b = &w[k + 1];
    let p = a.position.lerp(b.position, t);
    let lateral = p - ee.position;
    let len = p.distance(b.position);
    let rot = quat_angle(ee.orientation, b.orientation);
    let f = if len <= step && rot <= rot_step { 1.0 } else { (step / len.max(1e-12)).min(rot_step / rot.max(1e-12)).min(1.0) };
    let target_p = p + (b.position - p) * f;
    let target_q = ee.orientation.slerp(b.orientation, f);
    let mut d = target_p - ee.position;
    if d.length() > step + lateral.length() {
        d *= (step + lateral.length()) / d.length();
    }
    (d, rotation_between(ee.orientation, target_q))
}

fn toward(ee: &Pose, goal: &Pose, step: f64, rot_step: f64) -> (DVec3, DVec3) {
    let d = goal.position - ee.position;
    let len = d.length();
    let rot = quat_angle(ee.orientation, goal.orientation);
    let f = if len <= step && rot <= rot_step { 1.0 } else { (step / len.max(1e-12)).min(rot_step / rot.max(1e-12)).min(1.0) };
    (d * f, rotation_between(ee.orientation, ee.orientation.slerp(goal.orientation, f)))
}

/// World-frame rotation vector taking `from` to `to`.
fn rotation_between(from: DQuat, to: DQuat) -> DVec3 {
    let mut q = to * from.inverse();
    if q.w < 0.0 {
        q = -q;
    }
    let v = q.to_scaled_axis();
    if v.is_finite() {
        v
    } else {
        DVec3::ZERO
    }
}

/// The next leaf to work on: first open child of a Sequence, nearest open child of a Set.
pub fn next_predicate(tree: &PredicateTree, st: &WorldState) -> Option<usize> {
    pick_node(tree, 0, st, None)
}

/// Like [`next_predicate`], but a Set keeps working on the child holding `current` while it is open.
pub fn next_predicate_from(tree: &PredicateTree, st: &WorldState, current: Option<usize>) -> Option<usize> {
    pick_node(tree, 0, st, current)
}

fn is_ancestor(tree: &PredicateTree, a: usize, mut i: usize) -> bool {
    loop {
        if i == a {
            return true;
        }
        match tree.nodes[i].parent {
            Some(p) => i = p,
            None => return false,
        }
    }
}

fn pick_node(tree: &PredicateTree, i: usize, st: &WorldState, current: Option<usize>) -> Option<usize> {
    let n = &tree.nodes[i];
    if n.is_done() || n.is_failed() || n.pred.is_guard() {
        return None;
    }
    match &n.pred {
        Predicate::Sequence { .. } => {
            n.children.iter().find(|&&c| !tree.nodes[c].is_done()).and_then(|&c| pick_node(tree, c, st, current))
        }
        Predicate::Once { .. } => pick_node(tree, n.children[0], st, current),
        Predicate::Set { .. } => {
            let open: Vec<usize> = n
                .children
                .iter()
                .copied()
                .filter(|&c| !tree.nodes[c].is_done() && !tree.nodes[c].is_failed() && !tree.nodes[c].pred.is_guard())
                .collect();
            if let Some(cur) = current {
                if let Some(&c) = open.iter().find(|&&c| is_ancestor(tree, c, cur)) {
                    if let Some(leaf) = pick_node(tree, c, st, current) {
                        return Some(leaf);
                    }
                }
            }
            let tip = st.tip();
            open.into_iter()
                .filter_map(|c| anchor(tree, c, st).map(|p| (p.distance(tip), c)))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .and_then(|(_, c)| pick_node(tree, c, st, current))
        }
        _ => Some(i),
    }
}

/// Where the work for node `i` starts, for greedy ordering.
fn anchor(tree: &PredicateTree, i: usize, st: &WorldState) -> Option<DVec3> {
    let n = &tree.nodes[i];
    if n.pred.is_logical() {
        return n
            .children
            .iter()
            .find(|&&c| !tree.nodes[c].is_done() && !tree.nodes[c].pred.is_guard())
            .and_then(|&c| anchor(tree, c, st));
    }
    match &n.pred {
        Predicate::EEAtPos { target, .. } => Some(DVec3::from_array(*target)),
        Predicate::EEAtPose { target, .. } => Some(target.position),
        Predicate::TraceGoals { .. } => st
            .goals
            .iter()
            .find(|g| g.status == crate::world::GoalStatus::Active)
            .map(|g| DVec3::from_array(g.position))
            .or(Some(st.tip())),
        _ => n.objects.first().map(|&o| st.objects[o].pose.position),
    }
}

/// Per-step record of what the oracle did.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub node: Option<usize>,
    pub kind: Option<SolverKind>,
    pub phase: Phase,
    pub status: SolverStatus,
}

/// The oracle policy: greedy scheduling over the predicate tree plus skill solvers.
#[derive(Debug, Clone)]
pub struct Oracle {
    cfg: Config,
    active: Option<(usize, SkillSolver)>,
    used: BTreeSet<SolverKind>,
    failures: usize,
    last: Option<OracleStep>,
}

/// Solver failures on one node tolerated before the oracle gives up on it.
const MAX_FAILURES: usize = 5;

impl Oracle {
    pub fn new(cfg: &Config) -> Self {
        Oracle { cfg: cfg.clone(), active: None, used: BTreeSet::new(), failures: 0, last: None }
    }

    /// Throws away every solver; the next step rebuilds them from the state.
    pub fn reset_solvers(&mut self) {
        self.active = None;
        self.failures = 0;
    }

    pub fn kinds_used(&self) -> &BTreeSet<SolverKind> {
        &self.used
    }

    pub fn last_step(&self) -> Option<&OracleStep> {
        self.last.as_ref()
    }

    pub fn act(&mut self, st: &WorldState, tree: &PredicateTree) -> Action {
        let current = self.active.as_ref().map(|(n, _)| *n);
        let Some(node) = next_predicate_from(tree, st, current) else {
            self.active = None;
            self.last = Some(OracleStep { node: None, kind: None, phase: Phase::Idle, status: SolverStatus::Done });
            return hold(st);
        };
        if self.active.as_ref().is_none_or(|(n, _)| *n != node) {
            self.failures = 0;
            match SkillSolver::for_node(tree, node, st) {
                Ok(s) => self.active = Some((node, s)),
                Err(e) => {
                    log::warn!("no solver for node {node}: {e}");
                    self.last = Some(OracleStep { node: Some(node), kind: None, phase: Phase::Idle, status: SolverStatus::Failed(e.to_string()) });
                    return hold(st);
                }
            }
        }
        let (_, solver) = self.active.as_mut().expect("solver just set");
        let (action, status) = solver.act(st, &self.cfg);
        self.used.extend(solver.kinds_used().iter().copied());
        self.last = Some(OracleStep { node: Some(node), kind: Some(solver.kind), phase: solver.phase(), status: status.clone() });
        if let SolverStatus::Failed(reason) = &status {
            self.failures += 1;
            log::debug!("solver for node {node} failed: {reason}");
            if self.failures < MAX_FAILURES {
                // rebuild from the current state on the next step
                let n = self.failures;
                self.active = None;
                self.failures = n;
            }
        }
        action
    }
}
