//! Predicate calculus for task goals.
//!
//! A [`Predicate`] is a declarative tree referring to objects by id. It is
//! compiled against a world into a [`PredicateTree`], which captures
//! baselines at reset and then yields a dense reward and a latched success
//! flag at every step.

use parry3d_f64::glamx::{DVec2, DVec3};
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::geom::{overlap_fraction, pose_error_weighted, quat_angle, wrap_angle, Pose, ROTATION_WEIGHT};
use crate::world::{vertical_axis_deviation, Body, Event, GoalStatus, ObjectKind, Support, WorldState, INSIDE_OVERLAP};

/// Angles (degrees) a rotation predicate may ask for.
pub const ROTATION_ANGLES: [f64; 5] = [30.0, 60.0, 90.0, 120.0, 150.0];
/// Minimum shaping scale for distance rewards (m).
const MIN_SHAPING: f64 = 0.05;
/// Criterion rewards stay below this until the criterion holds.
const PARTIAL_CAP: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TouchMode {
    Gentle,
    Push,
    Topple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Clockwise,
    AntiClockwise,
}

impl Direction {
    /// Sign of the yaw change (counter-clockwise positive, seen from above).
    pub fn sign(self) -> f64 {
        match self {
            Direction::Clockwise => -1.0,
            Direction::AntiClockwise => 1.0,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Direction::Clockwise => "clockwise",
            Direction::AntiClockwise => "anti-clockwise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Predicate {
    EEAtPos { target: [f64; 3], tol: f64 },
    EEAtPose { target: Pose, tol: f64 },
    AtPos { obj: String, target: [f64; 3], tol: f64 },
    AtPose { obj: String, target: Pose, tol: f64 },
    OnTop { obj: String, base: String },
    Inside { obj: String, container: String },
    Touch { obj: String, mode: TouchMode },
    Hit { thrown: String, target: String, require_topple: bool },
    ToppleStructure { objs: Vec<String> },
    /// Held by the gripper and clear of the table.
    Grasped { obj: String },
    PushProgress { obj: String, goal: String, reduce_frac: f64, cone_deg: f64 },
    RotatedBy { obj: String, angle_deg: f64, direction: Direction, angle_tol_deg: f64, pos_tol: f64 },
    TouchedGently { obj: String, max_move: f64 },
    TouchPushed { obj: String, min_move: f64, forbid_topple: bool },
    Balanced { objs: Vec<String>, tilt_tol: f64 },
    TraceGoals { count: usize },
    /// Guard: fails if the gripper or held object touches any listed object.
    NotTouching { obstacles: Vec<String> },
    /// Guard: fails if any listed object is ever grasped.
    NeverGrasped { objs: Vec<String> },
    Set { children: Vec<Predicate> },
    Sequence { children: Vec<Predicate> },
    Once { child: Box<Predicate> },
}

impl Predicate {
    pub fn set(children: Vec<Predicate>) -> Self {
        Predicate::Set { children }
    }

    pub fn sequence(children: Vec<Predicate>) -> Self {
        Predicate::Sequence { children }
    }

    pub fn once(child: Predicate) -> Self {
        Predicate::Once { child: Box::new(child) }
    }

    pub fn rotated_by(obj: &str, angle_deg: f64, direction: Direction) -> Self {
        Predicate::RotatedBy { obj: obj.into(), angle_deg, direction, angle_tol_deg: 5.0, pos_tol: 0.05 }
    }

    pub fn push_progress(obj: &str, goal: &str) -> Self {
        Predicate::PushProgress { obj: obj.into(), goal: goal.into(), reduce_frac: 0.30, cone_deg: 45.0 }
    }

    pub fn is_logical(&self) -> bool {
        matches!(self, Predicate::Set { .. } | Predicate::Sequence { .. } | Predicate::Once { .. })
    }

    /// Guards constrain a whole episode; they never complete on their own.
    pub fn is_guard(&self) -> bool {
        matches!(self, Predicate::NotTouching { .. } | Predicate::NeverGrasped { .. })
    }

    pub fn children(&self) -> Vec<&Predicate> {
        match self {
            Predicate::Set { children } | Predicate::Sequence { children } => children.iter().collect(),
            Predicate::Once { child } => vec![child.as_ref()],
            _ => Vec::new(),
        }
    }

    /// Object ids referenced by a leaf, in a fixed per-variant order.
    pub fn object_refs(&self) -> Vec<&str> {
        use Predicate::*;
        match self {
            AtPos { obj, .. }
            | AtPose { obj, .. }
            | Touch { obj, .. }
            | Grasped { obj }
            | RotatedBy { obj, .. }
            | TouchedGently { obj, .. }
            | TouchPushed { obj, .. } => vec![obj],
            OnTop { obj, base } => vec![obj, base],
            Inside { obj, container } => vec![obj, container],
            Hit { thrown, target, .. } => vec![thrown, target],
            PushProgress { obj, goal, .. } => vec![obj, goal],
            ToppleStructure { objs } | Balanced { objs, .. } | NeverGrasped { objs } => objs.iter().map(|s| s.as_str()).collect(),
            NotTouching { obstacles } => obstacles.iter().map(|s| s.as_str()).collect(),
            EEAtPos { .. } | EEAtPose { .. } | TraceGoals { .. } | Set { .. } | Sequence { .. } | Once { .. } => Vec::new(),
        }
    }

    /// Short operator name.
    pub fn name(&self) -> &'static str {
        use Predicate::*;
        match self {
            EEAtPos { .. } => "EEAtPos",
            EEAtPose { .. } => "EEAtPose",
            AtPos { .. } => "AtPos",
            AtPose { .. } => "AtPose",
            OnTop { .. } => "OnTop",
            Inside { .. } => "Inside",
            Touch { .. } => "Touch",
            Hit { .. } => "Hit",
            ToppleStructure { .. } => "ToppleStructure",
            Grasped { .. } => "Grasped",
            PushProgress { .. } => "PushProgress",
            RotatedBy { .. } => "RotatedBy",
            TouchedGently { .. } => "TouchedGently",
            TouchPushed { .. } => "TouchPushed",
            Balanced { .. } => "Balanced",
            TraceGoals { .. } => "TraceGoals",
            NotTouching { .. } => "NotTouching",
            NeverGrasped { .. } => "NeverGrasped",
            Set { .. } => "Set",
            Sequence { .. } => "Sequence",
            Once { .. } => "Once",
        }
    }
}

fn f(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

fn vec3(v: &[f64; 3]) -> String {
    format!("[{},{},{}]", f(v[0]), f(v[1]), f(v[2]))
}

fn pose(p: &Pose) -> String {
    let q = p.orientation;
    format!("{}@[{},{},{},{}]", vec3(&p.position.to_array()), f(q.w), f(q.x), f(q.y), f(q.z))
}

/// Canonical text form, stable across runs.
impl fmt::Display for Predicate {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Predicate::*;
        let list = |v: &[String]| v.join(",");
        match self {
            EEAtPos { target, tol } => write!(out, "EEAtPos({},{})", vec3(target), f(*tol)),
            EEAtPose { target, tol } => write!(out, "EEAtPose({},{})", pose(target), f(*tol)),
            AtPos { obj, target, tol } => write!(out, "AtPos({obj},{},{})", vec3(target), f(*tol)),
            AtPose { obj, target, tol } => write!(out, "AtPose({obj},{},{})", pose(target), f(*tol)),
            OnTop { obj, base } => write!(out, "OnTop({obj},{base})"),
            Inside { obj, container } => write!(out, "Inside({obj},{container})"),
            Touch { obj, mode } => write!(out, "Touch({obj},{mode:?})"),
            Hit { thrown, target, require_topple } => write!(out, "Hit({thrown},{target},{require_topple})"),
            ToppleStructure { objs } => write!(out, "ToppleStructure([{}])", list(objs)),
            Grasped { obj } => write!(out, "Grasped({obj})"),
            PushProgress { obj, goal, reduce_frac, cone_deg } => {
                write!(out, "PushProgress({obj},{goal},{},{})", f(*reduce_frac), f(*cone_deg))
            }
            RotatedBy { obj, angle_deg, direction, angle_tol_deg, pos_tol } => write!(
                out,
                "RotatedBy({obj},{},{},{},{})",
                f(*angle_deg),
                direction.word(),
                f(*angle_tol_deg),
                f(*pos_tol)
            ),
            TouchedGently { obj, max_move } => write!(out, "TouchedGently({obj},{})", f(*max_move)),
            TouchPushed { obj, min_move, forbid_topple } => {
                write!(out, "TouchPushed({obj},{},{forbid_topple})", f(*min_move))
            }
            Balanced { objs, tilt_tol } => write!(out, "Balanced([{}],{})", list(objs), f(*tilt_tol)),
            TraceGoals { count } => write!(out, "TraceGoals({count})"),
            NotTouching { obstacles } => write!(out, "NotTouching([{}])", list(obstacles)),
            NeverGrasped { objs } => write!(out, "NeverGrasped([{}])", list(objs)),
            Set { children } | Sequence { children } => {
                write!(out, "{}(", self.name())?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        out.write_char(',')?;
                    }
                    write!(out, "{c}")?;
                }
                out.write_char(')')
            }
            Once { child } => write!(out, "Once({child})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Active,
    Done,
    Failed,
}

/// Quantities captured when the tree is compiled.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Baseline {
    pub poses: Vec<Pose>,
    /// Leaf-specific initial distance used for reward shaping.
    pub distance: f64,
}

/// Event-derived facts accumulated over the episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tracker {
    pub contact: bool,
    pub grasped: bool,
    pub hit: bool,
    pub max_move: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub pred: Predicate,
    pub objects: Vec<usize>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub depth: usize,
    pub status: Status,
    pub reward: f64,
    pub done_step: Option<usize>,
    pub baseline: Baseline,
    pub tracker: Tracker,
}

impl Node {
    pub fn is_done(&self) -> bool {
        self.status == Status::Done
    }

    pub fn is_failed(&self) -> bool {
        self.status == Status::Failed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub index: usize,
    pub depth: usize,
    pub name: String,
    pub status: Status,
    pub reward: f64,
    pub done_step: Option<usize>,
}

/// Compiled, stateful predicate tree for one episode. Node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateTree {
    pub nodes: Vec<Node>,
    pub rotation_weight: f64,
    steps: usize,
}

impl PredicateTree {
    pub fn new(pred: &Predicate, state: &WorldState) -> Result<Self> {
        Self::with_rotation_weight(pred, state, ROTATION_WEIGHT)
    }

    pub fn with_rotation_weight(pred: &Predicate, state: &WorldState, rotation_weight: f64) -> Result<Self> {
        let mut tree = PredicateTree { nodes: Vec::new(), rotation_weight, steps: 0 };
        tree.add(pred, None, 0, state)?;
        for i in 0..tree.nodes.len() {
            tree.nodes[i].reward = tree.leaf_reward_and_condition(i, state).0;
        }
        Ok(tree)
    }

    fn add(&mut self, pred: &Predicate, parent: Option<usize>, depth: usize, state: &WorldState) -> Result<usize> {
        validate(pred)?;
        let objects = pred
            .object_refs()
            .into_iter()
            .map(|id| state.object_index(id).ok_or_else(|| Error::MissingObject(id.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let idx = self.nodes.len();
        let baseline = capture_baseline(pred, &objects, state);
        self.nodes.push(Node {
            pred: pred.clone(),
            objects,
            children: Vec::new(),
            parent,
            depth,
            status: Status::Pending,
            reward: 0.0,
            done_step: None,
            baseline,
            tracker: Tracker::default(),
        });
        for c in pred.children() {
            let ci = self.add(c, Some(idx), depth + 1, state)?;
            self.nodes[idx].children.push(ci);
        }
        Ok(idx)
    }

    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn success(&self) -> bool {
        self.nodes[0].is_done()
    }

    pub fn failed(&self) -> bool {
        self.nodes[0].is_failed()
    }

    pub fn reward(&self) -> f64 {
        self.nodes[0].reward
    }

    /// Number of evaluations performed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Folds one world transition into the tree; returns (root reward, root success).
    pub fn evaluate(&mut self, _prev: &WorldState, next: &WorldState) -> Result<(f64, bool)> {
        for &i in self.nodes.iter().flat_map(|n| n.objects.iter()) {
            if i >= next.objects.len() {
                return Err(Error::MissingObject(format!("#{i}")));
            }
        }
        self.steps += 1;
        self.update_trackers(next);
        self.eval_node(0, true, next);
        Ok((self.nodes[0].reward, self.nodes[0].is_done()))
    }

    fn update_trackers(&mut self, s: &WorldState) {
        for n in self.nodes.iter_mut() {
            if n.pred.is_logical() || n.objects.is_empty() {
                continue;
            }
            let first = n.objects[0];
            for e in &s.events {
                match *e {
                    Event::Contact { a: Body::Ee, b, .. } if b == first => n.tracker.contact = true,
                    Event::Grasp { object } if n.objects.contains(&object) => n.tracker.grasped = true,
                    Event::Hit { thrown, target, .. } if n.objects.len() > 1 && thrown == first && target == n.objects[1] => {
                        n.tracker.hit = true
                    }
                    _ => {}
                }
            }
            if let Some(p0) = n.baseline.poses.first() {
                let moved = s.objects[first].pose.position.distance(p0.position);
                n.tracker.max_move = n.tracker.max_move.max(moved);
            }
        }
    }

    fn eval_node(&mut self, i: usize, active: bool, s: &WorldState) {
        let step = self.steps;
        if self.nodes[i].is_failed() {
            self.nodes[i].reward = 0.0;
            return;
        }
        let children = self.nodes[i].children.clone();
        match &self.nodes[i].pred {
            Predicate::Set { .. } => {
                let mut all_done = true;
                let mut failed = false;
                let (mut sum, mut n) = (0.0, 0usize);
                for &c in &children {
                    self.eval_node(c, active, s);
                    let node = &self.nodes[c];
                    failed |= node.is_failed();
                    if !node.pred.is_guard() {
                        all_done &= node.is_done();
                        sum += node.reward;
                        n += 1;
                    }
                }
                let reward = if n == 0 { 1.0 } else { sum / n as f64 };
                self.finish_logical(i, active, all_done, failed, reward, step);
            }
            Predicate::Sequence { .. } => {
                let mut failed = false;
                let mut done = 0usize;
                let mut active_reward = 0.0;
                let mut gate = active;
                for &c in &children {
                    let was_done = self.nodes[c].is_done();
                    self.eval_node(c, gate && !was_done, s);
                    let node = &self.nodes[c];
                    failed |= node.is_failed();
                    if node.is_done() && (was_done || gate) {
                        done += 1;
                        // a child completing this step opens the next one only from the next step
                        if !was_done {
                            gate = false;
                        }
                    } else if gate {
                        active_reward = node.reward;
                        gate = false;
                    }
                }
                let n = children.len();
                let all_done = done == n;
                let reward = if n == 0 { 1.0 } else { (done as f64 + if all_done { 0.0 } else { active_reward }) / n as f64 };
                self.finish_logical(i, active, all_done, failed, reward.min(1.0), step);
            }
            Predicate::Once { .. } => {
                let c = children[0];
                self.eval_node(c, active, s);
                let (done, failed, reward) = (self.nodes[c].is_done(), self.nodes[c].is_failed(), self.nodes[c].reward);
                self.finish_logical(i, active, done, failed, reward, step);
            }
            _ => {
                if self.nodes[i].is_done() {
                    self.nodes[i].reward = 1.0;
                    return;
                }
                let (reward, cond, failed) = self.leaf_reward_and_condition(i, s);
                let node = &mut self.nodes[i];
                if failed {
                    node.status = Status::Failed;
                    node.reward = 0.0;
                } else if active && cond && !node.pred.is_guard() {
                    node.status = Status::Done;
                    node.done_step = Some(step);
                    node.reward = 1.0;
                } else {
                    node.status = if active { Status::Active } else { Status::Pending };
                    node.reward = reward;
                }
            }
        }
    }

    fn finish_logical(&mut self, i: usize, active: bool, all_done: bool, failed: bool, reward: f64, step: usize) {
        let node = &mut self.nodes[i];
        if failed {
            node.status = Status::Failed;
            node.reward = 0.0;
        } else if node.is_done() {
            node.reward = 1.0;
        } else if all_done && active {
            node.status = Status::Done;
            node.done_step = Some(step);
            node.reward = 1.0;
        } else {
            node.status = if active { Status::Active } else { Status::Pending };
            node.reward = reward.clamp(0.0, 1.0);
        }
    }

    /// (dense reward, success condition, permanent failure) of a leaf in state `s`.
    fn leaf_reward_and_condition(&self, i: usize, s: &WorldState) -> (f64, bool, bool) {
        let n = &self.nodes[i];
        let o = &n.objects;
        let b = &n.baseline;
        let t = &n.tracker;
        let cfg = &s.config;
        let resting = |k: usize| !s.is_attached(k) && !s.objects[k].in_flight;
        let shaped = |d: f64, tol: f64| {
            if d <= tol {
                1.0
            } else {
                (1.0 - (d - tol) / (b.distance - tol).max(MIN_SHAPING)).clamp(0.0, 1.0).min(PARTIAL_CAP)
            }
        };
        let partial = |d: f64| (1.0 - d / b.distance.max(MIN_SHAPING)).clamp(0.0, 1.0) * PARTIAL_CAP;
        match &n.pred {
            Predicate::EEAtPos { target, tol } => {
                let d = s.tip().distance(DVec3::from_array(*target));
                let r = shaped(d, *tol);
                (r, d <= *tol, false)
            }
            Predicate::EEAtPose { target, tol } => {
                let d = pose_error_weighted(&s.ee.pose, target, self.rotation_weight).combined;
                (shaped(d, *tol), d <= *tol, false)
            }
            Predicate::AtPos { target, tol, .. } => {
                let d = s.objects[o[0]].pose.position.distance(DVec3::from_array(*target));
                (shaped(d, *tol), d <= *tol && resting(o[0]), false)
            }
            Predicate::AtPose { target, tol, .. } => {
                let d = pose_error_weighted(&s.objects[o[0]].pose, target, self.rotation_weight).combined;
                (shaped(d, *tol), d <= *tol && resting(o[0]), false)
            }
            Predicate::OnTop { .. } => {
                let ok = s.support_of(o[0]) == Support::Object(o[1]) && !s.ee_touching(o[0]);
                let d = placement_distance(s, o[0], o[1]);
                (if ok { 1.0 } else { partial(d) }, ok, false)
            }
            Predicate::Inside { .. } => {
                let ok = is_inside(s, o[0], o[1]) && !s.ee_touching(o[0]);
                let d = placement_distance(s, o[0], o[1]);
                (if ok { 1.0 } else { partial(d) }, ok, false)
            }
            Predicate::Touch { mode, .. } => {
                let obj = &s.objects[o[0]];
                let ok = match mode {
                    TouchMode::Gentle => t.contact && !t.grasped,
                    TouchMode::Push => t.contact && !t.grasped && t.max_move > cfg.contact_tolerance,
                    TouchMode::Topple => t.contact && vertical_axis_deviation(obj) > std::f64::consts::FRAC_PI_4,
                };
                (if ok { 1.0 } else { partial(s.ee_distance(o[0])) }, ok, false)
            }
            Predicate::Hit { require_topple, .. } => {
                let target = &s.objects[o[1]];
                let topple_ok = !*require_topple || vertical_axis_deviation(target) > std::f64::consts::FRAC_PI_4;
                let ok = t.hit && topple_ok;
                let d = s.objects[o[0]].pose.position.distance(target.pose.position);
                (if ok { 1.0 } else { partial(d) }, ok, false)
            }
            Predicate::ToppleStructure { .. } => {
                let down = o.iter().filter(|&&k| s.support_of(k) == Support::Table).count();
                let ok = down == o.len();
                (if ok { 1.0 } else { down as f64 / o.len().max(1) as f64 * PARTIAL_CAP }, ok, false)
            }
            Predicate::Grasped { .. } => {
                let obj = &s.objects[o[0]];
                let ok = s.is_attached(o[0]) && obj.bottom() > cfg.contact_tolerance;
                let d = s.tip().distance(DVec3::new(obj.pose.position.x, obj.pose.position.y, obj.top()));
                (if ok { 1.0 } else { partial(d) }, ok, false)
            }
            Predicate::PushProgress { reduce_frac, cone_deg, .. } => {
                let p0 = b.poses[0].xy();
                let g0 = b.poses[1].xy();
                let p = s.objects[o[0]].pose.xy();
                let g = s.objects[o[1]].pose.xy();
                let d0 = p0.distance(g0);
                let d = p.distance(g);
                let disp = p - p0;
                let axis = g0 - p0;
                let in_cone = disp.length() > 1e-9 && angle_between(disp, axis) <= cone_deg.to_radians() + 1e-12;
                let reduced = d <= (1.0 - reduce_frac) * d0 + 1e-12;
                let ok = reduced && in_cone && !t.grasped && resting(o[0]);
                let progress = ((d0 - d) / (reduce_frac * d0).max(1e-9)).clamp(0.0, 1.0);
                (if ok { 1.0 } else { progress * PARTIAL_CAP }, ok, t.grasped)
            }
            Predicate::RotatedBy { angle_deg, direction, angle_tol_deg, pos_tol, .. } => {
                let obj = &s.objects[o[0]];
                let (err, drift) = rotation_error(&b.poses[0], &obj.pose, *angle_deg, *direction);
                let ok = err <= angle_tol_deg.to_radians() + 1e-12 && drift <= *pos_tol && resting(o[0]);
                let r = (1.0 - err / angle_deg.to_radians()).clamp(0.0, 1.0) * PARTIAL_CAP;
                (if ok { 1.0 } else { r }, ok, false)
            }
            Predicate::TouchedGently { max_move, .. } => {
                let failed = t.grasped || t.max_move > *max_move;
                let ok = t.contact && !failed;
                (if ok { 1.0 } else { partial(s.ee_distance(o[0])) }, ok, failed)
            }
            Predicate::TouchPushed { min_move, forbid_topple, .. } => {
                let obj = &s.objects[o[0]];
                let toppled = vertical_axis_deviation(obj) > std::f64::consts::FRAC_PI_4;
                let failed = t.grasped || (*forbid_topple && toppled);
                let moved = obj.pose.position.distance(b.poses[0].position);
                let ok = moved >= *min_move && resting(o[0]) && !failed;
                let r = (moved / min_move).clamp(0.0, 1.0) * PARTIAL_CAP;
                (if ok { 1.0 } else { r }, ok, failed)
            }
            Predicate::Balanced { tilt_tol, .. } => {
                let on = match &s.scale {
                    Some(sc) => o.iter().filter(|k| sc.left.contains(k) || sc.right.contains(k)).count(),
                    None => 0,
                };
                let all_on = on == o.len() && s.scale.is_some();
                let ok = all_on && s.scale_tilt().abs() <= *tilt_tol && o.iter().all(|&k| !s.ee_touching(k));
                (if ok { 1.0 } else { on as f64 / o.len().max(1) as f64 * PARTIAL_CAP }, ok, false)
            }
            Predicate::TraceGoals { count } => {
                let done = s.goals.iter().filter(|g| g.status == GoalStatus::Done).count();
                let ok = done >= *count;
                let active = s.goals.iter().find(|g| g.status == GoalStatus::Active).map(|g| {
                    let d = s.tip().distance(DVec3::from_array(g.position));
                    (1.0 - (d - g.radius).max(0.0) / 0.5).clamp(0.0, 1.0)
                });
                let r = if ok { 1.0 } else { ((done as f64 + active.unwrap_or(0.0) * 0.5) / (*count).max(1) as f64).min(PARTIAL_CAP) };
                (r, ok, false)
            }
            Predicate::NotTouching { .. } => {
                let held = s.ee.attached;
                let touched = s.events.iter().any(|e| match e {
                    Event::Contact { a: Body::Ee, b, .. } => o.contains(b),
                    Event::Contact { a: Body::Object(h), b, .. } => Some(*h) == held && o.contains(b),
                    _ => false,
                });
                (if touched { 0.0 } else { 1.0 }, false, touched)
            }
            Predicate::NeverGrasped { .. } => (if t.grasped { 0.0 } else { 1.0 }, false, t.grasped),
            Predicate::Set { .. } | Predicate::Sequence { .. } | Predicate::Once { .. } => (n.reward, n.is_done(), n.is_failed()),
        }
    }

    /// Per-node status, in tree order.
    pub fn report(&self) -> Vec<NodeReport> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeReport {
                index: i,
                depth: n.depth,
                name: n.pred.name().to_string(),
                status: n.status,
                reward: n.reward,
                done_step: n.done_step,
            })
            .collect()
    }

    /// Leaves that became done during the most recent evaluation.
    pub fn newly_done(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].children.is_empty() && self.nodes[i].done_step == Some(self.steps) && self.steps > 0)
            .collect()
    }

    pub fn canonical(&self) -> String {
        self.nodes[0].pred.to_string()
    }
}

fn validate(pred: &Predicate) -> Result<()> {
    match pred {
        Predicate::RotatedBy { angle_deg, .. } if !ROTATION_ANGLES.iter().any(|a| (a - angle_deg).abs() < 1e-9) => {
            Err(Error::InvalidPredicate(format!("rotation angle {angle_deg} not in {ROTATION_ANGLES:?}")))
        }
        Predicate::Once { .. } | Predicate::Set { .. } | Predicate::Sequence { .. } => Ok(()),
        Predicate::PushProgress { reduce_frac, .. } if !(0.0..1.0).contains(reduce_frac) => {
            Err(Error::InvalidPredicate(format!("reduce fraction {reduce_frac}")))
        }
        _ => Ok(()),
    }
}

fn capture_baseline(pred: &Predicate, objects: &[usize], s: &WorldState) -> Baseline {
    let poses: Vec<Pose> = objects.iter().map(|&i| s.objects[i].pose).collect();
    let distance = match pred {
        Predicate::EEAtPos { target, .. } => s.tip().distance(DVec3::from_array(*target)),
        Predicate::EEAtPose { target, .. } => pose_error_weighted(&s.ee.pose, target, ROTATION_WEIGHT).combined,
        Predicate::AtPos { target, .. } => poses[0].position.distance(DVec3::from_array(*target)),
        Predicate::AtPose { target, .. } => pose_error_weighted(&poses[0], target, ROTATION_WEIGHT).combined,
        Predicate::OnTop { .. } | Predicate::Inside { .. } => placement_distance(s, objects[0], objects[1]),
        Predicate::Hit { .. } | Predicate::PushProgress { .. } => poses[0].position.distance(poses[1].position),
        Predicate::Touch { .. } | Predicate::TouchedGently { .. } => s.ee_distance(objects[0]),
        Predicate::Grasped { .. } => {
            let o = &s.objects[objects[0]];
            s.tip().distance(DVec3::new(o.pose.position.x, o.pose.position.y, o.top()))
        }
        _ => 0.0,
    };
    Baseline { poses, distance }
}

fn angle_between(a: DVec2, b: DVec2) -> f64 {
    let c = a.dot(b) / (a.length() * b.length()).max(1e-300);
    c.clamp(-1.0, 1.0).acos()
}

/// (angle error rad, position drift m) of a rotation relative to its baseline pose.
pub fn rotation_error(base: &Pose, now: &Pose, angle_deg: f64, direction: Direction) -> (f64, f64) {
    let change = wrap_angle(now.yaw() - base.yaw());
    let target = direction.sign() * angle_deg.to_radians();
    let err = wrap_angle(change - target).abs();
    let drift = now.position.distance(base.position);
    (err, drift)
}

/// Distance from an object to where it would rest on/in `base`.
fn placement_distance(s: &WorldState, obj: usize, base: usize) -> f64 {
    let o = &s.objects[obj];
    let b = &s.objects[base];
    let surface = b.floor_top(s.config.container_wall);
    let goal = DVec3::new(b.pose.position.x, b.pose.position.y, surface + o.half_height());
    o.pose.position.distance(goal)
}

/// Whether `obj` rests within `container` (a walled container or a flat area).
pub fn is_inside(s: &WorldState, obj: usize, container: usize) -> bool {
    let o = &s.objects[obj];
    let c = &s.objects[container];
    if s.is_attached(obj) || o.in_flight {
        return false;
    }
    let wall = s.config.container_wall;
    match c.kind {
        ObjectKind::Container => {
            let Some(inner) = c.interior(wall) else { return false };
            overlap_fraction(&o.footprint(), &inner) >= INSIDE_OVERLAP
                && o.top() <= c.top() + 1e-9
                && (o.bottom() - c.floor_top(wall)).abs() <= 1e-5
        }
        _ => {
            overlap_fraction(&o.footprint(), &c.footprint()) >= INSIDE_OVERLAP && (o.bottom() - c.top()).abs() <= 1e-5
        }
    }
}

/// Orientation distance helper exposed for solvers.
pub fn orientation_gap(a: &Pose, b: &Pose) -> f64 {
    quat_angle(a.orientation, b.orientation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WorldConfig;
    use crate::geom::Shape;
    use crate::world::{Action, ObjectKind, SceneSpec, WorldObject};
    use parry3d_f64::glamx::DQuat;

    fn cube(id: &str, x: f64, y: f64) -> WorldObject {
        WorldObject::new(id, ObjectKind::Solid, Shape::cuboid(0.02, 0.02, 0.02), Pose::from_position(DVec3::new(x, y, 0.02)), "cube", "red", 1000.0)
    }

    fn world(objects: Vec<WorldObject>) -> WorldState {
        WorldState::reset(&SceneSpec::new(objects, Pose::from_position(DVec3::new(0.0, 0.0, 0.3)), 0), &WorldConfig::default()).unwrap()
    }

    fn eval(tree: &mut PredicateTree, s: &WorldState) -> (f64, bool) {
        tree.evaluate(s, s).unwrap()
    }

    #[test]
    fn empty_set_is_vacuously_true() {
        let s = world(vec![]);
        let mut t = PredicateTree::new(&Predicate::set(vec![]), &s).unwrap();
        assert_eq!(eval(&mut t, &s), (1.0, true));
    }

    #[test]
    fn ee_at_target_is_success() {
        let s = world(vec![]);
        let mut t = PredicateTree::new(&Predicate::EEAtPos { target: [0.0, 0.0, 0.3], tol: 0.01 }, &s).unwrap();
        assert_eq!(eval(&mut t, &s), (1.0, true));
    }

    #[test]
    fn missing_object_is_error() {
        let s = world(vec![]);
        let p = Predicate::Grasped { obj: "nope".into() };
        assert!(matches!(PredicateTree::new(&p, &s), Err(Error::MissingObject(_))));
    }

    #[test]
    fn bad_rotation_angle_rejected() {
        let s = world(vec![cube("a", 0.0, 0.0)]);
        assert!(matches!(PredicateTree::new(&Predicate::rotated_by("a", 45.0, Direction::Clockwise), &s), Err(Error::InvalidPredicate(_))));
    }

    #[test]
    fn sequence_requires_order() {
        // B is satisfied from the start, A only after moving
        let mut s = world(vec![]);
        let a = Predicate::EEAtPos { target: [0.1, 0.0, 0.3], tol: 0.005 };
        let b = Predicate::EEAtPos { target: [0.0, 0.0, 0.3], tol: 0.005 };
        let mut t = PredicateTree::new(&Predicate::sequence(vec![a, b]), &s).unwrap();
        assert!(!eval(&mut t, &s).1);
        assert_eq!(t.nodes[2].status, Status::Pending);
        for _ in 0..2 {
            s.step(&Action::new(DVec3::new(0.05, 0.0, 0.0), DVec3::ZERO, 0.0)).unwrap();
            eval(&mut t, &s);
        }
        assert!(t.nodes[1].is_done() && !t.success());
        for _ in 0..2 {
            s.step(&Action::new(DVec3::new(-0.05, 0.0, 0.0), DVec3::ZERO, 0.0)).unwrap();
            eval(&mut t, &s);
        }
        assert!(t.success());
        assert!(t.nodes[1].done_step < t.nodes[2].done_step);
    }

    #[test]
    fn push_progress_examples() {
        let check = |final_xy: DVec2| {
            let mut s = world(vec![cube("o", 0.0, 0.0), cube("g", 0.4, 0.0)]);
            let mut t = PredicateTree::new(&Predicate::push_progress("o", "g"), &s).unwrap();
            s.objects[0].pose.position = final_xy.extend(0.02);
            eval(&mut t, &s).1
        };
        assert!(check(DVec2::new(0.13, 0.0)));
        assert!(!check(DVec2::new(0.10, 0.0)));
        // 35% reduction but 60 degrees off axis: d = 0.26 from goal
        let theta = 60f64.to_radians();
        let r = {
            // point at angle theta from +x whose distance to (0.4,0) is 0.26
            let (a, b, c) = (1.0, -2.0 * 0.4 * theta.cos(), 0.16 - 0.26f64.powi(2));
            (-b - (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
        };
        assert!(!check(DVec2::new(r * theta.cos(), r * theta.sin())));
    }

    #[test]
    fn rotate_examples() {
        let check = |yaw_deg: f64, drift: f64| {
            let mut s = world(vec![cube("o", 0.0, 0.0)]);
            let mut t = PredicateTree::new(&Predicate::rotated_by("o", 90.0, Direction::Clockwise), &s).unwrap();
            s.objects[0].pose = Pose::new(DVec3::new(drift, 0.0, 0.02), DQuat::from_rotation_z(yaw_deg.to_radians()));
            eval(&mut t, &s).1
        };
        assert!(check(-90.0, 0.01));
        assert!(!check(-84.0, 0.01));
        assert!(!check(-90.0, 0.06));
        assert!(!check(90.0, 0.0));
    }

    #[test]
    fn touch_examples() {
        let run = |pred: Predicate, moved: f64, topple: bool| {
            let mut s = world(vec![cube("o", 0.0, 0.0)]);
            let mut t = PredicateTree::new(&pred, &s).unwrap();
            s.objects[0].pose.position.x += moved;
            if topple {
                s.objects[0].pose.orientation = DQuat::from_rotation_y(1.0);
            }
            s.events.push(Event::Contact { a: Body::Ee, b: 0, speed: 0.0 });
            eval(&mut t, &s).1
        };
        let gentle = || Predicate::TouchedGently { obj: "o".into(), max_move: 0.03 };
        let push = || Predicate::TouchPushed { obj: "o".into(), min_move: 0.10, forbid_topple: true };
        assert!(run(gentle(), 0.01, false));
        assert!(!run(gentle(), 0.04, false));
        assert!(run(push(), 0.12, false));
        assert!(!run(push(), 0.08, false));
        assert!(!run(push(), 0.12, true));
        assert!(run(Predicate::Touch { obj: "o".into(), mode: TouchMode::Topple }, 0.0, true));
    }

    #[test]
    fn not_touching_failure_is_absorbing() {
        let mut s = world(vec![cube("o", 0.0, 0.0)]);
        let p = Predicate::set(vec![
            Predicate::EEAtPos { target: [0.2, 0.0, 0.3], tol: 0.01 },
            Predicate::NotTouching { obstacles: vec!["o".into()] },
        ]);
        let mut t = PredicateTree::new(&p, &s).unwrap();
        s.events.push(Event::Contact { a: Body::Ee, b: 0, speed: 0.0 });
        eval(&mut t, &s);
        assert!(t.failed());
        s.events.clear();
        s.ee.pose.position = DVec3::new(0.2, 0.0, 0.3);
        assert_eq!(eval(&mut t, &s), (0.0, false));
        assert!(t.failed());
    }

    #[test]
    fn canonical_text_is_stable() {
        let p = Predicate::sequence(vec![
            Predicate::OnTop { obj: "a".into(), base: "b".into() },
            Predicate::AtPos { obj: "a".into(), target: [0.1, -0.0, 0.02], tol: 0.05 },
        ]);
        assert_eq!(p.to_string(), "Sequence(OnTop(a,b),AtPos(a,[0.1000,0.0000,0.0200],0.0500))");
    }
}
