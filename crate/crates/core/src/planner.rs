//! Motion planning, throw solving and scale partitioning.

use parry3d_f64::glamx::{DQuat, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::PlannerConfig;
use crate::geom::{distance, quat_angle, Pose, Shape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("start configuration is in collision")]
    StartInCollision,
    #[error("goal configuration is in collision")]
    GoalInCollision,
    #[error("start or goal outside the workspace")]
    OutOfBounds,
    #[error("no path found within {0} nodes")]
    Exhausted(usize),
}

/// The gripper sphere plus an optional rigidly held object.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingBody {
    pub ee_radius: f64,
    /// Held shape and its pose relative to the EE frame.
    pub attached: Option<(Shape, Pose)>,
}

impl MovingBody {
    pub fn bare(ee_radius: f64) -> Self {
        Self { ee_radius, attached: None }
    }

    /// World-frame collision primitives with the EE at `ee`.
    pub fn placed(&self, ee: &Pose) -> Vec<(Shape, Pose)> {
        let mut parts = vec![(
            Shape::Sphere { radius: self.ee_radius },
            Pose::from_position(ee.position + DVec3::Z * self.ee_radius),
        )];
        if let Some((shape, offset)) = &self.attached {
            parts.push((*shape, ee.compose(offset)));
        }
        parts
    }

    /// Orientation-independent hull of the body for a yaw sweep between `a` and `b`.
    fn swept(&self, a: DQuat, b: DQuat) -> Option<(Shape, DVec3)> {
        let (shape, offset) = self.attached.as_ref()?;
        let reach = offset.position.truncate().length() + shape.horizontal_radius();
        let yaw_only = |q: DQuat| q.x.abs() < 1e-9 && q.y.abs() < 1e-9;
        if yaw_only(a) && yaw_only(b) && yaw_only(offset.orientation) {
            let hz = shape.vertical_half_extent(offset.orientation);
            Some((Shape::Disc { radius: reach, height: 2.0 * hz }, DVec3::Z * offset.position.z))
        } else {
            let r = offset.position.length() + shape.vertical_half_extent(DQuat::IDENTITY).max(shape.horizontal_radius());
            Some((Shape::Sphere { radius: r }, DVec3::ZERO))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanQuery {
    pub start: Pose,
    pub goal: Pose,
    pub body: MovingBody,
    pub obstacles: Vec<(Shape, Pose)>,
    pub bounds: ([f64; 3], [f64; 3]),
    pub seed: u64,
}

/// Piecewise-linear EE path. Orientation varies with arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub waypoints: Vec<Pose>,
    /// Max translation between consecutive poses of [`Path::dense`].
    pub resolution: f64,
}

impl Path {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].position.distance(w[1].position)).sum()
    }

    /// Poses spaced at most `step` apart along the path, endpoints included.
    pub fn sample(&self, step: f64) -> Vec<Pose> {
        let mut out = vec![self.waypoints[0]];
        for w in self.waypoints.windows(2) {
            let d = w[0].position.distance(w[1].position);
            let n = (d / step).ceil().max(1.0) as usize;
            for k in 1..=n {
                let t = k as f64 / n as f64;
                out.push(lerp_pose(&w[0], &w[1], t));
            }
        }
        out
    }

    pub fn dense(&self) -> Vec<Pose> {
        self.sample(self.resolution)
    }
}

fn lerp_pose(a: &Pose, b: &Pose, t: f64) -> Pose {
    Pose::new(a.position.lerp(b.position, t), a.orientation.slerp(b.orientation, t))
}

/// Collision checker shared by planning and smoothing.
struct Checker<'a> {
    q: &'a PlanQuery,
    clearance: f64,
    swept: Option<(Shape, DVec3)>,
}

impl<'a> Checker<'a> {
    fn new(q: &'a PlanQuery, clearance: f64) -> Self {
        let swept = if quat_angle(q.start.orientation, q.goal.orientation) > 1e-9 {
            q.body.swept(q.start.orientation, q.goal.orientation)
        } else {
            None
        };
        Self { q, clearance, swept }
    }

    fn in_bounds(&self, p: DVec3) -> bool {
        let (lo, hi) = self.q.bounds;
        (0..3).all(|k| p[k] >= lo[k] - 1e-9 && p[k] <= hi[k] + 1e-9)
    }

    /// Free at tip position `p` for every orientation the path may take.
    fn free(&self, p: DVec3) -> bool {
        if !self.in_bounds(p) {
            return false;
        }
        let sphere = Shape::Sphere { radius: self.q.body.ee_radius };
        let sp = Pose::from_position(p + DVec3::Z * self.q.body.ee_radius);
        let mut parts = vec![(sphere, sp)];
        match (&self.swept, &self.q.body.attached) {
            (Some((s, off)), _) => parts.push((*s, Pose::from_position(p + *off))),
            (None, Some((s, off))) => {
                let ee = Pose::new(p, self.q.start.orientation);
                parts.push((*s, ee.compose(off)));
            }
            (None, None) => {}
        }
        parts.iter().all(|(s, pose)| {
            self.q.obstacles.iter().all(|(os, op)| distance(s, pose, os, op) >= self.clearance)
        })
    }

    fn edge_free(&self, a: DVec3, b: DVec3, step: f64) -> bool {
        let n = (a.distance(b) / step).ceil().max(1.0) as usize;
        (1..=n).all(|k| self.free(a.lerp(b, k as f64 / n as f64)))
    }
}

struct Tree {
    pts: Vec<DVec3>,
    parent: Vec<usize>,
}

impl Tree {
    fn new(root: DVec3) -> Self {
        Self { pts: vec![root], parent: vec![usize::MAX] }
    }

    fn nearest(&self, p: DVec3) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, q) in self.pts.iter().enumerate() {
            let d = q.distance_squared(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn push(&mut self, p: DVec3, parent: usize) -> usize {
        self.pts.push(p);
        self.parent.push(parent);
        self.pts.len() - 1
    }

    fn branch(&self, mut i: usize) -> Vec<DVec3> {
        let mut out = Vec::new();
        while i != usize::MAX {
            out.push(self.pts[i]);
            i = self.parent[i];
        }
        out
    }
}

enum Extend {
    Trapped,
    Advanced(usize),
    Reached(usize),
}

fn extend(tree: &mut Tree, target: DVec3, step: f64, check: &Checker, res: f64) -> Extend {
    let near = tree.nearest(target);
    let from = tree.pts[near];
    let d = from.distance(target);
    let (to, reached) = if d <= step { (target, true) } else { (from + (target - from) * (step / d), false) };
    if !check.edge_free(from, to, res) {
        return Extend::Trapped;
    }
    let i = tree.push(to, near);
    if reached {
        Extend::Reached(i)
    } else {
        Extend::Advanced(i)
    }
}

fn sample(rng: &mut ChaCha8Rng, bounds: &([f64; 3], [f64; 3])) -> DVec3 {
    let (lo, hi) = bounds;
    DVec3::new(rng.gen_range(lo[0]..=hi[0]), rng.gen_range(lo[1]..=hi[1]), rng.gen_range(lo[2]..=hi[2]))
}

/// Assigns orientations by arc-length fraction between start and goal.
fn to_path(points: &[DVec3], start: DQuat, goal: DQuat, resolution: f64) -> Path {
    let total: f64 = points.windows(2).map(|w| w[0].distance(w[1])).sum();
    let mut acc = 0.0;
    let mut waypoints = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += points[i - 1].distance(*p);
        }
        let t = if total > 0.0 { acc / total } else { 1.0 };
        waypoints.push(Pose::new(*p, start.slerp(goal, t)));
    }
    if let Some(last) = waypoints.last_mut() {
        last.orientation = goal;
    }
    Path { waypoints, resolution }
}

/// Whether the straight move from start to goal keeps the configured clearance.
pub fn straight_line_clear(q: &PlanQuery, cfg: &PlannerConfig) -> bool {
    let check = Checker::new(q, cfg.clearance);
    check.free(q.start.position) && check.edge_free(q.start.position, q.goal.position, cfg.check_resolution)
}

/// Bidirectional RRT over tip positions, followed by shortcut smoothing.
pub fn rrt_connect(q: &PlanQuery, cfg: &PlannerConfig) -> Result<Path, PlanError> {
    let check = Checker::new(q, cfg.clearance);
    let (s, g) = (q.start.position, q.goal.position);
    if !check.in_bounds(s) || !check.in_bounds(g) {
        return Err(PlanError::OutOfBounds);
    }
    if !check.free(s) {
        return Err(PlanError::StartInCollision);
    }
    if !check.free(g) {
        return Err(PlanError::GoalInCollision);
    }
    let res = cfg.check_resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(q.seed);
    if check.edge_free(s, g, res) {
        return Ok(to_path(&[s, g], q.start.orientation, q.goal.orientation, cfg.waypoint_resolution));
    }
    let mut a = Tree::new(s);
    let mut b = Tree::new(g);
    let mut a_is_start = true;
    let mut nodes = 2;
    while nodes < cfg.node_budget {
        let target = if rng.gen::<f64>() < cfg.goal_bias { b.pts[0] } else { sample(&mut rng, &q.bounds) };
        let new = match extend(&mut a, target, cfg.step_size, &check, res) {
            Extend::Trapped => None,
            Extend::Advanced(i) | Extend::Reached(i) => Some(i),
        };
        if let Some(ia) = new {
            nodes += 1;
            let p = a.pts[ia];
            loop {
                match extend(&mut b, p, cfg.step_size, &check, res) {
                    Extend::Advanced(_) => {
                        nodes += 1;
                        if nodes >= cfg.node_budget {
                            break;
                        }
                    }
                    Extend::Reached(ib) => {
                        let mut from_a = a.branch(ia);
                        from_a.reverse();
                        let mut from_b = b.branch(ib);
                        from_b.remove(0);
                        from_a.extend(from_b);
                        if !a_is_start {
                            from_a.reverse();
                        }
                        let raw = to_path(&from_a, q.start.orientation, q.goal.orientation, cfg.waypoint_resolution);
                        return Ok(smooth_with(&raw, &check, cfg, &mut rng));
                    }
                    Extend::Trapped => break,
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
        a_is_start = !a_is_start;
    }
    Err(PlanError::Exhausted(cfg.node_budget))
}

/// Random shortcutting of a path for the obstacles of `q`.
pub fn smooth(path: &Path, q: &PlanQuery, cfg: &PlannerConfig, seed: u64) -> Path {
    let check = Checker::new(q, cfg.clearance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    smooth_with(path, &check, cfg, &mut rng)
}

fn smooth_with(path: &Path, check: &Checker, cfg: &PlannerConfig, rng: &mut ChaCha8Rng) -> Path {
    let mut pts: Vec<DVec3> = path.waypoints.iter().map(|w| w.position).collect();
    let start = path.waypoints[0].orientation;
    let goal = path.waypoints[path.waypoints.len() - 1].orientation;
    for _ in 0..cfg.smoothing_attempts {
        if pts.len() < 3 {
            break;
        }
        let n = pts.len();
        let mut i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        if i > j {
            std::mem::swap(&mut i, &mut j);
        }
        if j < i + 2 {
            continue;
        }
        if check.edge_free(pts[i], pts[j], cfg.check_resolution) {
            pts.drain(i + 1..j);
        }
    }
    // collinear interior points add nothing
    let mut out = vec![pts[0]];
    for k in 1..pts.len() - 1 {
        let a = out[out.len() - 1];
        let (b, c) = (pts[k], pts[k + 1]);
        if (b - a).cross(c - b).length() > 1e-12 || (b - a).dot(c - b) < 0.0 {
            out.push(b);
        }
    }
    out.push(pts[pts.len() - 1]);
    to_path(&out, start, goal, path.resolution)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no launch speed reaches the target at this angle")]
pub struct Infeasible;

/// Launch velocity reaching `target` from `release` at elevation `angle`.
pub fn ballistic_release(release: DVec3, target: DVec3, angle: f64, gravity: f64) -> Result<DVec3, Infeasible> {
    let h = (target - release).truncate();
    let d = h.length();
    if d <= 0.0 || !(0.0..std::f64::consts::FRAC_PI_2).contains(&angle) {
        return Err(Infeasible);
    }
    let drop = release.z - target.z;
    let denom = 2.0 * angle.cos().powi(2) * (d * angle.tan() + drop);
    if denom <= 0.0 {
        return Err(Infeasible);
    }
    let speed = (gravity * d * d / denom).sqrt();
    let dir = h / d;
    Ok(DVec3::new(dir.x * angle.cos(), dir.y * angle.cos(), angle.sin()) * speed)
}

/// Equal-sum split with the lexicographically smallest left index set.
pub fn balance_partition(masses: &[f64]) -> Option<(Vec<usize>, Vec<usize>)> {
    let n = masses.len();
    if n == 0 || n > 12 {
        return None;
    }
    let total: f64 = masses.iter().sum();
    let tol = 1e-9 * total.abs().max(1.0);
    let mut best: Option<Vec<usize>> = None;
    for mask in 1u32..(1 << n) - 1 {
        let left: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sum: f64 = left.iter().map(|&i| masses[i]).sum();
        if (2.0 * sum - total).abs() <= tol && best.as_ref().is_none_or(|b| left < *b) {
            best = Some(left);
        }
    }
    best.map(|left| {
        let right = (0..n).filter(|i| !left.contains(i)).collect();
        (left, right)
    })
}
