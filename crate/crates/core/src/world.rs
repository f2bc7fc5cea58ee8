//! Quasi-static tabletop dynamics around a free-flying suction end-effector.
//!
//! Objects rest on the table or on each other, get pushed by side contact,
//! fly ballistically when released at speed and fall over when struck hard
//! or swept near the top. There is no momentum outside ballistic flight.

use parry3d_f64::glamx::{DQuat, DVec2, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::geom::{collide, distance, overlap_fraction, Footprint, Pose, Shape};

/// Height tolerance used when matching resting faces.
const FACE_EPS: f64 = 1e-5;
/// Contacts shallower than this are treated as touching, not penetrating.
const PENETRATION_EPS: f64 = 1e-7;
/// A body counts as approaching from above when its bottom was at most this far below a top face.
const TOP_APPROACH: f64 = 0.005;
/// Minimum interior overlap for an object to sit on a container floor.
pub const INSIDE_OVERLAP: f64 = 0.9;

/// Per-step end-effector command: translation (m), rotation vector (rad), grip.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub delta: [f64; 6],
    pub grip: f64,
}

impl Action {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(translation: DVec3, rotation: DVec3, grip: f64) -> Self {
        let t = translation.to_array();
        let r = rotation.to_array();
        Action { delta: [t[0], t[1], t[2], r[0], r[1], r[2]], grip }
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Action { delta: [a[0], a[1], a[2], a[3], a[4], a[5]], grip: a[6] }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let a: [f64; 7] = v
            .try_into()
            .map_err(|_| Error::InvalidAction(format!("expected 7 components, got {}", v.len())))?;
        Ok(Self::from_array(a))
    }

    pub fn to_array(&self) -> [f64; 7] {
        let d = self.delta;
        [d[0], d[1], d[2], d[3], d[4], d[5], self.grip]
    }

    pub fn translation(&self) -> DVec3 {
        DVec3::new(self.delta[0], self.delta[1], self.delta[2])
    }

    pub fn rotation(&self) -> DVec3 {
        DVec3::new(self.delta[3], self.delta[4], self.delta[5])
    }

    pub fn is_finite(&self) -> bool {
        self.delta.iter().all(|v| v.is_finite()) && self.grip.is_finite()
    }

    pub fn clamped(&self, cfg: &WorldConfig) -> Action {
        let mut out = *self;
        for (i, v) in out.delta.iter_mut().enumerate() {
            let lim = if i < 3 { cfg.max_translation } else { cfg.max_rotation };
            *v = v.clamp(-lim, lim);
        }
        out.grip = out.grip.clamp(-1.0, 1.0);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Solid,
    /// Open-top box; objects inside rest on its floor.
    Container,
    /// Flat static pad marking a region of the table.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: String,
    pub kind: ObjectKind,
    pub shape: Shape,
    pub pose: Pose,
    pub template: String,
    pub texture: String,
    pub mass: f64,
    pub graspable: bool,
    #[serde(rename = "static")]
    pub is_static: bool,
    pub toppled: bool,
    pub in_flight: bool,
    pub velocity: [f64; 3],
}

impl WorldObject {
    pub fn new(id: &str, kind: ObjectKind, shape: Shape, pose: Pose, template: &str, texture: &str, density: f64) -> Self {
        let is_static = kind != ObjectKind::Solid;
        WorldObject {
            id: id.to_string(),
            kind,
            shape,
            pose,
            template: template.to_string(),
            texture: texture.to_string(),
            mass: density * shape.volume(),
            graspable: !is_static,
            is_static,
            toppled: false,
            in_flight: false,
            velocity: [0.0; 3],
        }
    }

    /// Marks the object as an immovable fixture.
    pub fn fixed(mut self) -> Self {
        self.is_static = true;
        self.graspable = false;
        self
    }

    pub fn half_height(&self) -> f64 {
        self.shape.vertical_half_extent(self.pose.orientation)
    }

    pub fn height(&self) -> f64 {
        2.0 * self.half_height()
    }

    pub fn bottom(&self) -> f64 {
        self.pose.position.z - self.half_height()
    }

    pub fn top(&self) -> f64 {
        self.pose.position.z + self.half_height()
    }

    pub fn footprint(&self) -> Footprint {
        self.shape.footprint(&self.pose)
    }

    pub fn is_free(&self) -> bool {
        !self.is_static && !self.in_flight
    }

    /// Ground-plane region inside the walls of a container.
    pub fn interior(&self, wall: f64) -> Option<Footprint> {
        match (self.kind, self.shape) {
            (ObjectKind::Container, Shape::OrientedBox { half_extents: [hx, hy, _] }) => Some(Footprint::rect(
                self.pose.xy(),
                DVec2::new((hx - wall).max(1e-4), (hy - wall).max(1e-4)),
                self.pose.yaw(),
            )),
            _ => None,
        }
    }

    pub fn floor_top(&self, wall: f64) -> f64 {
        match self.kind {
            ObjectKind::Container => self.bottom() + wall,
            _ => self.top(),
        }
    }

    /// Collision primitives making up the body.
    pub fn parts(&self, wall: f64) -> Vec<(Shape, Pose)> {
        match (self.kind, self.shape) {
            (ObjectKind::Container, Shape::OrientedBox { half_extents: [hx, hy, hz] }) => {
                let w = wall / 2.0;
                let local = [
                    (Shape::cuboid(hx, hy, w), DVec3::new(0.0, 0.0, -hz + w)),
                    (Shape::cuboid(w, hy, hz), DVec3::new(hx - w, 0.0, 0.0)),
                    (Shape::cuboid(w, hy, hz), DVec3::new(-hx + w, 0.0, 0.0)),
                    (Shape::cuboid(hx, w, hz), DVec3::new(0.0, hy - w, 0.0)),
                    (Shape::cuboid(hx, w, hz), DVec3::new(0.0, -hy + w, 0.0)),
                ];
                local.into_iter().map(|(s, p)| (s, self.pose.compose(&Pose::from_position(p)))).collect()
            }
            _ => vec![(self.shape, self.pose)],
        }
    }

    fn translate(&mut self, d: DVec3) {
        self.pose.position += d;
    }
}

/// Angle between the object's local +z axis and world +z, in [0, π].
pub fn vertical_axis_deviation(obj: &WorldObject) -> f64 {
    let z = obj.pose.orientation * DVec3::Z;
    z.z.clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndEffector {
    /// Tool-tip pose; the suction cup is at the tip.
    pub pose: Pose,
    pub suction_on: bool,
    pub attached: Option<usize>,
    /// Attached object pose expressed in the tip frame.
    pub grasp_offset: Pose,
    pub window: VecDeque<DVec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceScale {
    pub pivot: [f64; 3],
    pub arm: f64,
    pub left_pan: usize,
    pub right_pan: usize,
    pub tilt: f64,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

/// Tilt (rad) for the given pan loads; positive when the right side is heavier.
pub fn scale_tilt(left_mass: f64, right_mass: f64, arm: f64, cfg: &WorldConfig) -> f64 {
    (cfg.k_tilt * (right_mass - left_mass) * arm).clamp(-cfg.tilt_clamp, cfg.tilt_clamp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalStatus {
    Pending,
    Active,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGoal {
    pub position: [f64; 3],
    pub radius: f64,
    pub status: GoalStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Ee,
    Object(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Contact { a: Body, b: usize, speed: f64 },
    Grasp { object: usize },
    Release { object: usize, thrown: bool },
    Hit { thrown: usize, target: usize, speed: f64 },
    Toppled { object: usize },
    GoalTouched { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    Table,
    Object(usize),
    /// Held, in flight, fixed in place or otherwise unsupported.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub pivot: [f64; 3],
    pub arm: f64,
    pub left_pan: String,
    pub right_pan: String,
}

/// Everything needed to construct the initial world of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<WorldObject>,
    pub ee_pose: Pose,
    /// Object held by the gripper at reset.
    pub attached: Option<String>,
    pub scale: Option<ScaleSpec>,
    pub goals: Vec<[f64; 3]>,
    pub goal_radius: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(objects: Vec<WorldObject>, ee_pose: Pose, seed: u64) -> Self {
        SceneSpec { objects, ee_pose, attached: None, scale: None, goals: Vec::new(), goal_radius: 0.02, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub objects: Vec<WorldObject>,
    pub ee: EndEffector,
    pub scale: Option<BalanceScale>,
    pub goals: Vec<TraceGoal>,
    pub events: Vec<Event>,
    pub step: usize,
    pub config: WorldConfig,
    rng: ChaCha8Rng,
}

impl WorldState {
    pub fn reset(spec: &SceneSpec, cfg: &WorldConfig) -> Result<WorldState> {
        let mut ids = std::collections::HashSet::new();
        for o in &spec.objects {
            o.shape.validate()?;
            if !o.pose.is_valid() {
                return Err(Error::MalformedInstance(format!("object `{}` has an invalid pose", o.id)));
            }
            if !ids.insert(o.id.as_str()) {
                return Err(Error::MalformedInstance(format!("duplicate object id `{}`", o.id)));
            }
        }
        if !spec.ee_pose.is_valid() {
            return Err(Error::MalformedInstance("invalid end-effector pose".into()));
        }
        let attached = match &spec.attached {
            Some(id) => Some(
                spec.objects
                    .iter()
                    .position(|o| &o.id == id)
                    .ok_or_else(|| Error::MalformedInstance(format!("attached object `{id}` not in scene")))?,
            ),
            None => None,
        };
        for i in 0..spec.objects.len() {
            for j in i + 1..spec.objects.len() {
                if Some(i) == attached || Some(j) == attached {
                    continue;
                }
                let (a, b) = (&spec.objects[i], &spec.objects[j]);
                if a.is_static && b.is_static {
                    continue;
                }
                if let Some(d) = penetration(a, b, cfg.container_wall) {
                    if d > 1e-4 {
                        return Err(Error::MalformedInstance(format!(
                            "objects `{}` and `{}` overlap by {d:.4} m",
                            a.id, b.id
                        )));
                    }
                }
            }
        }
        let grasp_offset = match attached {
            Some(i) => spec.ee_pose.inverse().compose(&spec.objects[i].pose),
            None => Pose::identity(),
        };
        let mut window = VecDeque::with_capacity(cfg.velocity_window.max(1));
        window.push_back(spec.ee_pose.position);
        let mut state = WorldState {
            objects: spec.objects.clone(),
            ee: EndEffector { pose: spec.ee_pose, suction_on: attached.is_some(), attached, grasp_offset, window },
            scale: None,
            goals: spec
                .goals
                .iter()
                .enumerate()
                .map(|(i, p)| TraceGoal {
                    position: *p,
                    radius: spec.goal_radius,
                    status: if i == 0 { GoalStatus::Active } else { GoalStatus::Pending },
                })
                .collect(),
            events: Vec::new(),
            step: 0,
            config: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x05ee_d0f3_041d),
        };
        for o in state.objects.iter_mut() {
            o.toppled = vertical_axis_deviation(o) > std::f64::consts::FRAC_PI_4;
        }
        if let Some(s) = &spec.scale {
            let find = |id: &str| {
                state
                    .object_index(id)
                    .ok_or_else(|| Error::MalformedInstance(format!("scale pan `{id}` not in scene")))
            };
            let (l, r) = (find(&s.left_pan)?, find(&s.right_pan)?);
            state.scale = Some(BalanceScale {
                pivot: s.pivot,
                arm: s.arm,
                left_pan: l,
                right_pan: r,
                tilt: 0.0,
                left: Vec::new(),
                right: Vec::new(),
            });
            state.update_scale();
        }
        Ok(state)
    }

    pub fn object_index(&self, id: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn object(&self, id: &str) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn is_attached(&self, i: usize) -> bool {
        self.ee.attached == Some(i)
    }

    pub fn tip(&self) -> DVec3 {
        self.ee.pose.position
    }

    /// Spherical tool body sitting directly above the tip.
    pub fn ee_body(&self) -> (Shape, Pose) {
        ee_body_at(self.tip(), self.config.ee_radius)
    }

    /// Finite-difference velocity over the pose window.
    pub fn ee_velocity(&self) -> DVec3 {
        let w = &self.ee.window;
        if w.len() < 2 {
            return DVec3::ZERO;
        }
        (w[w.len() - 1] - w[0]) / ((w.len() - 1) as f64 * self.config.dt)
    }

    /// Advances one control step.
    pub fn step(&mut self, action: &Action) -> Result<()> {
        if !action.is_finite() {
            return Err(Error::InvalidAction(format!("non-finite component in {:?}", action.to_array())));
        }
        let a = action.clamped(&self.config);
        self.events.clear();
        let prev = self.ee.pose;
        let prev_attached_bottom = self.ee.attached.map(|i| self.objects[i].bottom());

        let lo = DVec3::from_array(self.config.bounds_min);
        let hi = DVec3::from_array(self.config.bounds_max);
        let pos = (prev.position + a.translation()).clamp(lo, hi);
        let rot = a.rotation();
        let q = if rot.length() > 0.0 { DQuat::from_scaled_axis(rot) * prev.orientation } else { prev.orientation };
        self.ee.pose = Pose::new(pos, q);
        self.sync_attached();

        self.ee.window.push_back(self.ee.pose.position);
        while self.ee.window.len() > self.config.velocity_window.max(1) {
            self.ee.window.pop_front();
        }
        let struck = self.resolve_contacts(prev.position.z, prev_attached_bottom);
        if let Some(last) = self.ee.window.back_mut() {
            *last = self.ee.pose.position;
        }

        let want = a.grip > 0.0;
        if want && !self.ee.suction_on {
            self.ee.suction_on = true;
            self.engage();
        } else if !want && self.ee.suction_on {
            self.ee.suction_on = false;
            self.release();
        }

        self.integrate_flight();
        self.settle();
        self.refresh_topple_flags();
        self.update_scale();
        self.update_goals();
        self.record_contacts(&struck);
        self.step += 1;
        Ok(())
    }

    fn sync_attached(&mut self) {
        if let Some(i) = self.ee.attached {
            self.objects[i].pose = self.ee.pose.compose(&self.ee.grasp_offset);
            let b = self.objects[i].bottom();
            if b < 0.0 {
                self.ee.pose.position.z -= b;
                self.objects[i].pose.position.z -= b;
            }
        }
    }

    fn raise_ee(&mut self, dz: f64) {
        self.ee.pose.position.z += dz;
        if let Some(i) = self.ee.attached {
            self.objects[i].pose.position.z += dz;
        }
    }

    fn shift_ee(&mut self, d: DVec3) {
        self.ee.pose.position += d;
        if let Some(i) = self.ee.attached {
            self.objects[i].pose.position += d;
        }
    }

    /// Pushing bodies: the tool sphere and, if any, the held object.
    fn pushers(&self) -> Vec<(Option<usize>, Shape, Pose, f64)> {
        let (s, p) = self.ee_body();
        let mut v = vec![(None, s, p, self.tip().z)];
        if let Some(i) = self.ee.attached {
            let o = &self.objects[i];
            v.push((Some(i), o.shape, o.pose, o.bottom()));
        }
        v
    }

    /// Resolves tool penetrations; returns the (pusher, object) pairs that were in contact.
    fn resolve_contacts(&mut self, prev_tip_z: f64, prev_attached_bottom: Option<f64>) -> Vec<(Option<usize>, usize)> {
        let wall = self.config.container_wall;
        let mut struck = Vec::new();
        for _ in 0..8 {
            let mut changed = false;
            for j in 0..self.objects.len() {
                if self.is_attached(j) || self.objects[j].in_flight {
                    continue;
                }
                for (who, ps, pp, _) in self.pushers() {
                    let prev_bottom = match who {
                        None => prev_tip_z,
                        Some(_) => prev_attached_bottom.unwrap_or(f64::NEG_INFINITY),
                    };
                    let part_bottom = match who {
                        None => pp.position.z - self.config.ee_radius,
                        Some(i) => self.objects[i].bottom(),
                    };
                    let parts = self.objects[j].parts(wall);
                    let Some((c, part_top)) = parts
                        .iter()
                        .filter_map(|(s, p)| {
                            collide(&ps, &pp, s, p).map(|c| (c, p.position.z + s.vertical_half_extent(p.orientation)))
                        })
                        .filter(|(c, _)| c.depth > PENETRATION_EPS)
                        .max_by(|a, b| a.0.depth.total_cmp(&b.0.depth))
                    else {
                        continue;
                    };
                    if !struck.contains(&(who, j)) {
                        struck.push((who, j));
                    }
                    let nh = c.normal.truncate();
                    if prev_bottom >= part_top - TOP_APPROACH || nh.length() < 1e-6 {
                        let dz = part_top - part_bottom;
                        if dz > 0.0 {
                            self.raise_ee(dz + 1e-9);
                            changed = true;
                        }
                        continue;
                    }
                    let h = nh.normalize();
                    let push = c.depth / nh.length() + 1e-7;
                    let obj = &self.objects[j];
                    if obj.is_static {
                        self.shift_ee((-h * push).extend(0.0));
                        changed = true;
                        continue;
                    }
                    let hspeed = self.ee_velocity().truncate().length();
                    if who.is_none()
                        && c.point.z >= obj.bottom() + self.config.topple_height_fraction * obj.height()
                        && hspeed >= self.config.topple_sweep_speed
                    {
                        self.topple(j, h);
                        changed = true;
                        continue;
                    }
                    self.push_object(j, (h * push).extend(0.0), 0);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        // anything still penetrating sideways blocks the tool
        for j in 0..self.objects.len() {
            if self.is_attached(j) || self.objects[j].in_flight {
                continue;
            }
            for (_, ps, pp, _) in self.pushers() {
                for (s, p) in self.objects[j].parts(wall) {
                    if let Some(c) = collide(&ps, &pp, &s, &p) {
                        let nh = c.normal.truncate();
                        if c.depth > 1e-6 && nh.length() > 1e-6 {
                            self.shift_ee((-nh.normalize() * (c.depth / nh.length() + 1e-7)).extend(0.0));
                        }
                    }
                }
            }
        }
        struck
    }

    /// Objects resting on `i`, transitively.
    fn riders(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![i];
        while let Some(k) = stack.pop() {
            let base = &self.objects[k];
            let fp = base.footprint();
            for (j, o) in self.objects.iter().enumerate() {
                if j == i || out.contains(&j) || !o.is_free() || self.is_attached(j) {
                    continue;
                }
                if (o.bottom() - base.top()).abs() <= FACE_EPS && o.footprint().intersects(&fp) {
                    out.push(j);
                    stack.push(j);
                }
            }
        }
        out
    }

    fn push_object(&mut self, j: usize, d: DVec3, depth: usize) {
        let riders = self.riders(j);
        self.objects[j].translate(d);
        for r in &riders {
            self.objects[*r].translate(d);
        }
        if depth > 4 {
            return;
        }
        let wall = self.config.container_wall;
        for k in 0..self.objects.len() {
            if k == j || riders.contains(&k) || self.is_attached(k) || self.objects[k].in_flight {
                continue;
            }
            let (a, b) = (&self.objects[j], &self.objects[k]);
            if b.bottom() >= a.top() - TOP_APPROACH || a.bottom() >= b.top() - TOP_APPROACH {
                continue;
            }
            let Some(c) = deepest_contact(a, b, wall) else { continue };
            let nh = c.normal.truncate();
            if c.depth <= PENETRATION_EPS || nh.length() < 1e-6 {
                continue;
            }
            let amount = c.depth / nh.length() + 1e-7;
            if b.is_static {
                let back = (-nh.normalize() * amount).extend(0.0);
                self.objects[j].translate(back);
                for r in &riders {
                    self.objects[*r].translate(back);
                }
            } else {
                self.push_object(k, (nh.normalize() * amount).extend(0.0), depth + 1);
            }
        }
    }

    /// Tips object `j` over so that its top falls along horizontal direction `h`.
    pub fn topple(&mut self, j: usize, h: DVec2) {
        let h = if h.length() > 1e-9 { h.normalize() } else { DVec2::X };
        let o = &self.objects[j];
        let ext = o.footprint().support(h);
        let hh = o.half_height();
        let bottom = o.bottom();
        let axis = DVec3::Z.cross(h.extend(0.0)).normalize();
        let q = DQuat::from_axis_angle(axis, FRAC_PI_2) * o.pose.orientation;
        let xy = o.pose.xy() + h * (ext + hh);
        let new_hh = o.shape.vertical_half_extent(q);
        self.objects[j].pose = Pose::new(DVec3::new(xy.x, xy.y, bottom + new_hh), q);
        self.refresh_topple_flags();
    }

    fn engage(&mut self) {
        if self.ee.attached.is_some() {
            return;
        }
        let tip = self.tip();
        let window = self.config.grasp_window;
        let mut best: Option<(f64, usize)> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if !o.graspable || o.is_static || o.in_flight {
                continue;
            }
            let gap = tip.z - o.top();
            if gap < -1e-6 || gap > window + 1e-9 || !o.footprint().contains(tip.truncate()) {
                continue;
            }
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, i));
            }
        }
        if let Some((_, i)) = best {
            self.ee.attached = Some(i);
            self.ee.grasp_offset = self.ee.pose.inverse().compose(&self.objects[i].pose);
            self.events.push(Event::Grasp { object: i });
        }
    }

    fn release(&mut self) {
        let Some(i) = self.ee.attached.take() else { return };
        let v = self.ee_velocity();
        let thrown = v.length() >= self.config.throw_speed_threshold;
        if thrown {
            self.objects[i].in_flight = true;
            self.objects[i].velocity = v.to_array();
        }
        self.events.push(Event::Release { object: i, thrown });
    }

    fn integrate_flight(&mut self) {
        let g = DVec3::new(0.0, 0.0, -self.config.gravity);
        let n = self.config.flight_substeps.max(1);
        let h = self.config.dt / n as f64;
        let wall = self.config.container_wall;
        for i in 0..self.objects.len() {
            if !self.objects[i].in_flight {
                continue;
            }
            let mut p = self.objects[i].pose.position;
            let mut v = DVec3::from_array(self.objects[i].velocity);
            let hh = self.objects[i].half_height();
            let mut landed: Option<Option<(usize, f64)>> = None;
            for _ in 0..n {
                let at = |t: f64| p + v * t + 0.5 * g * t * t;
                let p1 = at(h);
                let hit_at = |t: f64, objs: &[WorldObject]| -> Option<usize> {
                    let probe = Pose::new(at(t), objs[i].pose.orientation);
                    (0..objs.len()).find(|&k| {
                        k != i
                            && objs[k].parts(wall).iter().any(|(s, sp)| {
                                collide(&objs[i].shape, &probe, s, sp).is_some_and(|c| c.depth > PENETRATION_EPS)
                            })
                    })
                };
                let floor_t = if p1.z - hh < 0.0 {
                    // solve p.z + v.z t - g t²/2 = hh on [0, h]
                    let (a, b, c) = (0.5 * g.z, v.z, p.z - hh);
                    let disc = (b * b - 4.0 * a * c).max(0.0);
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    Some(t.clamp(0.0, h))
                } else {
                    None
                };
                let end = floor_t.unwrap_or(h);
                if hit_at(end, &self.objects).is_some() {
                    let (mut lo, mut hi) = (0.0, end);
                    for _ in 0..40 {
                        let mid = 0.5 * (lo + hi);
                        if hit_at(mid, &self.objects).is_some() {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    let target = hit_at(hi, &self.objects).unwrap_or(i);
                    let speed = (v + g * hi).length();
                    p = at(lo);
                    v += g * lo;
                    landed = Some(Some((target, speed)));
                    break;
                }
                if let Some(t) = floor_t {
                    p = at(t);
                    p.z = hh;
                    v += g * t;
                    landed = Some(None);
                    break;
                }
                p = p1;
                v += g * h;
            }
            self.objects[i].pose.position = p;
            self.objects[i].velocity = v.to_array();
            if let Some(hit) = landed {
                self.objects[i].in_flight = false;
                self.objects[i].velocity = [0.0; 3];
                if let Some((target, speed)) = hit {
                    self.events.push(Event::Hit { thrown: i, target, speed });
                    let t = &self.objects[target];
                    if speed >= self.config.topple_hit_speed && !t.is_static && !self.is_attached(target) {
                        self.topple(target, v.truncate());
                    }
                }
            }
        }
    }

    /// Drops every unsupported free object onto the highest surface under it.
    pub fn settle(&mut self) {
        let mut order: Vec<usize> = (0..self.objects.len())
            .filter(|&i| self.objects[i].is_free() && !self.is_attached(i))
            .collect();
        order.sort_by(|&a, &b| self.objects[a].bottom().total_cmp(&self.objects[b].bottom()).then(a.cmp(&b)));
        for i in order {
            self.settle_object(i);
        }
    }

    fn settle_object(&mut self, i: usize) {
        let wall = self.config.container_wall;
        let min_overlap = self.config.support_overlap;
        for _ in 0..16 {
            let o = &self.objects[i];
            let fp = o.footprint();
            let (bottom, top) = (o.bottom(), o.top());
            let mut land = 0.0_f64;
            let mut blockers: Vec<(usize, f64)> = Vec::new();
            for (j, b) in self.objects.iter().enumerate() {
                if j == i || self.is_attached(j) || b.in_flight {
                    continue;
                }
                let bfp = b.footprint();
                if !fp.intersects(&bfp) {
                    continue;
                }
                if let Some(inner) = b.interior(wall) {
                    let floor = b.floor_top(wall);
                    if bottom >= floor - FACE_EPS && overlap_fraction(&fp, &inner) >= INSIDE_OVERLAP {
                        land = land.max(floor);
                        continue;
                    }
                }
                if b.top() <= bottom + FACE_EPS {
                    if overlap_fraction(&fp, &bfp) >= min_overlap {
                        land = land.max(b.top());
                    } else {
                        blockers.push((j, b.top()));
                    }
                } else if b.bottom() < top - FACE_EPS {
                    blockers.push((j, b.top()));
                }
            }
            let blocker = blockers.iter().filter(|(_, t)| *t > land + FACE_EPS).map(|(j, _)| *j).next();
            match blocker {
                None => {
                    let dz = land - bottom;
                    self.objects[i].pose.position.z += dz;
                    return;
                }
                Some(j) => {
                    let c = fp.centroid();
                    let bfp = self.objects[j].footprint();
                    let mut dir = c - bfp.centroid();
                    if dir.length() < 1e-9 {
                        let a: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
                        dir = DVec2::new(a.cos(), a.sin());
                    }
                    let dir = dir.normalize();
                    let t = fp.separation_along(&bfp, dir) + 1e-4;
                    self.objects[i].translate((dir * t).extend(0.0));
                }
            }
        }
        let land = self.landing_height(i);
        let dz = land - self.objects[i].bottom();
        self.objects[i].pose.position.z += dz;
    }

    fn landing_height(&self, i: usize) -> f64 {
        let o = &self.objects[i];
        let fp = o.footprint();
        let bottom = o.bottom();
        self.objects
            .iter()
            .enumerate()
            .filter(|(j, b)| *j != i && !b.in_flight && !self.is_attached(*j) && b.top() <= bottom + FACE_EPS)
            .filter(|(_, b)| fp.intersects(&b.footprint()))
            .map(|(_, b)| b.top())
            .fold(0.0, f64::max)
    }

    fn refresh_topple_flags(&mut self) {
        for i in 0..self.objects.len() {
            let t = vertical_axis_deviation(&self.objects[i]) > std::f64::consts::FRAC_PI_4;
            if t && !self.objects[i].toppled {
                self.events.push(Event::Toppled { object: i });
            }
            self.objects[i].toppled = t;
        }
    }

    /// What object `i` is resting on.
    pub fn support_of(&self, i: usize) -> Support {
        let o = &self.objects[i];
        if self.is_attached(i) || o.in_flight || o.is_static {
            return Support::None;
        }
        let bottom = o.bottom();
        if bottom.abs() <= FACE_EPS {
            return Support::Table;
        }
        let wall = self.config.container_wall;
        let fp = o.footprint();
        let mut best: Option<(f64, usize)> = None;
        for (j, b) in self.objects.iter().enumerate() {
            if j == i || self.is_attached(j) || b.in_flight {
                continue;
            }
            let bfp = b.footprint();
            if !fp.intersects(&bfp) {
                continue;
            }
            let score = match b.interior(wall) {
                Some(inner) if (b.floor_top(wall) - bottom).abs() <= FACE_EPS => {
                    let f = overlap_fraction(&fp, &inner);
                    (f >= INSIDE_OVERLAP).then_some(f)
                }
                _ if (b.top() - bottom).abs() <= FACE_EPS => {
                    let f = overlap_fraction(&fp, &bfp);
                    (f >= self.config.support_overlap).then_some(f)
                }
                _ => None,
            };
            if let Some(f) = score {
                if best.is_none_or(|(g, _)| f > g) {
                    best = Some((f, j));
                }
            }
        }
        best.map_or(Support::None, |(_, j)| Support::Object(j))
    }

    /// Bottom-most object (or the table) under `i` along its support chain.
    pub fn support_root(&self, i: usize) -> Support {
        let mut cur = i;
        let mut seen = 0;
        loop {
            match self.support_of(cur) {
                Support::Object(j) if seen < self.objects.len() => {
                    if self.objects[j].is_static {
                        return Support::Object(j);
                    }
                    cur = j;
                    seen += 1;
                }
                Support::Object(j) => return Support::Object(j),
                Support::Table if cur == i => return Support::Table,
                Support::Table => return Support::Object(cur),
                Support::None => return if cur == i { Support::None } else { Support::Object(cur) },
            }
        }
    }

    /// Current scale tilt, or zero without a scale.
    pub fn scale_tilt(&self) -> f64 {
        self.scale.as_ref().map_or(0.0, |s| s.tilt)
    }

    fn update_scale(&mut self) {
        let Some(mut s) = self.scale.take() else { return };
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for i in 0..self.objects.len() {
            if self.objects[i].is_static {
                continue;
            }
            let mut cur = i;
            for _ in 0..self.objects.len() {
                match self.support_of(cur) {
                    Support::Object(j) if j == s.left_pan => {
                        left.push(i);
                        break;
                    }
                    Support::Object(j) if j == s.right_pan => {
                        right.push(i);
                        break;
                    }
                    Support::Object(j) => cur = j,
                    _ => break,
                }
            }
        }
        let mass = |v: &[usize]| v.iter().map(|&i| self.objects[i].mass).sum::<f64>();
        s.tilt = scale_tilt(mass(&left), mass(&right), s.arm, &self.config);
        s.left = left;
        s.right = right;
        self.scale = Some(s);
    }

    fn update_goals(&mut self) {
        let tip = self.tip();
        if let Some(k) = self.goals.iter().position(|g| g.status == GoalStatus::Active) {
            let g = &self.goals[k];
            if tip.distance(DVec3::from_array(g.position)) <= g.radius {
                self.goals[k].status = GoalStatus::Done;
                self.events.push(Event::GoalTouched { index: k });
                if let Some(next) = self.goals.get_mut(k + 1) {
                    next.status = GoalStatus::Active;
                }
            }
        }
    }

    /// Separation between the tool body and object `j` (zero if touching or overlapping).
    pub fn ee_distance(&self, j: usize) -> f64 {
        let (s, p) = self.ee_body();
        self.objects[j]
            .parts(self.config.container_wall)
            .iter()
            .map(|(bs, bp)| distance(&s, &p, bs, bp))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn ee_touching(&self, j: usize) -> bool {
        !self.is_attached(j) && self.ee_distance(j) <= self.config.contact_tolerance
    }

    fn record_contacts(&mut self, struck: &[(Option<usize>, usize)]) {
        let speed = self.ee_velocity().length();
        let tol = self.config.contact_tolerance;
        let wall = self.config.container_wall;
        let mut ev = Vec::new();
        for j in 0..self.objects.len() {
            if self.is_attached(j) {
                continue;
            }
            if self.ee_distance(j) <= tol || struck.contains(&(None, j)) {
                ev.push(Event::Contact { a: Body::Ee, b: j, speed });
            }
            if let Some(i) = self.ee.attached {
                let held = &self.objects[i];
                let d = self.objects[j]
                    .parts(wall)
                    .iter()
                    .map(|(s, p)| distance(&held.shape, &held.pose, s, p))
                    .fold(f64::INFINITY, f64::min);
                if d <= tol || struck.contains(&(Some(i), j)) {
                    ev.push(Event::Contact { a: Body::Object(i), b: j, speed });
                }
            }
        }
        self.events.extend(ev);
    }
}

pub fn ee_body_at(tip: DVec3, radius: f64) -> (Shape, Pose) {
    (Shape::Sphere { radius }, Pose::from_position(tip + DVec3::Z * radius))
}

fn deepest_contact(a: &WorldObject, b: &WorldObject, wall: f64) -> Option<crate::geom::Contact> {
    let mut best: Option<crate::geom::Contact> = None;
    for (sa, pa) in a.parts(wall) {
        for (sb, pb) in b.parts(wall) {
            if let Some(c) = collide(&sa, &pa, &sb, &pb) {
                if best.is_none_or(|x| c.depth > x.depth) {
                    best = Some(c);
                }
            }
        }
    }
    best
}

/// Interpenetration depth between two objects, if they touch.
pub fn penetration(a: &WorldObject, b: &WorldObject, wall: f64) -> Option<f64> {
    deepest_contact(a, b, wall).map(|c| c.depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    fn cube(id: &str, half: f64, x: f64, y: f64, z: f64) -> WorldObject {
        WorldObject::new(id, ObjectKind::Solid, Shape::cuboid(half, half, half), Pose::from_position(DVec3::new(x, y, z)), "cube", "red", 1000.0)
    }

    fn world(objects: Vec<WorldObject>, ee: DVec3) -> WorldState {
        WorldState::reset(&SceneSpec::new(objects, Pose::from_position(ee), 1), &cfg()).unwrap()
    }

    fn mv(dx: f64, dy: f64, dz: f64, grip: f64) -> Action {
        Action::new(DVec3::new(dx, dy, dz), DVec3::ZERO, grip)
    }

    #[test]
    fn zero_action_only_advances_step() {
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.02), cube("b", 0.02, 0.2, 0.0, 0.02)], DVec3::new(0.0, 0.0, 0.3));
        let before = w.clone();
        w.step(&Action::zero()).unwrap();
        assert_eq!(w.objects, before.objects);
        assert_eq!(w.ee.pose, before.ee.pose);
        assert_eq!(w.step, 1);
    }

    #[test]
    fn reset_rejects_overlap_and_is_deterministic() {
        let spec = SceneSpec::new(vec![cube("a", 0.02, 0.0, 0.0, 0.02), cube("b", 0.02, 0.01, 0.0, 0.02)], Pose::identity(), 0);
        assert!(matches!(WorldState::reset(&spec, &cfg()), Err(Error::MalformedInstance(_))));
        let spec = SceneSpec::new(vec![cube("a", 0.02, 0.0, 0.0, 0.02)], Pose::identity(), 7);
        assert_eq!(WorldState::reset(&spec, &cfg()).unwrap(), WorldState::reset(&spec, &cfg()).unwrap());
    }

    #[test]
    fn non_finite_action_rejected() {
        let mut w = world(vec![], DVec3::new(0.0, 0.0, 0.3));
        assert!(matches!(w.step(&mv(f64::NAN, 0.0, 0.0, 0.0)), Err(Error::InvalidAction(_))));
    }

    #[test]
    fn clamps_translation_and_rotation() {
        let mut w = world(vec![], DVec3::new(0.0, 0.0, 0.3));
        w.step(&Action::new(DVec3::new(1.0, -1.0, 0.0), DVec3::new(0.0, 0.0, 3.0), 0.0)).unwrap();
        let p = w.tip();
        assert!((p.x - 0.05).abs() < 1e-12 && (p.y + 0.05).abs() < 1e-12);
        assert!((w.ee.pose.yaw() - 0.2).abs() < 1e-9);
    }

    #[test]
    fn grasp_within_window() {
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.02)], DVec3::new(0.0, 0.0, 0.05));
        w.step(&mv(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert!(w.events.contains(&Event::Grasp { object: 0 }));
        assert_eq!(w.ee.attached, Some(0));
        w.step(&mv(0.0, 0.0, 0.05, 1.0)).unwrap();
        assert!((w.objects[0].pose.position.z - 0.07).abs() < 1e-9);
    }

    #[test]
    fn grasp_misses_outside_footprint_or_window() {
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.02)], DVec3::new(0.03, 0.0, 0.05));
        w.step(&mv(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(w.ee.attached, None);
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.02)], DVec3::new(0.0, 0.0, 0.07));
        w.step(&mv(0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(w.ee.attached, None);
    }

    #[test]
    fn settle_examples() {
        // dropped onto empty table
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.3)], DVec3::new(0.3, 0.3, 0.5));
        w.settle();
        assert!((w.objects[0].pose.position.z - 0.02).abs() < 1e-12);
        // coaxial stack
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.02), cube("b", 0.02, 0.0, 0.0, 0.3)], DVec3::new(0.3, 0.3, 0.5));
        w.settle();
        assert!((w.objects[1].bottom() - 0.04).abs() < 1e-12);
        assert_eq!(w.support_of(1), Support::Object(0));
        // 0.2 overlap: slides off onto the table
        let mut w = world(vec![cube("a", 0.02, 0.0, 0.0, 0.02), cube("b", 0.02, 0.032, 0.0, 0.3)], DVec3::new(0.3, 0.3, 0.5));
        w.settle();
        assert!(w.objects[1].bottom().abs() < 1e-12);
        assert!(penetration(&w.objects[0], &w.objects[1], 0.01).is_none_or(|d| d < 1e-4));
    }

    #[test]
    fn vertical_axis_deviation_examples() {
        let mut o = cube("a", 0.02, 0.0, 0.0, 0.02);
        assert_eq!(vertical_axis_deviation(&o), 0.0);
        o.pose.orientation = DQuat::from_rotation_x(FRAC_PI_2);
        assert!((vertical_axis_deviation(&o) - FRAC_PI_2).abs() < 1e-12);
        o.pose.orientation = DQuat::from_rotation_y(std::f64::consts::PI / 6.0);
        assert!((vertical_axis_deviation(&o) - std::f64::consts::PI / 6.0).abs() < 1e-12);
    }

    #[test]
    fn velocity_window() {
        let mut w = world(vec![], DVec3::new(-0.3, 0.0, 0.3));
        assert_eq!(w.ee_velocity(), DVec3::ZERO);
        for _ in 0..6 {
            w.step(&mv(0.02, 0.0, 0.0, 0.0)).unwrap();
        }
        assert!((w.ee_velocity() - DVec3::new(1.0, 0.0, 0.0)).length() < 1e-9);
    }

    #[test]
    fn circular_motion_speed() {
        let (r, omega) = (0.2, 2.0);
        let mut w = world(vec![], DVec3::new(r, 0.0, 0.3));
        let dt = w.config.dt;
        for k in 0..40 {
            let t0 = k as f64 * dt;
            let t1 = t0 + dt;
            let d = DVec3::new(r * ((omega * t1).cos() - (omega * t0).cos()), r * ((omega * t1).sin() - (omega * t0).sin()), 0.0);
            w.step(&Action::new(d, DVec3::ZERO, 0.0)).unwrap();
        }
        let s = w.ee_velocity().length();
        assert!((s - r * omega).abs() / (r * omega) < 0.05, "{s}");
    }

    #[test]
    fn scale_tilt_formula() {
        let c = cfg();
        assert_eq!(scale_tilt(0.0, 0.0, 0.2, &c), 0.0);
        assert_eq!(scale_tilt(0.7, 0.7, 0.2, &c), 0.0);
        assert!((scale_tilt(1.0, 0.0, 0.2, &c) + 0.1).abs() < 1e-12);
        assert_eq!(scale_tilt(0.0, 100.0, 0.2, &c), 0.3);
    }

    #[test]
    fn side_contact_pushes() {
        let mut w = world(vec![cube("a", 0.03, 0.0, 0.0, 0.03)], DVec3::new(-0.1, 0.0, 0.002));
        for _ in 0..4 {
            w.step(&mv(0.02, 0.0, 0.0, -1.0)).unwrap();
        }
        // sphere front at tip.x + r; box face pushed to it
        let front = w.tip().x + w.config.ee_radius;
        assert!((w.objects[0].pose.position.x - 0.03 - front).abs() < 1e-5, "{:?}", w.objects[0].pose.position);
        assert!(!w.objects[0].toppled);
        assert!(w.events.iter().any(|e| matches!(e, Event::Contact { a: Body::Ee, b: 0, .. })));
    }

    #[test]
    fn high_fast_sweep_topples() {
        let mut w = world(vec![cube("a", 0.03, 0.0, 0.0, 0.03)], DVec3::new(-0.15, 0.0, 0.035));
        for _ in 0..10 {
            w.step(&mv(0.02, 0.0, 0.0, -1.0)).unwrap();
        }
        assert!(w.objects[0].toppled);
        assert!(vertical_axis_deviation(&w.objects[0]) > std::f64::consts::FRAC_PI_4);
        assert!(w.objects[0].bottom().abs() < 1e-9);
    }

    #[test]
    fn top_contact_blocks_descent() {
        let mut w = world(vec![cube("a", 0.03, 0.0, 0.0, 0.03)], DVec3::new(0.0, 0.0, 0.1));
        for _ in 0..5 {
            w.step(&mv(0.0, 0.0, -0.05, -1.0)).unwrap();
        }
        assert!((w.tip().z - 0.06).abs() < 1e-6);
        assert!((w.objects[0].pose.position.z - 0.03).abs() < 1e-12);
    }

    #[test]
    fn trace_goals_advance_in_order() {
        let mut spec = SceneSpec::new(vec![], Pose::from_position(DVec3::new(0.0, 0.0, 0.3)), 0);
        spec.goals = vec![[0.04, 0.0, 0.3], [0.0, 0.0, 0.3]];
        let mut w = WorldState::reset(&spec, &cfg()).unwrap();
        w.step(&Action::zero()).unwrap();
        assert_eq!(w.goals[1].status, GoalStatus::Pending);
        w.step(&mv(0.04, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(w.goals[0].status, GoalStatus::Done);
        assert_eq!(w.goals[1].status, GoalStatus::Active);
        w.step(&mv(-0.04, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(w.goals[1].status, GoalStatus::Done);
    }

    #[test]
    fn fast_release_flies_and_matches_closed_form() {
        // carry a cube at 0.5 m, accelerate along +x at 1.5 m/s and let go
        let mut spec = SceneSpec::new(vec![cube("a", 0.02, -0.4, 0.0, 0.48)], Pose::from_position(DVec3::new(-0.4, 0.0, 0.5)), 0);
        spec.attached = Some("a".into());
        let mut w = WorldState::reset(&spec, &cfg()).unwrap();
        let step = 1.5 * w.config.dt;
        for _ in 0..5 {
            w.step(&mv(step, 0.0, 0.0, 1.0)).unwrap();
        }
        let release = w.objects[0].pose.position;
        w.step(&mv(step, 0.0, 0.0, -1.0)).unwrap();
        assert!(w.events.contains(&Event::Release { object: 0, thrown: true }));
        let launch = w.objects[0].pose.position;
        assert!(w.objects[0].in_flight || launch.z < release.z);
        let mut n = 0;
        while w.objects[0].in_flight && n < 200 {
            w.step(&Action::zero()).unwrap();
            n += 1;
        }
        // closed form from the release point: z0 = 0.48 (centre), lands when centre at 0.02
        let x_rel = -0.4 + 6.0 * step;
        let drop: f64 = 0.48 - 0.02;
        let t = (2.0 * drop / 9.81).sqrt();
        let expected = x_rel + 1.5 * t;
        let got = w.objects[0].pose.position.x;
        assert!((got - expected).abs() / (expected - x_rel) < 0.02, "{got} vs {expected}");
    }

    #[test]
    fn horizontal_range_at_angle() {
        // launch at 45 degrees from the table plane and compare to v² sin 2θ / g
        let v = 2.0;
        let theta = std::f64::consts::FRAC_PI_4;
        let mut spec = SceneSpec::new(vec![cube("a", 0.02, 0.0, 0.0, 0.02)], Pose::from_position(DVec3::new(0.0, 0.0, 0.3)), 0);
        spec.objects[0].in_flight = true;
        spec.objects[0].velocity = [v * theta.cos(), 0.0, v * theta.sin()];
        let mut w = WorldState::reset(&spec, &cfg()).unwrap();
        while w.objects[0].in_flight {
            w.step(&Action::zero()).unwrap();
        }
        let expected = v * v * (2.0 * theta).sin() / 9.81;
        let got = w.objects[0].pose.position.x;
        assert!((got - expected).abs() / expected < 0.02, "{got} vs {expected}");
    }

    #[test]
    fn hard_hit_topples_target() {
        let mut tall = WorldObject::new("t", ObjectKind::Solid, Shape::cuboid(0.02, 0.02, 0.06), Pose::from_position(DVec3::new(0.3, 0.0, 0.06)), "pillar", "blue", 1000.0);
        tall.toppled = false;
        let mut ball = cube("b", 0.02, 0.0, 0.0, 0.2);
        ball.in_flight = true;
        ball.velocity = [2.0, 0.0, 0.0];
        let mut w = WorldState::reset(&SceneSpec::new(vec![ball, tall], Pose::from_position(DVec3::new(-0.5, 0.0, 0.5)), 0), &cfg()).unwrap();
        for _ in 0..30 {
            w.step(&Action::zero()).unwrap();
        }
        assert!(w.objects[1].toppled);
        assert!(!w.objects[0].in_flight);
    }
}
