//! Poses, parametric shapes, collision queries, ground-plane footprints and
//! orthographic cameras.
//!
//! Narrow-phase contact and distance queries are delegated to `parry3d-f64`;
//! everything else here is plain vector arithmetic.

use parry3d_f64::glamx::{DPose3, DQuat, DVec2, DVec3};
use parry3d_f64::query;
use parry3d_f64::shape::{Ball, Cuboid, Cylinder};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

pub use parry3d_f64::glamx::{DQuat as Quat, DVec2 as Vec2, DVec3 as Vec3};

/// Weight of rotation error (rad) when folded into the combined pose error.
pub const ROTATION_WEIGHT: f64 = 0.1;

/// Footprint grid resolution (m).
pub const FOOTPRINT_GRID: f64 = 1e-3;

/// Rigid placement: position plus unit-quaternion orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub position: DVec3,
    pub orientation: DQuat,
}

/// Wire form: position `[x,y,z]`, orientation `[w,x,y,z]`.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    orientation: [f64; 4],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, x, y, z] = r.orientation;
        Pose::new(DVec3::from_array(r.position), DQuat::from_xyzw(x, y, z, w))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.orientation;
        PoseRepr { position: p.position.to_array(), orientation: [q.w, q.x, q.y, q.z] }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { position: DVec3::ZERO, orientation: DQuat::IDENTITY }
    }

    pub fn new(position: DVec3, orientation: DQuat) -> Self {
        Self { position, orientation: normalize_quat(orientation) }
    }

    pub fn from_position(position: DVec3) -> Self {
        Self { position, orientation: DQuat::IDENTITY }
    }

    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(DVec3::new(x, y, z), DQuat::from_rotation_z(yaw))
    }

    /// Rigid composition `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.position + self.orientation * other.position,
            self.orientation * other.orientation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.conjugate();
        Pose::new(-(inv * self.position), inv)
    }

    pub fn transform_point(&self, p: DVec3) -> DVec3 {
        self.position + self.orientation * p
    }

    /// Heading about world +z, in (-π, π].
    pub fn yaw(&self) -> f64 {
        quat_yaw(self.orientation)
    }

    pub fn xy(&self) -> DVec2 {
        self.position.truncate()
    }

    pub fn is_valid(&self) -> bool {
        self.position.is_finite()
            && self.orientation.is_finite()
            && (self.orientation.length() - 1.0).abs() < 1e-9
    }

    pub(crate) fn to_parry(self) -> DPose3 {
        DPose3::from_parts(self.position, self.orientation)
    }
}

pub fn normalize_quat(q: DQuat) -> DQuat {
    let n = q.length();
    if n > 0.0 && n.is_finite() {
        let q = q / n;
        // canonical hemisphere keeps serialized poses stable
        if q.w < 0.0 {
            -q
        } else {
            q
        }
    } else {
        DQuat::IDENTITY
    }
}

pub fn quat_yaw(q: DQuat) -> f64 {
    (2.0 * (q.w * q.z + q.x * q.y)).atan2(1.0 - 2.0 * (q.y * q.y + q.z * q.z))
}

/// Geodesic angle between two orientations, in [0, π].
pub fn quat_angle(a: DQuat, b: DQuat) -> f64 {
    let d = a.conjugate() * b;
    let v = DVec3::new(d.x, d.y, d.z).length();
    2.0 * v.atan2(d.w.abs())
}

/// Wraps an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub position: f64,
    pub rotation: f64,
    pub combined: f64,
}

pub fn pose_error(a: &Pose, b: &Pose) -> PoseError {
    pose_error_weighted(a, b, ROTATION_WEIGHT)
}

pub fn pose_error_weighted(a: &Pose, b: &Pose, rotation_weight: f64) -> PoseError {
    let position = a.position.distance(b.position);
    let rotation = quat_angle(a.orientation, b.orientation);
    PoseError { position, rotation, combined: position + rotation_weight * rotation }
}

/// Parametric collision primitive. Disc axis is local +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    OrientedBox { half_extents: [f64; 3] },
    Disc { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    pub fn cuboid(hx: f64, hy: f64, hz: f64) -> Self {
        Shape::OrientedBox { half_extents: [hx, hy, hz] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::OrientedBox { half_extents } => half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
            Shape::Disc { radius, height } => radius > 0.0 && height > 0.0 && radius.is_finite() && height.is_finite(),
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape(format!("{self:?}")))
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            Shape::OrientedBox { half_extents: [x, y, z] } => 8.0 * x * y * z,
            Shape::Disc { radius, height } => std::f64::consts::PI * radius * radius * height,
            Shape::Sphere { radius } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
        }
    }

    /// Half of the world-vertical extent for the given orientation.
    pub fn vertical_half_extent(&self, q: DQuat) -> f64 {
        match *self {
            Shape::OrientedBox { half_extents } => (0..3)
                .map(|i| {
                    let mut e = DVec3::ZERO;
                    e[i] = 1.0;
                    (q * e).z.abs() * half_extents[i]
                })
                .sum(),
            Shape::Disc { radius, height } => {
                let az = (q * DVec3::Z).z.abs().min(1.0);
                az * height / 2.0 + radius * (1.0 - az * az).max(0.0).sqrt()
            }
            Shape::Sphere { radius } => radius,
        }
    }

    /// Largest horizontal extent from the centre, for coarse spacing checks.
    pub fn horizontal_radius(&self) -> f64 {
        match *self {
            Shape::OrientedBox { half_extents: [x, y, z] } => (x * x + y * y + z * z).sqrt(),
            Shape::Disc { radius, height } => (radius * radius + height * height / 4.0).sqrt(),
            Shape::Sphere { radius } => radius,
        }
    }

    pub fn footprint(&self, pose: &Pose) -> Footprint {
        let c = pose.xy();
        match *self {
            Shape::Sphere { radius } => Footprint::Circle { center: c, radius },
            Shape::Disc { radius, height } => {
                let axis = pose.orientation * DVec3::Z;
                if axis.truncate().length() < 1e-9 {
                    return Footprint::Circle { center: c, radius };
                }
                let u = axis.any_orthonormal_vector();
                let v = axis.cross(u);
                let mut pts = Vec::with_capacity(64);
                for k in 0..32 {
                    let t = k as f64 / 32.0 * std::f64::consts::TAU;
                    let rim = radius * (t.cos() * u + t.sin() * v);
                    for s in [-0.5, 0.5] {
                        pts.push((pose.position + axis * (s * height) + rim).truncate());
                    }
                }
                Footprint::Polygon(convex_hull(pts))
            }
            Shape::OrientedBox { half_extents: [x, y, z] } => {
                let mut pts = Vec::with_capacity(8);
                for sx in [-1.0, 1.0] {
                    for sy in [-1.0, 1.0] {
                        for sz in [-1.0, 1.0] {
                            pts.push(pose.transform_point(DVec3::new(sx * x, sy * y, sz * z)).truncate());
                        }
                    }
                }
                Footprint::Polygon(convex_hull(pts))
            }
        }
    }

    fn with_parry<R>(&self, pose: &Pose, f: impl FnOnce(&dyn parry3d_f64::shape::Shape, &DPose3) -> R) -> R {
        match *self {
            Shape::OrientedBox { half_extents } => {
                f(&Cuboid::new(DVec3::from_array(half_extents)), &pose.to_parry())
            }
            Shape::Sphere { radius } => f(&Ball::new(radius), &pose.to_parry()),
            Shape::Disc { radius, height } => {
                // parry cylinders run along local +y
                let p = pose.compose(&Pose::new(DVec3::ZERO, DQuat::from_rotation_x(FRAC_PI_2)));
                f(&Cylinder::new(height / 2.0, radius), &p.to_parry())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contact {
    /// Contact point on the surface of the second body.
    pub point: DVec3,
    /// Unit normal pointing from the first body into the second.
    pub normal: DVec3,
    /// Penetration depth; zero for touching bodies.
    pub depth: f64,
}

/// Contact between two bodies when their volumes touch or intersect.
pub fn collide(sa: &Shape, pa: &Pose, sb: &Shape, pb: &Pose) -> Option<Contact> {
    let c = sa.with_parry(pa, |ga, ia| {
        sb.with_parry(pb, |gb, ib| query::contact(ia, ga, ib, gb, 0.0).ok().flatten())
    })?;
    if c.dist > 0.0 {
        return None;
    }
    let normal = if c.normal1.is_finite() && c.normal1.length() > 0.5 { c.normal1 } else { DVec3::Z };
    Some(Contact { point: c.point2, normal, depth: (-c.dist).max(0.0) })
}

/// Separation distance (zero when intersecting).
pub fn distance(sa: &Shape, pa: &Pose, sb: &Shape, pb: &Pose) -> f64 {
    sa.with_parry(pa, |ga, ia| sb.with_parry(pb, |gb, ib| query::distance(ia, ga, ib, gb).map(|d| d.distance).unwrap_or(0.0)))
}

/// Ground-plane projection of a body.
#[derive(Debug, Clone, PartialEq)]
pub enum Footprint {
    Circle { center: DVec2, radius: f64 },
    /// Convex, counter-clockwise.
    Polygon(Vec<DVec2>),
}

impl Footprint {
    pub fn rect(center: DVec2, half: DVec2, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let rot = |v: DVec2| DVec2::new(c * v.x - s * v.y, s * v.x + c * v.y);
        Footprint::Polygon(
            [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
                .iter()
                .map(|&(sx, sy)| center + rot(DVec2::new(sx * half.x, sy * half.y)))
                .collect(),
        )
    }

    pub fn contains(&self, p: DVec2) -> bool {
        match self {
            Footprint::Circle { center, radius } => p.distance_squared(*center) <= radius * radius + 1e-12,
            Footprint::Polygon(v) => {
                if v.len() < 3 {
                    return false;
                }
                (0..v.len()).all(|i| {
                    let a = v[i];
                    let b = v[(i + 1) % v.len()];
                    (b - a).perp_dot(p - a) >= -1e-12
                })
            }
        }
    }

    pub fn bounds(&self) -> (DVec2, DVec2) {
        match self {
            Footprint::Circle { center, radius } => (*center - DVec2::splat(*radius), *center + DVec2::splat(*radius)),
            Footprint::Polygon(v) => {
                let mut lo = DVec2::splat(f64::INFINITY);
                let mut hi = DVec2::splat(f64::NEG_INFINITY);
                for p in v {
                    lo = lo.min(*p);
                    hi = hi.max(*p);
                }
                (lo, hi)
            }
        }
    }

    pub fn centroid(&self) -> DVec2 {
        match self {
            Footprint::Circle { center, .. } => *center,
            Footprint::Polygon(v) => v.iter().copied().sum::<DVec2>() / v.len().max(1) as f64,
        }
    }

    /// Extent from the centroid along a unit direction.
    pub fn support(&self, dir: DVec2) -> f64 {
        match self {
            Footprint::Circle { radius, .. } => *radius,
            Footprint::Polygon(v) => {
                let c = self.centroid();
                v.iter().map(|p| (*p - c).dot(dir)).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    pub fn translated(&self, d: DVec2) -> Footprint {
        match self {
            Footprint::Circle { center, radius } => Footprint::Circle { center: *center + d, radius: *radius },
            Footprint::Polygon(v) => Footprint::Polygon(v.iter().map(|p| *p + d).collect()),
        }
    }

    /// Corner points used for projecting to pixel boxes.
    pub fn outline(&self) -> Vec<DVec2> {
        match self {
            Footprint::Circle { center, radius } => (0..16)
                .map(|k| {
                    let t = k as f64 / 16.0 * std::f64::consts::TAU;
                    *center + *radius * DVec2::new(t.cos(), t.sin())
                })
                .chain([
                    *center + DVec2::new(*radius, 0.0),
                    *center + DVec2::new(0.0, *radius),
                    *center - DVec2::new(*radius, 0.0),
                    *center - DVec2::new(0.0, *radius),
                ])
                .collect(),
            Footprint::Polygon(v) => v.clone(),
        }
    }

    /// Number of 1 mm grid cell centres inside the footprint.
    pub fn grid_area(&self) -> usize {
        grid_cells(self).filter(|p| self.contains(*p)).count()
    }

    /// Whether two footprints share area of positive extent (touching edges do not count).
    pub fn intersects(&self, other: &Footprint) -> bool {
        const EPS: f64 = 1e-9;
        let (a0, a1) = self.bounds();
        let (b0, b1) = other.bounds();
        if a1.x <= b0.x + EPS || b1.x <= a0.x + EPS || a1.y <= b0.y + EPS || b1.y <= a0.y + EPS {
            return false;
        }
        match (self, other) {
            (Footprint::Circle { center: c1, radius: r1 }, Footprint::Circle { center: c2, radius: r2 }) => {
                c1.distance(*c2) < r1 + r2 - EPS
            }
            (Footprint::Circle { center, radius }, Footprint::Polygon(v))
            | (Footprint::Polygon(v), Footprint::Circle { center, radius }) => {
                polygon_distance(v, *center) < radius - EPS
            }
            (Footprint::Polygon(a), Footprint::Polygon(b)) => {
                !(separating_axis(a, b, EPS) || separating_axis(b, a, EPS))
            }
        }
    }

    /// Smallest translation along unit `dir` after which `self` no longer intersects `other`.
    pub fn separation_along(&self, other: &Footprint, dir: DVec2) -> f64 {
        if !self.intersects(other) {
            return 0.0;
        }
        let (a0, a1) = self.bounds();
        let (b0, b1) = other.bounds();
        let mut hi = (a1 - a0).length() + (b1 - b0).length() + 1e-3;
        let mut lo = 0.0;
        for _ in 0..48 {
            let mid = 0.5 * (lo + hi);
            if self.translated(dir * mid).intersects(other) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

fn separating_axis(a: &[DVec2], b: &[DVec2], eps: f64) -> bool {
    if a.len() < 2 {
        return false;
    }
    (0..a.len()).any(|i| {
        let e = a[(i + 1) % a.len()] - a[i];
        let n = DVec2::new(e.y, -e.x);
        let len = n.length();
        if len < 1e-15 {
            return false;
        }
        let n = n / len;
        let (amin, amax) = project_onto(a, n);
        let (bmin, bmax) = project_onto(b, n);
        amax <= bmin + eps || bmax <= amin + eps
    })
}

fn project_onto(v: &[DVec2], n: DVec2) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.dot(n);
        (lo.min(d), hi.max(d))
    })
}

/// Distance from a point to a convex polygon (zero inside).
fn polygon_distance(v: &[DVec2], p: DVec2) -> f64 {
    if Footprint::Polygon(v.to_vec()).contains(p) {
        return 0.0;
    }
    (0..v.len())
        .map(|i| {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            let ab = b - a;
            let t = ((p - a).dot(ab) / ab.length_squared().max(1e-30)).clamp(0.0, 1.0);
            p.distance(a + ab * t)
        })
        .fold(f64::INFINITY, f64::min)
}

fn grid_cells(fp: &Footprint) -> impl Iterator<Item = DVec2> {
    let (lo, hi) = fp.bounds();
    let i0 = (lo.x / FOOTPRINT_GRID).floor() as i64;
    let i1 = (hi.x / FOOTPRINT_GRID).ceil() as i64;
    let j0 = (lo.y / FOOTPRINT_GRID).floor() as i64;
    let j1 = (hi.y / FOOTPRINT_GRID).ceil() as i64;
    (i0..i1).flat_map(move |i| {
        (j0..j1).map(move |j| DVec2::new((i as f64 + 0.5) * FOOTPRINT_GRID, (j as f64 + 0.5) * FOOTPRINT_GRID))
    })
}

/// Fraction of `top`'s area covered by `base`, by 1 mm grid sampling.
pub fn overlap_fraction(top: &Footprint, base: &Footprint) -> f64 {
    let (b0, b1) = base.bounds();
    let mut inside = 0usize;
    let mut both = 0usize;
    for p in grid_cells(top) {
        if top.contains(p) {
            inside += 1;
            if p.x >= b0.x && p.x <= b1.x && p.y >= b0.y && p.y <= b1.y && base.contains(p) {
                both += 1;
            }
        }
    }
    if inside == 0 {
        0.0
    } else {
        both as f64 / inside as f64
    }
}

/// Fraction of the top body's footprint lying over the base body's footprint.
pub fn footprint_overlap(top: (&Shape, &Pose), base: (&Shape, &Pose)) -> f64 {
    overlap_fraction(&top.0.footprint(top.1), &base.0.footprint(base.1))
}

/// Andrew's monotone chain; returns a counter-clockwise hull without collinear points.
pub fn convex_hull(mut pts: Vec<DVec2>) -> Vec<DVec2> {
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.distance_squared(*b) < 1e-24);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: DVec2, a: DVec2, b: DVec2| (a - o).perp_dot(b - o);
    let mut lower: Vec<DVec2> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 1e-15 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<DVec2> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 1e-15 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraId {
    Base,
    Hand,
}

impl CameraId {
    pub fn name(self) -> &'static str {
        match self {
            CameraId::Base => "base",
            CameraId::Hand => "hand",
        }
    }
}

/// Top-down orthographic camera over a rectangular window of the table plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: CameraId,
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    pub resolution: [u32; 2],
    pub follows_ee: bool,
}

impl Camera {
    pub fn base() -> Self {
        Camera { id: CameraId::Base, center: [0.0, 0.0], width: 2.0, height: 2.0, resolution: [256, 256], follows_ee: false }
    }

    pub fn hand() -> Self {
        Camera { id: CameraId::Hand, center: [0.0, 0.0], width: 0.4, height: 0.4, resolution: [128, 128], follows_ee: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution[0] == 0 || self.resolution[1] == 0 || self.width.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || self.height.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("invalid camera {:?}", self.id)));
        }
        Ok(())
    }

    /// The camera as positioned for an end-effector at `ee_xy`.
    pub fn placed(&self, ee_xy: DVec2) -> Camera {
        if self.follows_ee {
            Camera { center: ee_xy.to_array(), ..*self }
        } else {
            *self
        }
    }

    /// Continuous pixel coordinates of a world point (x right, y down).
    pub fn to_pixel(&self, p: DVec2) -> (f64, f64) {
        let left = self.center[0] - self.width / 2.0;
        let top = self.center[1] + self.height / 2.0;
        (
            (p.x - left) / self.width * self.resolution[0] as f64,
            (top - p.y) / self.height * self.resolution[1] as f64,
        )
    }

    /// World point at the centre of pixel (i, j).
    pub fn pixel_center(&self, i: u32, j: u32) -> DVec2 {
        let left = self.center[0] - self.width / 2.0;
        let top = self.center[1] + self.height / 2.0;
        DVec2::new(
            left + (i as f64 + 0.5) / self.resolution[0] as f64 * self.width,
            top - (j as f64 + 0.5) / self.resolution[1] as f64 * self.height,
        )
    }
}

/// Pixel position of a world point, or `None` when outside the window.
pub fn project(cam: &Camera, world_point: DVec3) -> Option<(f64, f64)> {
    let (x, y) = cam.to_pixel(world_point.truncate());
    let (w, h) = (cam.resolution[0] as f64, cam.resolution[1] as f64);
    if (0.0..w).contains(&x) && (0.0..h).contains(&y) {
        Some((x, y))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn yaw(a: f64) -> Pose {
        Pose::from_xyz_yaw(0.0, 0.0, 0.0, a)
    }

    #[test]
    fn compose_identities_and_yaws() {
        let id = Pose::identity();
        assert_eq!(id.compose(&id), id);
        let p = Pose::new(DVec3::new(0.1, -0.2, 0.3), DQuat::from_rotation_y(0.4));
        let q = id.compose(&p);
        assert!((q.position - p.position).length() < 1e-12);
        assert!(quat_angle(q.orientation, p.orientation) < 1e-9);

        let r = yaw(FRAC_PI_2).compose(&yaw(FRAC_PI_2));
        // yaw(180°) = (w=0, z=1)
        assert!(r.orientation.w.abs() < 1e-12);
        assert!((r.orientation.z.abs() - 1.0).abs() < 1e-12);
        assert!(r.position.length() < 1e-15);
    }

    #[test]
    fn pose_error_examples() {
        let p = Pose::from_xyz_yaw(0.1, 0.2, 0.3, 0.4);
        let e = pose_error(&p, &p);
        assert!(e.position == 0.0 && e.rotation < 1e-7 && e.combined < 1e-7);

        let e = pose_error(&yaw(0.0), &yaw(FRAC_PI_2));
        assert!((e.rotation - FRAC_PI_2).abs() < 1e-12);
        assert!((e.combined - 0.05 * PI).abs() < 1e-12);

        let a = Pose::from_xyz_yaw(0.0, 0.0, 0.1, 0.3);
        let b = Pose::from_xyz_yaw(0.03, 0.0, 0.1, 0.3);
        let e = pose_error(&a, &b);
        assert!((e.combined - 0.03).abs() < 1e-9 && e.combined < 0.05);
    }

    #[test]
    fn collide_examples() {
        let s = Shape::Sphere { radius: 1.0 };
        assert!(collide(&s, &Pose::identity(), &s, &Pose::from_position(DVec3::new(3.0, 0.0, 0.0))).is_none());
        let c = collide(&s, &Pose::identity(), &s, &Pose::identity()).unwrap();
        assert!((c.depth - 2.0).abs() < 1e-9);

        let b = Shape::cuboid(0.1, 0.1, 0.1);
        let ball = Shape::Sphere { radius: 0.05 };
        let c = collide(&b, &Pose::identity(), &ball, &Pose::from_position(DVec3::new(0.12, 0.0, 0.0))).unwrap();
        assert!((c.depth - 0.03).abs() < 1e-9, "{c:?}");
        assert!((c.normal - DVec3::X).length() < 1e-9);
    }

    #[test]
    fn disc_axis_is_local_z() {
        let d = Shape::Disc { radius: 0.05, height: 0.02 };
        // 0.02 tall: a ball resting 0.011 above centre touches only if axis is vertical
        let ball = Shape::Sphere { radius: 0.002 };
        assert!(collide(&d, &Pose::identity(), &ball, &Pose::from_position(DVec3::new(0.0, 0.0, 0.0115))).is_some());
        assert!(collide(&d, &Pose::identity(), &ball, &Pose::from_position(DVec3::new(0.0, 0.0, 0.013))).is_none());
        assert!((d.vertical_half_extent(DQuat::IDENTITY) - 0.01).abs() < 1e-12);
        assert!((d.vertical_half_extent(DQuat::from_rotation_x(FRAC_PI_2)) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn project_examples() {
        let cam = Camera { id: CameraId::Base, center: [0.0, 0.0], width: 1.2, height: 1.2, resolution: [256, 256], follows_ee: false };
        assert_eq!(project(&cam, DVec3::ZERO), Some((128.0, 128.0)));
        assert!(project(&cam, DVec3::new(0.7, 0.0, 0.0)).is_none());
        let (x, _) = project(&cam, DVec3::new(0.3, 0.0, 0.0)).unwrap();
        assert!((x - 192.0).abs() < 1e-9);
    }

    #[test]
    fn footprint_overlap_examples() {
        let small = Shape::cuboid(0.05, 0.05, 0.05);
        let big = Shape::cuboid(0.1, 0.1, 0.05);
        let o = Pose::identity();
        assert_eq!(footprint_overlap((&small, &o), (&small, &o)), 1.0);
        assert_eq!(footprint_overlap((&small, &o), (&small, &Pose::from_position(DVec3::new(0.5, 0.0, 0.0)))), 0.0);
        assert_eq!(footprint_overlap((&small, &o), (&big, &o)), 1.0);
        assert!((footprint_overlap((&big, &o), (&small, &o)) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn rotated_box_footprint_is_hull() {
        let b = Shape::cuboid(0.05, 0.02, 0.01);
        let fp = b.footprint(&Pose::from_xyz_yaw(0.0, 0.0, 0.0, FRAC_PI_2));
        let (lo, hi) = fp.bounds();
        assert!((hi.x - 0.02).abs() < 1e-12 && (hi.y - 0.05).abs() < 1e-12 && (lo.x + 0.02).abs() < 1e-12);
    }

    #[test]
    fn footprint_intersection_and_separation() {
        let a = Footprint::rect(DVec2::ZERO, DVec2::splat(0.05), 0.0);
        let b = Footprint::rect(DVec2::new(0.1, 0.0), DVec2::splat(0.05), 0.0);
        assert!(!a.intersects(&b));
        let c = Footprint::rect(DVec2::new(0.09, 0.0), DVec2::splat(0.05), 0.3);
        assert!(a.intersects(&c));
        let d = Footprint::Circle { center: DVec2::new(0.07, 0.0), radius: 0.03 };
        assert!(a.intersects(&d));
        let t = d.separation_along(&a, DVec2::X);
        assert!((t - 0.01).abs() < 1e-9, "{t}");
        assert!(!d.translated(DVec2::X * t).intersects(&a));
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -PI..PI, -PI..PI, -PI..PI).prop_map(|(x, y, z, a, b, c)| {
            Pose::new(DVec3::new(x, y, z), DQuat::from_euler(parry3d_f64::glamx::EulerRot::XYZ, a, b, c))
        })
    }

    fn arb_shape() -> impl Strategy<Value = Shape> {
        prop_oneof![
            (0.01..0.3f64, 0.01..0.3f64, 0.01..0.3f64).prop_map(|(a, b, c)| Shape::cuboid(a, b, c)),
            (0.01..0.3f64, 0.01..0.3f64).prop_map(|(r, h)| Shape::Disc { radius: r, height: h }),
            (0.01..0.3f64).prop_map(|r| Shape::Sphere { radius: r }),
        ]
    }

    proptest! {
        #[test]
        fn compose_keeps_unit_norm_and_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let ab = a.compose(&b);
            prop_assert!((ab.orientation.length() - 1.0).abs() < 1e-9);
            let l = ab.compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.position - r.position).abs().max_element() < 1e-9);
            prop_assert!(quat_angle(l.orientation, r.orientation) < 1e-7);
        }

        #[test]
        fn pose_error_symmetric(a in arb_pose(), b in arb_pose()) {
            let e1 = pose_error(&a, &b);
            let e2 = pose_error(&b, &a);
            prop_assert!((e1.position - e2.position).abs() < 1e-9);
            prop_assert!((e1.rotation - e2.rotation).abs() < 1e-9);
            prop_assert!((e1.combined - e2.combined).abs() < 1e-9);
            prop_assert!((0.0..=PI + 1e-12).contains(&e1.rotation));
        }

        #[test]
        fn collide_symmetric(sa in arb_shape(), pa in arb_pose(), sb in arb_shape(), pb in arb_pose()) {
            let ab = collide(&sa, &pa, &sb, &pb);
            let ba = collide(&sb, &pb, &sa, &pa);
            prop_assert_eq!(ab.is_some(), ba.is_some());
            if let (Some(x), Some(y)) = (ab, ba) {
                prop_assert!((x.depth - y.depth).abs() < 1e-6, "{} vs {}", x.depth, y.depth);
            }
        }

        #[test]
        fn project_is_affine(x0 in -0.9..0.9f64, y0 in -0.9..0.9f64, x1 in -0.9..0.9f64, y1 in -0.9..0.9f64) {
            let cam = Camera::base();
            let a = project(&cam, DVec3::new(x0, y0, 0.0)).unwrap();
            let b = project(&cam, DVec3::new(x1, y1, 0.0)).unwrap();
            let m = project(&cam, DVec3::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.3)).unwrap();
            prop_assert!((m.0 - (a.0 + b.0) / 2.0).abs() <= 1.0);
            prop_assert!((m.1 - (a.1 + b.1) / 2.0).abs() <= 1.0);
        }

        #[test]
        fn overlap_monotone_in_base_size(hx in 0.01..0.08f64, hy in 0.01..0.08f64, dx in -0.1..0.1f64, dy in -0.1..0.1f64,
                                         b in 0.01..0.1f64, grow in 0.0..0.05f64, yaw in -PI..PI) {
            let top = Shape::cuboid(hx, hy, 0.02);
            let tp = Pose::from_xyz_yaw(dx, dy, 0.0, yaw);
            let o = Pose::identity();
            let small = footprint_overlap((&top, &tp), (&Shape::cuboid(b, b, 0.02), &o));
            let large = footprint_overlap((&top, &tp), (&Shape::cuboid(b + grow, b + grow, 0.02), &o));
            prop_assert!(large >= small);
            prop_assert!((0.0..=1.0).contains(&small));
        }
    }
}
