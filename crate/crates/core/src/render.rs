//! Flat-shaded top-down rendering, bounding boxes and prompt images.

use parry3d_f64::glamx::{DVec2, DVec3};
use serde::{Deserialize, Serialize};

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::geom::{Camera, CameraId, Footprint, Pose};
use crate::tasks::{Catalog, Pattern, PromptSegment, TaskInstance};
use crate::world::{GoalStatus, ObjectKind, TraceGoal, WorldObject, WorldState};

pub const BACKGROUND: [u8; 3] = [168, 160, 148];
const GRIPPER: [u8; 3] = [30, 30, 34];
const GRIPPER_ON: [u8; 3] = [230, 120, 20];
const GOAL_ACTIVE: [u8; 3] = [220, 40, 200];
const GOAL_PENDING: [u8; 3] = [240, 170, 235];
/// Pattern period on object surfaces (m).
const PERIOD: f64 = 0.012;
pub const ASSET_RESOLUTION: u32 = 64;

/// 8-bit RGB raster, row-major from the top-left pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let pixels = color.iter().copied().cycle().take(3 * (width * height) as usize).collect();
        Image { width, height, pixels }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y * self.width + x) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn set(&mut self, x: u32, y: u32, c: [u8; 3]) {
        let i = 3 * (y * self.width + x) as usize;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8], file: &str) -> Result<Image> {
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(parse(file, pos, "truncated PPM header"));
            }
            fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
        }
        if fields[0].1 != "P6" {
            return Err(parse(file, 0, "not a binary PPM (P6)"));
        }
        let num = |k: usize| -> Result<u32> {
            fields[k].1.parse::<u32>().map_err(|_| parse(file, fields[k].0, "bad PPM header number"))
        };
        let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
        if maxval != 255 {
            return Err(parse(file, fields[3].0, "PPM maxval must be 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(parse(file, pos, "missing raster separator"));
        }
        pos += 1;
        let want = 3 * width as usize * height as usize;
        let got = bytes.len() - pos;
        if got != want {
            return Err(Error::Integrity { file: file.into(), msg: format!("raster has {got} bytes, expected {want}") });
        }
        Ok(Image { width, height, pixels: bytes[pos..].to_vec() })
    }
}

fn parse(file: &str, offset: usize, msg: &str) -> Error {
    Error::Parse { file: file.into(), offset, msg: msg.into() }
}

/// Colour of texture `name` at object-local surface point `uv`.
pub fn texture_color(name: &str, uv: DVec2) -> [u8; 3] {
    let Some(t) = Catalog::builtin().texture(name) else { return fallback_color(name) };
    let c0 = t.colors.first().copied().unwrap_or([128, 128, 128]);
    let c1 = t.colors.get(1).copied().unwrap_or([c0[0] / 2, c0[1] / 2, c0[2] / 2]);
    let (fu, fv) = (uv.x / PERIOD, uv.y / PERIOD);
    let second = match t.pattern {
        Pattern::Solid => false,
        Pattern::Stripes => fu.floor().rem_euclid(2.0) == 1.0,
        Pattern::Checker => (fu.floor() + fv.floor()).rem_euclid(2.0) == 1.0,
        Pattern::Dots => {
            let d = DVec2::new(fu - fu.round(), fv - fv.round());
            d.length() < 0.3
        }
        Pattern::Grid => fu.rem_euclid(1.0) < 0.2 || fv.rem_euclid(1.0) < 0.2,
    };
    if second {
        c1
    } else {
        c0
    }
}

/// Stable colour for textures missing from the catalog.
fn fallback_color(name: &str) -> [u8; 3] {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    [(h >> 8) as u8 | 0x40, (h >> 24) as u8 | 0x40, (h >> 40) as u8 | 0x40]
}

#[derive(Debug, Clone)]
enum Fill {
    Texture { texture: String, pose: Pose },
    Solid([u8; 3]),
}

/// One painted top face.
#[derive(Debug, Clone)]
struct Layer {
    top: f64,
    footprint: Footprint,
    fill: Fill,
    object: Option<usize>,
}

/// What a frame shows: objects, the gripper and trace goals.
#[derive(Debug, Clone, Copy)]
pub struct SceneView<'a> {
    pub objects: &'a [WorldObject],
    /// Tip position and whether suction is on.
    pub gripper: Option<(DVec3, bool)>,
    pub goals: &'a [TraceGoal],
    pub ee_radius: f64,
    pub wall: f64,
}

impl<'a> SceneView<'a> {
    pub fn of(state: &'a WorldState) -> Self {
        SceneView {
            objects: &state.objects,
            gripper: Some((state.tip(), state.ee.suction_on)),
            goals: &state.goals,
            ee_radius: state.config.ee_radius,
            wall: state.config.container_wall,
        }
    }

    pub fn objects_only(objects: &'a [WorldObject], cfg: &WorldConfig) -> Self {
        SceneView { objects, gripper: None, goals: &[], ee_radius: cfg.ee_radius, wall: cfg.container_wall }
    }

    /// Painter layers, lowest top first; ties keep scene order.
    fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        for (i, o) in self.objects.iter().enumerate() {
            let parts = match o.kind {
                ObjectKind::Container => o.parts(self.wall),
                _ => vec![(o.shape, o.pose)],
            };
            for (shape, pose) in parts {
                out.push(Layer {
                    top: pose.position.z + shape.vertical_half_extent(pose.orientation),
                    footprint: shape.footprint(&pose),
                    fill: Fill::Texture { texture: o.texture.clone(), pose: o.pose },
                    object: Some(i),
                });
            }
        }
        for g in self.goals {
            let color = match g.status {
                GoalStatus::Active => GOAL_ACTIVE,
                GoalStatus::Pending => GOAL_PENDING,
                GoalStatus::Done => continue,
            };
            out.push(Layer {
                top: g.position[2],
                footprint: Footprint::Circle { center: DVec2::new(g.position[0], g.position[1]), radius: g.radius.min(0.02) },
                fill: Fill::Solid(color),
                object: None,
            });
        }
        if let Some((tip, on)) = self.gripper {
            out.push(Layer {
                top: tip.z + 2.0 * self.ee_radius,
                footprint: Footprint::Circle { center: tip.truncate(), radius: self.ee_radius },
                fill: Fill::Solid(if on { GRIPPER_ON } else { GRIPPER }),
                object: None,
            });
        }
        // stable sort keeps scene order among equal heights
        out.sort_by(|a, b| a.top.total_cmp(&b.top));
        out
    }
}

/// Top-down orthographic frame of `view` through `cam` (already placed).
pub fn render_view(view: &SceneView, cam: &Camera) -> Image {
    let [w, h] = cam.resolution;
    let mut img = Image::filled(w, h, BACKGROUND);
    for layer in view.layers() {
        let (lo, hi) = layer.footprint.bounds();
        let (x0, y1) = cam.to_pixel(lo);
        let (x1, y0) = cam.to_pixel(hi);
        let (i0, i1) = ((x0.floor().max(0.0)) as u32, (x1.ceil().min(w as f64).max(0.0)) as u32);
        let (j0, j1) = ((y0.floor().max(0.0)) as u32, (y1.ceil().min(h as f64).max(0.0)) as u32);
        for j in j0..j1 {
            for i in i0..i1 {
                let p = cam.pixel_center(i, j);
                if !layer.footprint.contains(p) {
                    continue;
                }
                let c = match &layer.fill {
                    Fill::Solid(c) => *c,
                    Fill::Texture { texture, pose } => {
                        let local = pose.inverse().transform_point(p.extend(pose.position.z));
                        texture_color(texture, local.truncate())
                    }
                };
                img.set(i, j, c);
            }
        }
    }
    img
}

/// Frame of the world from camera `cam`; the hand camera follows the EE.
pub fn render_frame(state: &WorldState, cam: &Camera) -> Image {
    render_view(&SceneView::of(state), &cam.placed(state.tip().truncate()))
}

/// Pixel-space box of one object in one camera.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub object: String,
    pub camera: CameraId,
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
    pub visible: bool,
}

/// Boxes of every object as seen by `cam` (already placed).
pub fn view_boxes(view: &SceneView, cam: &Camera) -> Vec<BoundingBox> {
    let layers = view.layers();
    let [w, h] = cam.resolution;
    let mut out = Vec::with_capacity(view.objects.len());
    for (i, o) in view.objects.iter().enumerate() {
        let fp = o.footprint();
        let pts: Vec<(f64, f64)> = fp.outline().iter().map(|p| cam.to_pixel(*p)).collect();
        let min_x = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_x = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_y = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_y = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let in_frame = max_x > 0.0 && min_x < w as f64 && max_y > 0.0 && min_y < h as f64;
        let clamp = |v: f64, hi: u32| (v.clamp(0.0, hi as f64)) as i32;
        let (x0, x1) = (clamp(min_x.floor(), w), clamp(max_x.ceil(), w));
        let (y0, y1) = (clamp(min_y.floor(), h), clamp(max_y.ceil(), h));
        let visible = in_frame && unoccluded(&layers, i, &fp, cam, (x0, y0, x1, y1));
        out.push(BoundingBox { object: o.id.clone(), camera: cam.id, x0, y0, x1, y1, visible });
    }
    out
}

/// Some sample around the box centre shows object `i` on top.
fn unoccluded(layers: &[Layer], i: usize, fp: &Footprint, cam: &Camera, b: (i32, i32, i32, i32)) -> bool {
    let Some(own) = layers.iter().rposition(|l| l.object == Some(i)) else { return false };
    let (x0, y0, x1, y1) = (b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64);
    let mut samples = Vec::new();
    for fy in [0.5, 0.25, 0.75, 1.0 / 6.0, 5.0 / 6.0] {
        for fx in [0.5, 0.25, 0.75, 1.0 / 6.0, 5.0 / 6.0] {
            samples.push((x0 + fx * (x1 - x0), y0 + fy * (y1 - y0)));
        }
    }
    samples.into_iter().any(|(px, py)| {
        let p = pixel_to_world(cam, px, py);
        fp.contains(p) && layers[own + 1..].iter().all(|l| l.object == Some(i) || !l.footprint.contains(p))
    })
}

fn pixel_to_world(cam: &Camera, px: f64, py: f64) -> DVec2 {
    let left = cam.center[0] - cam.width / 2.0;
    let top = cam.center[1] + cam.height / 2.0;
    DVec2::new(left + px / cam.resolution[0] as f64 * cam.width, top - py / cam.resolution[1] as f64 * cam.height)
}

pub fn bounding_boxes(state: &WorldState, cam: &Camera) -> Vec<BoundingBox> {
    view_boxes(&SceneView::of(state), &cam.placed(state.tip().truncate()))
}

/// Image of one object alone, framed around it.
pub fn render_object(obj: &WorldObject, cfg: &WorldConfig) -> Image {
    let mut o = obj.clone();
    let c = o.pose.xy();
    o.pose.position.x -= c.x;
    o.pose.position.y -= c.y;
    let extent = o.footprint().outline().iter().map(|p| p.length()).fold(0.0, f64::max);
    let width = (2.6 * extent).max(0.08);
    let cam = Camera {
        id: CameraId::Base,
        center: [0.0, 0.0],
        width,
        height: width,
        resolution: [ASSET_RESOLUTION, ASSET_RESOLUTION],
        follows_ee: false,
    };
    let objects = [o];
    render_view(&SceneView::objects_only(&objects, cfg), &cam)
}

/// Square swatch of a texture.
pub fn render_texture(name: &str) -> Image {
    let n = ASSET_RESOLUTION;
    let side = 0.06;
    let mut img = Image::filled(n, n, BACKGROUND);
    for j in 0..n {
        for i in 0..n {
            let uv = DVec2::new((i as f64 + 0.5) / n as f64 * side, side - (j as f64 + 0.5) / n as f64 * side);
            img.set(i, j, texture_color(name, uv));
        }
    }
    img
}

/// Images for the prompt's image segments, in prompt order.
pub fn prompt_asset_images(inst: &TaskInstance, cfg: &WorldConfig) -> Result<Vec<Image>> {
    let base = Camera::base();
    let mut out = Vec::new();
    for seg in inst.prompt_assets() {
        let img = match seg {
            PromptSegment::ObjImage(id) => {
                let o = inst.find_object(id).ok_or_else(|| Error::MissingObject(id.clone()))?;
                render_object(o, cfg)
            }
            PromptSegment::TexImage(t) => render_texture(t),
            PromptSegment::Keystep(k) => {
                let spec = inst.keysteps.get(*k).ok_or_else(|| Error::MalformedInstance(format!("keystep {k} missing")))?;
                let w = WorldState::reset(spec, cfg)?;
                render_view(&SceneView { gripper: None, ..SceneView::of(&w) }, &base)
            }
            PromptSegment::SceneImage => {
                let w = WorldState::reset(&inst.scene, cfg)?;
                render_view(&SceneView { gripper: None, ..SceneView::of(&w) }, &base)
            }
            PromptSegment::Text(_) => continue,
        };
        out.push(img);
    }
    Ok(out)
}
