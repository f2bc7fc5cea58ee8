//! The task catalog: scene samplers, predicate builders and prompts.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::OnceLock;

use parry3d_f64::glamx::{DVec2, DVec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Shape};
use crate::planner::balance_partition;
use crate::predicates::{Direction, Predicate, TouchMode, ROTATION_ANGLES};
use crate::world::{ObjectKind, ScaleSpec, SceneSpec, WorldObject};

const CATALOG_JSON: &str = include_str!("../data/catalog.json");
const DENSITY: f64 = 1000.0;
const MAX_RETRIES: usize = 1000;
/// Free gap kept between sampled footprints (m).
const MARGIN: f64 = 0.04;
const TABLE: Rect = Rect { min: [-0.4, -0.4], max: [0.4, 0.4] };
const HOME: [f64; 3] = [0.0, 0.0, 0.35];
/// Spacing of the neighbour-task grid (m).
pub const GRID_SPACING: f64 = 0.15;
pub const AT_TOLERANCE: f64 = 0.05;
pub const BALANCE_TOLERANCE: f64 = 0.01;
pub const ADJECTIVES: [&str; 4] = ["daxer", "blicker", "modier", "kobar"];
pub const NOUNS: [&str; 4] = ["dax", "blicket", "wug", "zup"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L0,
    L1,
    L2,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::L0 => "L0",
            Level::L1 => "L1",
            Level::L2 => "L2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskInfo {
    pub name: &'static str,
    pub level: Level,
    /// Prompt can only be expressed with goal images.
    pub keystep_dependent: bool,
}

const fn info(name: &'static str, level: Level, keystep_dependent: bool) -> TaskInfo {
    TaskInfo { name, level, keystep_dependent }
}

pub const TASKS: [TaskInfo; 33] = [
    info("match_pose", Level::L0, true),
    info("move_without_hitting", Level::L0, true),
    info("pick", Level::L0, false),
    info("place", Level::L0, false),
    info("push", Level::L0, false),
    info("rotate", Level::L0, false),
    info("throw", Level::L0, false),
    info("throw_topple", Level::L0, false),
    info("touch", Level::L0, false),
    info("touch_push", Level::L0, false),
    info("touch_topple", Level::L0, false),
    info("trace", Level::L0, false),
    info("simple_manipulation", Level::L1, false),
    info("follow_order", Level::L1, true),
    info("follow_order_restore", Level::L1, true),
    info("neighbour", Level::L1, false),
    info("novel_adjective", Level::L1, false),
    info("novel_noun", Level::L1, false),
    info("novel_adj_noun", Level::L1, false),
    info("rearrange", Level::L1, true),
    info("rearrange_restore", Level::L1, true),
    info("rotate_restore", Level::L1, false),
    info("rotate_symmetry", Level::L1, false),
    info("stack", Level::L1, false),
    info("stack_reversed", Level::L1, false),
    info("sort", Level::L1, false),
    info("swap", Level::L1, false),
    info("balance", Level::L2, false),
    info("sort_stack", Level::L2, false),
    info("stack_topple", Level::L2, false),
    info("swap_push", Level::L2, false),
    info("swap_rotate", Level::L2, false),
    info("throw_sort", Level::L2, false),
];

pub fn task_info(name: &str) -> Result<&'static TaskInfo> {
    TASKS.iter().find(|t| t.name == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestObjects,
    TestTextures,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestObjects, Split::TestTextures];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestObjects => "test_objects",
            Split::TestTextures => "test_textures",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (train, test_objects, test_textures)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Box,
    Disc,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateDef {
    pub name: String,
    pub shape: ShapeKind,
    /// Full size ranges (m): box x/y/z; disc diameter x, height z; sphere diameter x.
    pub x: [f64; 2],
    #[serde(default)]
    pub y: Option<[f64; 2]>,
    #[serde(default)]
    pub z: Option<[f64; 2]>,
    #[serde(default)]
    pub uniform: bool,
}

impl TemplateDef {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Shape {
        let draw = |r: [f64; 2], rng: &mut ChaCha8Rng| if r[1] > r[0] { rng.gen_range(r[0]..r[1]) } else { r[0] };
        let x = draw(self.x, rng);
        match self.shape {
            ShapeKind::Box if self.uniform => Shape::cuboid(x / 2.0, x / 2.0, x / 2.0),
            ShapeKind::Box => {
                let y = draw(self.y.unwrap_or(self.x), rng);
                let z = draw(self.z.unwrap_or(self.x), rng);
                Shape::cuboid(x / 2.0, y / 2.0, z / 2.0)
            }
            ShapeKind::Disc => Shape::Disc { radius: x / 2.0, height: draw(self.z.unwrap_or(self.x), rng) },
            ShapeKind::Sphere => Shape::Sphere { radius: x / 2.0 },
        }
    }

    /// Can carry another object on its top face.
    pub fn flat(&self) -> bool {
        self.shape != ShapeKind::Sphere
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    Dots,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureDef {
    pub name: String,
    pub description: String,
    pub pattern: Pattern,
    pub colors: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub split_seed: u64,
    pub templates: Vec<TemplateDef>,
    pub textures: Vec<TextureDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_objects: Vec<String>,
    pub test_objects: Vec<String>,
    pub train_textures: Vec<String>,
    pub test_textures: Vec<String>,
}

/// Deterministic 80/20 partition of `names`.
pub fn split_names(names: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    let mut v = names.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (names.len() as f64 * 0.8).round() as usize;
    let test = v.split_off(n_train.min(v.len()));
    (v, test)
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Catalog> {
        let cat: Catalog = serde_json::from_str(text).map_err(|e| Error::Config(format!("catalog: {e}")))?;
        if cat.templates.is_empty() || cat.textures.is_empty() {
            return Err(Error::Config("catalog has no templates or textures".into()));
        }
        Ok(cat)
    }

    pub fn builtin() -> &'static Catalog {
        static CAT: OnceLock<Catalog> = OnceLock::new();
        CAT.get_or_init(|| Catalog::from_json(CATALOG_JSON).expect("embedded catalog is valid"))
    }

    pub fn template(&self, name: &str) -> Option<&TemplateDef> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn texture(&self, name: &str) -> Option<&TextureDef> {
        self.textures.iter().find(|t| t.name == name)
    }

    /// Object templates are split within each shape class so every split keeps boxes, discs and spheres.
    pub fn split(&self, seed: u64) -> Splits {
        let mut train_objects = Vec::new();
        let mut test_objects = Vec::new();
        for (k, kind) in [ShapeKind::Box, ShapeKind::Disc, ShapeKind::Sphere].into_iter().enumerate() {
            let names: Vec<String> = self.templates.iter().filter(|t| t.shape == kind).map(|t| t.name.clone()).collect();
            if names.is_empty() {
                continue;
            }
            let (mut tr, mut te) = split_names(&names, seed.wrapping_add(k as u64));
            if te.is_empty() && tr.len() > 1 {
                te.push(tr.pop().expect("non-empty"));
            }
            train_objects.extend(tr);
            test_objects.extend(te);
        }
        let names: Vec<String> = self.textures.iter().map(|t| t.name.clone()).collect();
        let (train_textures, test_textures) = split_names(&names, seed.wrapping_add(100));
        Splits { train_objects, test_objects, train_textures, test_textures }
    }

    pub fn default_splits(&self) -> Splits {
        self.split(self.split_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PromptSegment {
    Text(String),
    ObjImage(String),
    TexImage(String),
    Keystep(usize),
    SceneImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compass {
    North,
    South,
    East,
    West,
}

impl Compass {
    pub const ALL: [Compass; 4] = [Compass::North, Compass::South, Compass::East, Compass::West];

    pub fn offset(self) -> (i32, i32) {
        match self {
            Compass::North => (0, 1),
            Compass::South => (0, -1),
            Compass::East => (1, 0),
            Compass::West => (-1, 0),
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Compass::North => "north",
            Compass::South => "south",
            Compass::East => "east",
            Compass::West => "west",
        }
    }
}

/// Objects laid out on a square grid; cell (i, j) sits at origin + spacing·(i, j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLayout {
    pub origin: [f64; 2],
    pub spacing: f64,
    pub cells: Vec<((i32, i32), String)>,
}

impl GridLayout {
    pub fn cell_of(&self, id: &str) -> Option<(i32, i32)> {
        self.cells.iter().find(|(_, o)| o == id).map(|(c, _)| *c)
    }

    pub fn occupant(&self, cell: (i32, i32)) -> Option<&str> {
        self.cells.iter().find(|(c, _)| *c == cell).map(|(_, o)| o.as_str())
    }
}

/// Occupant of the grid cell adjacent to `obj` in direction `dir` (+y is north).
pub fn neighbour_of(grid: &GridLayout, obj: &str, dir: Compass) -> Option<String> {
    let (i, j) = grid.cell_of(obj)?;
    let (di, dj) = dir.offset();
    grid.occupant((i + di, j + dj)).map(str::to_string)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    Taller,
    Shorter,
    Bigger,
    Smaller,
}

pub fn novel_adjective(rng: &mut impl Rng) -> (&'static str, Property) {
    let word = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
    let props = [Property::Taller, Property::Shorter, Property::Bigger, Property::Smaller];
    (word, props[rng.gen_range(0..props.len())])
}

pub fn novel_noun(rng: &mut impl Rng) -> &'static str {
    NOUNS[rng.gen_range(0..NOUNS.len())]
}

fn scaled(shape: Shape, sxy: f64, sz: f64) -> Shape {
    match shape {
        Shape::OrientedBox { half_extents: [x, y, z] } => Shape::cuboid(x * sxy, y * sxy, z * sz),
        Shape::Disc { radius, height } => Shape::Disc { radius: radius * sxy, height: height * sz },
        Shape::Sphere { radius } => Shape::Sphere { radius: radius * sxy },
    }
}

/// Two shapes identical except for the adjective's property; the first one has it.
pub fn grounding_pair(shape: Shape, prop: Property) -> (Shape, Shape) {
    let small = shape;
    let (tall, big) = (scaled(shape, 1.0, 1.6), scaled(shape, 1.4, 1.4));
    match prop {
        Property::Taller => (tall, small),
        Property::Shorter => (small, tall),
        Property::Bigger => (big, small),
        Property::Smaller => (small, big),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: String,
    pub level: Level,
    pub seed: u64,
    pub split: Split,
    pub scene: SceneSpec,
    pub predicate: Predicate,
    pub prompt: Vec<PromptSegment>,
    /// Exemplar objects that appear only in prompt images.
    #[serde(default)]
    pub prompt_objects: Vec<WorldObject>,
    /// Goal scenes shown as keystep images.
    #[serde(default)]
    pub keysteps: Vec<SceneSpec>,
    #[serde(default)]
    pub grid: Option<GridLayout>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl TaskInstance {
    pub fn info(&self) -> Result<&'static TaskInfo> {
        task_info(&self.task)
    }

    pub fn find_object(&self, id: &str) -> Option<&WorldObject> {
        self.scene.objects.iter().chain(self.prompt_objects.iter()).find(|o| o.id == id)
    }

    /// Image segments in prompt order; asset `k` is stored as `prompt_assets/{k:02}.ppm`.
    pub fn prompt_assets(&self) -> Vec<&PromptSegment> {
        self.prompt.iter().filter(|s| !matches!(s, PromptSegment::Text(_))).collect()
    }

    /// Texture names referenced anywhere in the instance.
    pub fn textures_used(&self) -> Vec<String> {
        let mut v: Vec<String> = self.scene.objects.iter().chain(self.prompt_objects.iter()).map(|o| o.texture.clone()).collect();
        for s in &self.prompt {
            if let PromptSegment::TexImage(t) = s {
                v.push(t.clone());
            }
        }
        v.sort();
        v.dedup();
        v
    }

    pub fn templates_used(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .scene
            .objects
            .iter()
            .chain(self.prompt_objects.iter())
            .filter(|o| o.kind == ObjectKind::Solid)
            .map(|o| o.template.clone())
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Multimodal,
    LanguageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RenderedSegment {
    Text { text: String },
    Image { asset: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub mode: PromptMode,
    /// Flat text; images appear as `<img:NN>` markers.
    pub text: String,
    pub segments: Vec<RenderedSegment>,
}

pub fn asset_name(k: usize) -> String {
    format!("prompt_assets/{k:02}.ppm")
}

pub fn describe_object(o: &WorldObject) -> String {
    let tex = Catalog::builtin().texture(&o.texture).map_or(o.texture.as_str(), |t| t.description.as_str());
    format!("{tex} {}", o.template)
}

fn describe_texture(name: &str) -> String {
    Catalog::builtin().texture(name).map_or(name.to_string(), |t| t.description.clone())
}

pub fn render_prompt(inst: &TaskInstance, mode: PromptMode) -> Result<RenderedPrompt> {
    let info = inst.info()?;
    if mode == PromptMode::LanguageOnly && info.keystep_dependent {
        return Err(Error::UnsupportedLanguageOnly(inst.task.clone()));
    }
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut k = 0;
    for seg in &inst.prompt {
        let piece = match (seg, mode) {
            (PromptSegment::Text(t), _) => Some(t.clone()),
            (PromptSegment::ObjImage(id), PromptMode::LanguageOnly) => Some(
                inst.find_object(id).map(describe_object).ok_or_else(|| Error::MissingObject(id.clone()))?,
            ),
            (PromptSegment::TexImage(t), PromptMode::LanguageOnly) => Some(describe_texture(t)),
            (PromptSegment::Keystep(_) | PromptSegment::SceneImage, PromptMode::LanguageOnly) => {
                return Err(Error::UnsupportedLanguageOnly(inst.task.clone()))
            }
            (_, PromptMode::Multimodal) => None,
        };
        match piece {
            Some(t) => {
                text.push_str(&t);
                match segments.last_mut() {
                    Some(RenderedSegment::Text { text: prev }) => prev.push_str(&t),
                    _ => segments.push(RenderedSegment::Text { text: t }),
                }
            }
            None => {
                text.push_str(&format!("<img:{k:02}>"));
                segments.push(RenderedSegment::Image { asset: asset_name(k) });
                k += 1;
            }
        }
    }
    Ok(RenderedPrompt { mode, text, segments })
}

/// Instance for (task, seed, split), deterministic in all three.
pub fn instantiate(task: &str, seed: u64, split: Split) -> Result<TaskInstance> {
    let info = task_info(task)?;
    let cat = Catalog::builtin();
    let splits = cat.default_splits();
    let (tpl_names, tex_names) = match split {
        Split::Train => (&splits.train_objects, &splits.train_textures),
        Split::TestObjects => (&splits.test_objects, &splits.train_textures),
        Split::TestTextures => (&splits.train_objects, &splits.test_textures),
    };
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(mix_seed(task, seed, split)),
        templates: tpl_names.iter().filter_map(|n| cat.template(n)).collect(),
        textures: tex_names.iter().filter_map(|n| cat.texture(n)).map(|t| t.name.clone()).collect(),
        objects: Vec::new(),
        prompt_objects: Vec::new(),
        reserved: Vec::new(),
        task: info.name,
        seed,
        counter: 0,
    };
    let mut b = Built::default();
    build(task, &mut s, &mut b)?;
    let mut scene = SceneSpec::new(s.objects, b.ee.unwrap_or_else(|| Pose::from_position(DVec3::from_array(HOME))), seed);
    scene.attached = b.attached;
    scene.scale = b.scale;
    scene.goals = b.goals;
    let keysteps = b
        .keystep_scenes
        .into_iter()
        .map(|(objs, ee)| {
            let mut k = scene.clone();
            for (id, pose) in objs {
                if let Some(o) = k.objects.iter_mut().find(|o| o.id == id) {
                    o.pose = pose;
                }
            }
            if let Some(ee) = ee {
                k.ee_pose = ee;
            }
            k
        })
        .collect();
    Ok(TaskInstance {
        task: info.name.to_string(),
        level: info.level,
        seed,
        split,
        scene,
        predicate: b.predicate.ok_or_else(|| Error::Sampler { task: task.into(), seed, reason: "no predicate".into() })?,
        prompt: b.prompt.0,
        prompt_objects: s.prompt_objects,
        keysteps,
        grid: b.grid,
        notes: b.notes,
    })
}

fn mix_seed(task: &str, seed: u64, split: Split) -> u64 {
    // FNV-1a over the task name keeps streams stable across builds
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in task.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (split as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    min: [f64; 2],
    max: [f64; 2],
}

impl Rect {
    fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Rect { min, max }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVec2 {
        DVec2::new(rng.gen_range(self.min[0]..=self.max[0]), rng.gen_range(self.min[1]..=self.max[1]))
    }
}

#[derive(Default)]
struct Prompt(Vec<PromptSegment>);

impl Prompt {
    fn t(mut self, s: &str) -> Self {
        match self.0.last_mut() {
            Some(PromptSegment::Text(prev)) => prev.push_str(s),
            _ => self.0.push(PromptSegment::Text(s.to_string())),
        }
        self
    }

    fn o(mut self, id: &str) -> Self {
        self.0.push(PromptSegment::ObjImage(id.to_string()));
        self
    }

    fn x(mut self, tex: &str) -> Self {
        self.0.push(PromptSegment::TexImage(tex.to_string()));
        self
    }

    fn k(mut self, i: usize) -> Self {
        self.0.push(PromptSegment::Keystep(i));
        self
    }

    fn scene(mut self) -> Self {
        self.0.push(PromptSegment::SceneImage);
        self
    }
}

/// Object poses to override and an optional gripper pose for one goal image.
type KeystepScene = (Vec<(String, Pose)>, Option<Pose>);

#[derive(Default)]
struct Built {
    predicate: Option<Predicate>,
    prompt: Prompt,
    ee: Option<Pose>,
    attached: Option<String>,
    scale: Option<ScaleSpec>,
    goals: Vec<[f64; 3]>,
    keystep_scenes: Vec<KeystepScene>,
    grid: Option<GridLayout>,
    notes: BTreeMap<String, String>,
}

struct Sampler {
    rng: ChaCha8Rng,
    templates: Vec<&'static TemplateDef>,
    textures: Vec<String>,
    objects: Vec<WorldObject>,
    prompt_objects: Vec<WorldObject>,
    /// Textures that identify one object (or group) and must not be reused.
    reserved: Vec<String>,
    task: &'static str,
    seed: u64,
    counter: usize,
}

/// Radius of the circle around the pose enclosing the footprint.
fn plan_radius(o: &WorldObject) -> f64 {
    let c = o.pose.xy();
    o.footprint().outline().iter().map(|p| p.distance(c)).fold(0.0, f64::max)
}

fn yaw_of(shape: &Shape, rng: &mut ChaCha8Rng) -> f64 {
    match shape {
        Shape::OrientedBox { .. } => rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        _ => 0.0,
    }
}

fn on_table(shape: &Shape, xy: DVec2, yaw: f64) -> Pose {
    Pose::from_xyz_yaw(xy.x, xy.y, shape.vertical_half_extent(parry3d_f64::glamx::DQuat::IDENTITY), yaw)
}

impl Sampler {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Sampler { task: self.task.into(), seed: self.seed, reason: reason.into() }
    }

    fn template(&mut self, f: impl Fn(&TemplateDef) -> bool) -> Result<&'static TemplateDef> {
        let pool: Vec<&'static TemplateDef> = self.templates.iter().copied().filter(|t| f(t)).collect();
        pool.choose(&mut self.rng).copied().ok_or_else(|| self.err("no template satisfies the task constraints"))
    }

    /// A texture not reserved by another object; `unique` reserves it for this one.
    fn texture(&mut self, unique: bool) -> Result<String> {
        let used: Vec<&str> = self.objects.iter().map(|o| o.texture.as_str()).collect();
        let pool: Vec<String> = self
            .textures
            .iter()
            .filter(|t| !self.reserved.contains(t) && (!unique || !used.contains(&t.as_str())))
            .cloned()
            .collect();
        let t = pool.choose(&mut self.rng).cloned().ok_or_else(|| self.err("texture pool exhausted"))?;
        if unique {
            self.reserved.push(t.clone());
        }
        Ok(t)
    }

    fn next_id(&mut self, prefix: &str) -> String {
        self.counter += 1;
        format!("{prefix}{}", self.counter - 1)
    }

    fn make(&mut self, tpl: &TemplateDef, tex: &str, shape: Option<Shape>) -> WorldObject {
        let shape = shape.unwrap_or_else(|| tpl.sample(&mut self.rng));
        let yaw = yaw_of(&shape, &mut self.rng);
        let id = self.next_id("obj");
        WorldObject::new(&id, ObjectKind::Solid, shape, on_table(&shape, DVec2::ZERO, yaw), &tpl.name, tex, DENSITY)
    }

    /// New object whose (template, texture) pair is not yet in the scene.
    fn object(&mut self, f: impl Fn(&TemplateDef) -> bool, unique_tex: bool) -> Result<WorldObject> {
        for _ in 0..100 {
            let tpl = self.template(&f)?;
            let tex = if unique_tex {
                self.texture(true)?
            } else {
                self.texture(false)?
            };
            if self.objects.iter().any(|o| o.template == tpl.name && o.texture == tex) {
                if unique_tex {
                    self.reserved.retain(|t| t != &tex);
                }
                continue;
            }
            return Ok(self.make(tpl, &tex, None));
        }
        Err(self.err("could not find a distinguishable object"))
    }

    fn object_with_texture(&mut self, f: impl Fn(&TemplateDef) -> bool, tex: &str) -> Result<WorldObject> {
        for _ in 0..100 {
            let tpl = self.template(&f)?;
            if !self.objects.iter().any(|o| o.template == tpl.name && o.texture == tex) {
                return Ok(self.make(tpl, tex, None));
            }
        }
        Err(self.err("could not find a distinguishable object"))
    }

    fn clear_at(&self, xy: DVec2, r: f64, margin: f64) -> bool {
        self.objects.iter().all(|o| o.pose.xy().distance(xy) >= r + plan_radius(o) + margin)
    }

    fn place(&mut self, mut obj: WorldObject, region: Rect) -> Result<String> {
        self.place_with(&mut obj, region, MARGIN, |_| true)?;
        let id = obj.id.clone();
        self.objects.push(obj);
        Ok(id)
    }

    fn place_with(&mut self, obj: &mut WorldObject, region: Rect, margin: f64, ok: impl Fn(DVec2) -> bool) -> Result<()> {
        let r = plan_radius(obj);
        for _ in 0..MAX_RETRIES {
            let xy = region.sample(&mut self.rng);
            if ok(xy) && self.clear_at(xy, r, margin) {
                obj.pose.position.x = xy.x;
                obj.pose.position.y = xy.y;
                return Ok(());
            }
        }
        Err(self.err(format!("no free placement for `{}` after {MAX_RETRIES} tries", obj.id)))
    }

    fn place_filtered(&mut self, mut obj: WorldObject, region: Rect, ok: impl Fn(DVec2) -> bool) -> Result<String> {
        self.place_with(&mut obj, region, MARGIN, ok)?;
        let id = obj.id.clone();
        self.objects.push(obj);
        Ok(id)
    }

    fn distractors(&mut self, lo: usize, hi: usize, region: Rect, ok: impl Fn(DVec2) -> bool + Copy) -> Result<Vec<String>> {
        let n = self.rng.gen_range(lo..=hi);
        let mut ids = Vec::new();
        for _ in 0..n {
            let o = self.object(|_| true, false)?;
            ids.push(self.place_filtered(o, region, ok)?);
        }
        Ok(ids)
    }

    fn get(&self, id: &str) -> &WorldObject {
        self.objects.iter().find(|o| o.id == id).expect("sampled object exists")
    }

    fn pose(&self, id: &str) -> Pose {
        self.get(id).pose
    }

    fn coin(&mut self) -> bool {
        self.rng.gen_bool(0.5)
    }

    fn rotation(&mut self) -> (f64, Direction) {
        let a = ROTATION_ANGLES[self.rng.gen_range(0..ROTATION_ANGLES.len())];
        let d = if self.coin() { Direction::Clockwise } else { Direction::AntiClockwise };
        (a, d)
    }

    /// Free table pose for `id` away from every current footprint and `avoid` circles.
    fn free_pose(&mut self, id: &str, region: Rect, avoid: &[(DVec2, f64)], new_yaw: bool) -> Result<Pose> {
        let o = self.get(id).clone();
        let r = plan_radius(&o);
        for _ in 0..MAX_RETRIES {
            let xy = region.sample(&mut self.rng);
            let clear = self.objects.iter().all(|p| p.id == id || p.pose.xy().distance(xy) >= r + plan_radius(p) + MARGIN)
                && avoid.iter().all(|(c, rr)| c.distance(xy) >= r + rr + MARGIN)
                && o.pose.xy().distance(xy) >= 2.0 * r + MARGIN;
            if clear {
                let yaw = if new_yaw { yaw_of(&o.shape, &mut self.rng) } else { o.pose.yaw() };
                return Ok(Pose::from_xyz_yaw(xy.x, xy.y, o.pose.position.z, yaw));
            }
        }
        Err(self.err(format!("no free goal pose for `{id}`")))
    }
}

fn fixture(id: &str, kind: ObjectKind, half: [f64; 3], xy: DVec2, z: f64, tex: &str, template: &str) -> WorldObject {
    WorldObject::new(id, kind, Shape::cuboid(half[0], half[1], half[2]), Pose::from_xyz_yaw(xy.x, xy.y, z, 0.0), template, tex, DENSITY)
}

fn at_pos(o: &str, p: &Pose) -> Predicate {
    Predicate::AtPos { obj: o.into(), target: p.position.to_array(), tol: AT_TOLERANCE }
}

fn at_pose(o: &str, p: Pose) -> Predicate {
    Predicate::AtPose { obj: o.into(), target: p, tol: AT_TOLERANCE }
}

fn on_top(o: &str, base: &str) -> Predicate {
    Predicate::OnTop { obj: o.into(), base: base.into() }
}

fn flat(t: &TemplateDef) -> bool {
    t.flat()
}

/// Flat templates wide enough to carry any other object.
fn wide_base(t: &TemplateDef) -> bool {
    t.flat() && t.x[0] >= 0.045 && t.y.is_none_or(|y| y[0] >= 0.045)
}

fn toppleable(t: &TemplateDef) -> bool {
    t.shape != ShapeKind::Sphere
}

fn is_box(t: &TemplateDef) -> bool {
    t.shape == ShapeKind::Box
}

fn round(t: &TemplateDef) -> bool {
    t.shape != ShapeKind::Box
}

/// Text form of a rotation request.
fn rotation_text(a: f64, d: Direction) -> String {
    format!(" {} degrees {}", a as i64, d.word())
}

fn build(task: &str, s: &mut Sampler, b: &mut Built) -> Result<()> {
    match task {
        "match_pose" => match_pose(s, b),
        "move_without_hitting" => move_without_hitting(s, b),
        "pick" => pick(s, b),
        "place" => place(s, b),
        "push" => push(s, b),
        "rotate" => rotate(s, b, false),
        "throw" => throw(s, b, false),
        "throw_topple" => throw(s, b, true),
        "touch" => touch(s, b, 0),
        "touch_push" => touch(s, b, 1),
        "touch_topple" => touch_topple(s, b),
        "trace" => trace(s, b),
        "simple_manipulation" => simple_manipulation(s, b),
        "follow_order" => follow_order(s, b, false),
        "follow_order_restore" => follow_order(s, b, true),
        "neighbour" => neighbour(s, b),
        "novel_adjective" => novel_adj(s, b),
        "novel_noun" => novel_noun_task(s, b),
        "novel_adj_noun" => novel_adj_noun(s, b),
        "rearrange" => rearrange(s, b, false),
        "rearrange_restore" => rearrange(s, b, true),
        "rotate_restore" => rotate(s, b, true),
        "rotate_symmetry" => rotate_symmetry(s, b),
        "stack" => stack(s, b, false),
        "stack_reversed" => stack_reversed(s, b),
        "sort" => sort(s, b),
        "swap" => swap(s, b, SwapKind::Plain),
        "balance" => balance(s, b),
        "sort_stack" => sort_stack(s, b),
        "stack_topple" => stack(s, b, true),
        "swap_push" => swap(s, b, SwapKind::Push),
        "swap_rotate" => swap(s, b, SwapKind::Rotate),
        "throw_sort" => throw_sort(s, b),
        other => Err(Error::UnknownTask(other.to_string())),
    }
}

fn ee_goal(s: &mut Sampler, min_z: f64) -> Pose {
    let x = s.rng.gen_range(-0.35..0.35);
    let y = s.rng.gen_range(-0.35..0.35);
    let z = s.rng.gen_range(min_z..min_z.max(0.2) + 0.2);
    let yaw = s.rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Pose::from_xyz_yaw(x, y, z, yaw)
}

fn highest_top(s: &Sampler) -> f64 {
    s.objects.iter().map(|o| o.top()).fold(0.0, f64::max)
}

fn match_pose(s: &mut Sampler, b: &mut Built) -> Result<()> {
    s.distractors(0, 2, TABLE, |_| true)?;
    let n = s.rng.gen_range(1..=3);
    let min_z = highest_top(s) + 0.08;
    let goals: Vec<Pose> = (0..n).map(|_| ee_goal(s, min_z)).collect();
    let mut p = Prompt::default().t("Match the pose of the end effector in ");
    for (i, g) in goals.iter().enumerate() {
        if i > 0 {
            p = p.t(if i + 1 == n { " followed by " } else { ", " });
        }
        p = p.k(i);
        b.keystep_scenes.push((Vec::new(), Some(*g)));
    }
    b.prompt = p;
    b.predicate = Some(Predicate::sequence(goals.into_iter().map(|g| Predicate::EEAtPose { target: g, tol: AT_TOLERANCE }).collect()));
    Ok(())
}

fn move_without_hitting(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let side = if s.coin() { 1.0 } else { -1.0 };
    let start = Pose::from_xyz_yaw(-0.38 * side, s.rng.gen_range(-0.3..0.3), s.rng.gen_range(0.1..0.3), 0.0);
    let goal_yaw = s.rng.gen_range(-1.5..1.5);
    let goal = Pose::from_xyz_yaw(0.38 * side, s.rng.gen_range(-0.3..0.3), s.rng.gen_range(0.1..0.3), goal_yaw);
    let n = s.rng.gen_range(1..=5);
    let mut ids = Vec::new();
    let mut placed: Vec<(DVec3, f64)> = Vec::new();
    for _ in 0..n {
        let mut o = s.object(|_| true, false)?.fixed();
        let r = o.shape.horizontal_radius();
        let mut ok = false;
        for _ in 0..MAX_RETRIES {
            // bias obstacles towards the straight segment between start and goal
            let t = s.rng.gen_range(0.2..0.8);
            let base = start.position.lerp(goal.position, t);
            let c = base + DVec3::new(s.rng.gen_range(-0.1..0.1), s.rng.gen_range(-0.12..0.12), s.rng.gen_range(-0.06..0.06));
            if c.z - o.shape.vertical_half_extent(o.pose.orientation) < 0.03 {
                continue;
            }
            let clear = placed.iter().all(|(p, rr)| p.distance(c) >= r + rr + 0.06)
                && c.distance(start.position) >= r + 0.08
                && c.distance(goal.position) >= r + 0.08;
            if clear {
                o.pose.position = c;
                placed.push((c, r));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(s.err("no room for obstacle"));
        }
        ids.push(o.id.clone());
        s.objects.push(o);
    }
    b.ee = Some(start);
    b.keystep_scenes.push((Vec::new(), Some(goal)));
    b.prompt = Prompt::default().t("Match the pose of the end effector in ").k(0).t(" without hitting any objects.");
    b.predicate = Some(Predicate::set(vec![
        Predicate::EEAtPose { target: goal, tol: AT_TOLERANCE },
        Predicate::NotTouching { obstacles: ids },
    ]));
    Ok(())
}

/// Reference to an object by image or by its (unique) texture.
fn refer(p: Prompt, s: &Sampler, id: &str, by_texture: bool) -> Prompt {
    if by_texture {
        p.t("object with ").x(&s.get(id).texture.clone()).t(" texture")
    } else {
        p.o(id)
    }
}

fn pick(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let by_tex = s.coin();
    let target = s.object(|_| true, by_tex)?;
    let id = s.place(target, TABLE)?;
    s.distractors(0, 3, TABLE, |_| true)?;
    let verb = ["Pick up", "Grab", "Lift"][s.rng.gen_range(0..3)];
    let p = Prompt::default().t(verb).t(" the ");
    b.prompt = refer(p, s, &id, by_tex).t(".");
    b.predicate = Some(Predicate::Grasped { obj: id });
    Ok(())
}

fn held_pose(s: &mut Sampler, o: &WorldObject) -> (Pose, Pose) {
    let xy = Rect::new([-0.3, -0.3], [0.3, 0.3]).sample(&mut s.rng);
    let ee = Pose::from_xyz_yaw(xy.x, xy.y, 0.32, 0.0);
    let hh = o.half_height();
    let obj = Pose::new(ee.position - DVec3::Z * hh, o.pose.orientation);
    (ee, obj)
}

fn place(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let by_tex = s.coin();
    let base = s.object(flat, by_tex)?;
    let base_id = s.place(base, TABLE)?;
    let mut held = s.object(|_| true, by_tex)?;
    let (ee, pose) = held_pose(s, &held);
    held.pose = pose;
    let held_id = held.id.clone();
    s.objects.push(held);
    s.distractors(0, 2, TABLE, |_| true)?;
    b.ee = Some(ee);
    b.attached = Some(held_id.clone());
    let p = refer(Prompt::default().t("Put "), s, &held_id, by_tex).t(" on ");
    b.prompt = refer(p, s, &base_id, by_tex).t(".");
    b.predicate = Some(on_top(&held_id, &base_id));
    Ok(())
}

fn seg_dist(p: DVec2, a: DVec2, b: DVec2) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.length_squared().max(1e-12)).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

fn push(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let by_tex = s.coin();
    let o1 = s.object(|_| true, by_tex)?;
    let o1 = s.place(o1, Rect::new([-0.3, -0.3], [0.3, 0.3]))?;
    let p1 = s.pose(&o1).xy();
    let o2 = s.object(|_| true, by_tex)?;
    let o2 = s.place_filtered(o2, TABLE, move |xy| (0.25..0.4).contains(&xy.distance(p1)))?;
    let p2 = s.pose(&o2).xy();
    let behind = p1 - (p2 - p1).normalize() * 0.12;
    s.distractors(0, 2, TABLE, move |xy| seg_dist(xy, behind, p2) > 0.12)?;
    let p = refer(Prompt::default().t("Push "), s, &o1, by_tex).t(" towards ");
    b.prompt = refer(p, s, &o2, by_tex).t(".");
    b.predicate = Some(Predicate::push_progress(&o1, &o2));
    Ok(())
}

fn rotate(s: &mut Sampler, b: &mut Built, restore: bool) -> Result<()> {
    let by_tex = !restore && s.coin();
    let o = s.object(is_box, by_tex)?;
    let id = s.place(o, TABLE)?;
    s.distractors(0, 2, TABLE, |_| true)?;
    let (a, d) = s.rotation();
    let p = refer(Prompt::default().t("Rotate "), s, &id, by_tex).t(&rotation_text(a, d));
    let rot = Predicate::rotated_by(&id, a, d);
    if restore {
        b.prompt = p.t(" and then restore");
        b.predicate = Some(Predicate::sequence(vec![rot, at_pose(&id, s.pose(&id))]));
    } else {
        b.prompt = p.t(".");
        b.predicate = Some(rot);
    }
    b.notes.insert("angle".into(), format!("{a}"));
    b.notes.insert("direction".into(), d.word().into());
    Ok(())
}

fn throw(s: &mut Sampler, b: &mut Built, topple: bool) -> Result<()> {
    let mut held = s.object(|_| true, false)?;
    let (ee, pose) = held_pose(s, &held);
    held.pose = pose;
    let held_id = held.id.clone();
    let start = ee.position.truncate();
    let tgt_filter = move |t: &TemplateDef| t.shape != ShapeKind::Sphere;
    let target = s.object(tgt_filter, false)?;
    let target = s.place_filtered(target, TABLE, move |xy| (0.45..0.75).contains(&xy.distance(start)))?;
    s.objects.push(held);
    let tp = s.pose(&target).xy();
    s.distractors(0, 2, TABLE, move |xy| seg_dist(xy, start, tp) > 0.15)?;
    b.ee = Some(ee);
    b.attached = Some(held_id.clone());
    let suffix = if topple { " falls over." } else { "." };
    b.prompt = if s.coin() {
        let p = Prompt::default().t("Throw ").o(&held_id).t(" to ").o(&target);
        if topple {
            p.t(" such that ").o(&target).t(suffix)
        } else {
            p.t(suffix)
        }
    } else {
        let p = Prompt::default().t("Hit ").o(&target).t(" with ").o(&held_id);
        if topple {
            p.t(" such that ").o(&target).t(suffix)
        } else {
            p.t(suffix)
        }
    };
    b.predicate = Some(Predicate::Hit { thrown: held_id, target, require_topple: topple });
    Ok(())
}

fn touch(s: &mut Sampler, b: &mut Built, mode: usize) -> Result<()> {
    let o = s.object(|_| true, false)?;
    let id = s.place(o, Rect::new([-0.3, -0.3], [0.3, 0.3]))?;
    let c = s.pose(&id).xy();
    // touch-push needs a clear lane on at least one side
    let clear = if mode == 1 { 0.25 } else { 0.0 };
    s.distractors(0, 3, TABLE, move |xy| xy.distance(c) > clear)?;
    if mode == 0 {
        b.prompt = Prompt::default().t("Touch ").o(&id).t(".");
        b.predicate = Some(Predicate::TouchedGently { obj: id, max_move: 0.03 });
    } else {
        b.prompt = Prompt::default().t("Touch and push ").o(&id).t(".");
        b.predicate = Some(Predicate::TouchPushed { obj: id, min_move: 0.10, forbid_topple: true });
    }
    Ok(())
}

fn touch_topple(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let n = s.rng.gen_range(1..=2);
    let mut ids = Vec::new();
    for _ in 0..n {
        let o = s.object(toppleable, false)?;
        let mut o = o;
        s.place_with(&mut o, Rect::new([-0.3, -0.3], [0.3, 0.3]), 0.12, |_| true)?;
        ids.push(o.id.clone());
        s.objects.push(o);
    }
    let mut p = Prompt::default().t("Touch and topple ");
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            p = p.t(", ");
        }
        p = p.o(id);
    }
    s.distractors(0, 2, TABLE, |_| true)?;
    b.prompt = p.t(".");
    b.predicate = Some(Predicate::set(ids.iter().map(|id| Predicate::Touch { obj: id.clone(), mode: TouchMode::Topple }).collect()));
    Ok(())
}

fn trace(s: &mut Sampler, b: &mut Built) -> Result<()> {
    s.distractors(0, 2, TABLE, |_| true)?;
    let n = s.rng.gen_range(2..=5);
    let min_z = highest_top(s) + 0.06;
    let mut goals: Vec<[f64; 3]> = Vec::new();
    for _ in 0..MAX_RETRIES {
        if goals.len() == n {
            break;
        }
        let g = DVec3::new(s.rng.gen_range(-0.35..0.35), s.rng.gen_range(-0.35..0.35), s.rng.gen_range(min_z..min_z + 0.25));
        if goals.iter().all(|p| DVec3::from_array(*p).distance(g) > 0.12) {
            goals.push(g.to_array());
        }
    }
    if goals.len() < n {
        return Err(s.err("could not space trace goals"));
    }
    b.goals = goals;
    b.prompt = Prompt::default().t("Trace the sequence of goals by moving to the next green goal.");
    b.predicate = Some(Predicate::TraceGoals { count: n });
    Ok(())
}

fn simple_manipulation(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let by_tex = s.coin();
    let o1 = s.object(|_| true, by_tex)?;
    let o1 = s.place(o1, TABLE)?;
    let o2 = s.object(flat, by_tex)?;
    let o2 = s.place(o2, TABLE)?;
    s.distractors(0, 2, TABLE, |_| true)?;
    let p = refer(Prompt::default().t("Put "), s, &o1, by_tex).t(" on ");
    b.prompt = refer(p, s, &o2, by_tex).t(".");
    b.predicate = Some(on_top(&o1, &o2));
    Ok(())
}

fn follow_order(s: &mut Sampler, b: &mut Built, restore: bool) -> Result<()> {
    let o = s.object(|_| true, false)?;
    let id = s.place(o, TABLE)?;
    s.distractors(0, 2, TABLE, |_| true)?;
    let n = s.rng.gen_range(1..=3);
    let start = s.pose(&id);
    let mut goals: Vec<Pose> = Vec::new();
    for _ in 0..n {
        let avoid: Vec<(DVec2, f64)> = goals.iter().map(|g| (g.xy(), plan_radius(s.get(&id)))).collect();
        let g = s.free_pose(&id, TABLE, &avoid, true)?;
        goals.push(g);
    }
    let mut p = Prompt::default().t("Follow the motion for ").o(&id).t(": ");
    for (i, g) in goals.iter().enumerate() {
        if i > 0 {
            p = p.t(", ");
        }
        p = p.k(i);
        b.keystep_scenes.push((vec![(id.clone(), *g)], None));
    }
    let mut seq: Vec<Predicate> = goals.iter().map(|g| at_pose(&id, *g)).collect();
    if restore {
        seq.push(at_pose(&id, start));
        p = p.t(" and then restore.");
    } else {
        p = p.t(".");
    }
    b.prompt = p;
    b.predicate = Some(Predicate::sequence(seq));
    Ok(())
}

fn neighbour(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let small = |t: &TemplateDef| t.x[1] <= 0.075 && t.y.is_none_or(|y| y[1] <= 0.06) && t.z.is_none_or(|z| z[1] <= 0.085);
    let origin = DVec2::new(s.rng.gen_range(-0.38..-0.3), s.rng.gen_range(-0.25..-0.05));
    let mut cells: Vec<(i32, i32)> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let n = s.rng.gen_range(4..=6);
    loop {
        cells.shuffle(&mut s.rng);
        let used = &cells[..n];
        let adjacent = used.iter().any(|&(i, j)| used.iter().any(|&(a, b)| (a - i).abs() + (b - j).abs() == 1));
        if adjacent {
            break;
        }
    }
    let mut layout = GridLayout { origin: origin.to_array(), spacing: GRID_SPACING, cells: Vec::new() };
    for &(i, j) in cells.iter().take(n) {
        let mut o = s.object(small, false)?;
        let xy = origin + DVec2::new(i as f64, j as f64) * GRID_SPACING;
        o.pose.position.x = xy.x;
        o.pose.position.y = xy.y;
        layout.cells.push(((i, j), o.id.clone()));
        s.objects.push(o);
    }
    layout.cells.sort();
    let mut options = Vec::new();
    for ((_, id), dir) in layout.cells.iter().flat_map(|c| Compass::ALL.iter().map(move |d| (c, *d))) {
        if let Some(nb) = neighbour_of(&layout, id, dir) {
            options.push((id.clone(), dir, nb));
        }
    }
    let (first, dir, nb) = options.choose(&mut s.rng).cloned().ok_or_else(|| s.err("grid has no neighbours"))?;
    let tex = s.texture(false)?;
    let mut container = fixture("container0", ObjectKind::Container, [0.08, 0.12, 0.05], DVec2::ZERO, 0.05, &tex, "container");
    s.place_with(&mut container, Rect::new([0.22, -0.25], [0.36, 0.25]), MARGIN, |_| true)?;
    s.objects.push(container);
    b.prompt = Prompt::default()
        .t("First put ")
        .o(&first)
        .t(" in ")
        .o("container0")
        .t(" and then put the object that was at its ")
        .t(dir.word())
        .t(" in the same ")
        .o("container0");
    b.notes.insert("direction".into(), dir.word().into());
    b.notes.insert("neighbour".into(), nb.clone());
    b.grid = Some(layout);
    b.predicate = Some(Predicate::sequence(vec![
        Predicate::Inside { obj: first, container: "container0".into() },
        Predicate::Inside { obj: nb, container: "container0".into() },
    ]));
    Ok(())
}

fn exemplar(s: &mut Sampler, tpl: &TemplateDef, tex: &str, shape: Shape) -> String {
    let id = format!("prompt{}", s.prompt_objects.len());
    s.prompt_objects.push(WorldObject::new(&id, ObjectKind::Solid, shape, on_table(&shape, DVec2::ZERO, 0.0), &tpl.name, tex, DENSITY));
    id
}

/// Prompt-only pair grounding an adjective; returns (has-property id, other id).
fn grounding_exemplars(s: &mut Sampler, prop: Property, avoid: &str) -> Result<(String, String)> {
    let tpl = s.template(|t| t.flat() && t.name != avoid)?;
    let tex = s.texture(false)?;
    let shape = tpl.sample(&mut s.rng);
    let (a, b) = grounding_pair(shape, prop);
    Ok((exemplar(s, tpl, &tex, a), exemplar(s, tpl, &tex, b)))
}

/// Two scene objects of one template/texture differing by `prop`; returns (target, other).
fn scene_pair(s: &mut Sampler, prop: Property) -> Result<(String, String, &'static TemplateDef, String)> {
    let tpl = s.template(|t| t.flat() && t.x[1] <= 0.06)?;
    let tex = s.texture(true)?;
    let shape = tpl.sample(&mut s.rng);
    let (a, b) = grounding_pair(shape, prop);
    let oa = s.make(tpl, &tex, Some(a));
    let ob = s.make(tpl, &tex, Some(b));
    let ia = s.place(oa, TABLE)?;
    let ib = s.place(ob, TABLE)?;
    Ok((ia, ib, tpl, tex))
}

fn novel_adj(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let (word, prop) = novel_adjective(&mut s.rng);
    let (target, _, tpl, tex) = scene_pair(s, prop)?;
    let base = s.object(wide_base, true)?;
    let base = s.place(base, TABLE)?;
    s.distractors(0, 1, TABLE, |_| true)?;
    let (e1, e2) = grounding_exemplars(s, prop, &tpl.name)?;
    let canon = tpl.sample(&mut s.rng);
    let shown = exemplar(s, tpl, &tex, canon);
    b.prompt = Prompt::default()
        .o(&e1)
        .t(&format!(" is {word} than "))
        .o(&e2)
        .t(&format!(". Put the {word} "))
        .o(&shown)
        .t(" on ")
        .o(&base)
        .t(".");
    b.notes.insert("adjective".into(), word.into());
    b.notes.insert("meaning".into(), format!("{prop:?}").to_lowercase());
    b.predicate = Some(on_top(&target, &base));
    Ok(())
}

fn two_nouns(s: &mut Sampler) -> (&'static str, &'static str) {
    let mut v = NOUNS.to_vec();
    v.shuffle(&mut s.rng);
    (v[0], v[1])
}

fn novel_noun_task(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let (n1, n2) = two_nouns(s);
    let o1 = s.object(|_| true, false)?;
    let o1 = s.place(o1, TABLE)?;
    let o2 = s.object(wide_base, false)?;
    let o2 = s.place(o2, TABLE)?;
    s.distractors(1, 2, TABLE, |_| true)?;
    b.prompt = Prompt::default().o(&o1).t(&format!(" is {n1} and ")).o(&o2).t(&format!(" is {n2}. Put {n1} on {n2}."));
    b.notes.insert("nouns".into(), format!("{n1},{n2}"));
    b.predicate = Some(on_top(&o1, &o2));
    Ok(())
}

fn novel_adj_noun(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let (n1, n2) = two_nouns(s);
    let (word, prop) = novel_adjective(&mut s.rng);
    let (target, _, tpl, tex) = scene_pair(s, prop)?;
    let base = s.object(wide_base, true)?;
    let base = s.place(base, TABLE)?;
    s.distractors(0, 1, TABLE, |_| true)?;
    let canon = tpl.sample(&mut s.rng);
    let shown = exemplar(s, tpl, &tex, canon);
    let (e3, e4) = grounding_exemplars(s, prop, &tpl.name)?;
    let (e5, e6) = grounding_exemplars(s, prop, &tpl.name)?;
    b.prompt = Prompt::default()
        .t(&format!("This is a {n1} "))
        .o(&shown)
        .t(&format!(". This is a {n2} "))
        .o(&base)
        .t(". ")
        .o(&e3)
        .t(&format!(" is {word} than "))
        .o(&e4)
        .t(", ")
        .o(&e5)
        .t(&format!(" is {word} than "))
        .o(&e6)
        .t(&format!(". Put the {word} {n1} on {n2}."));
    b.notes.insert("adjective".into(), word.into());
    b.notes.insert("meaning".into(), format!("{prop:?}").to_lowercase());
    b.notes.insert("nouns".into(), format!("{n1},{n2}"));
    b.predicate = Some(on_top(&target, &base));
    Ok(())
}

fn rearrange(s: &mut Sampler, b: &mut Built, restore: bool) -> Result<()> {
    let n = s.rng.gen_range(2..=4);
    let mut ids = Vec::new();
    for _ in 0..n {
        let o = s.object(|_| true, false)?;
        ids.push(s.place(o, TABLE)?);
    }
    let moved = s.rng.gen_range(1..=n.min(3));
    let mut order = ids.clone();
    order.shuffle(&mut s.rng);
    let mut targets: BTreeMap<String, Pose> = ids.iter().map(|id| (id.clone(), s.pose(id))).collect();
    let mut avoid: Vec<(DVec2, f64)> = Vec::new();
    for id in order.iter().take(moved) {
        let g = s.free_pose(id, TABLE, &avoid, true)?;
        avoid.push((g.xy(), plan_radius(s.get(id))));
        targets.insert(id.clone(), g);
    }
    b.keystep_scenes.push((targets.iter().map(|(k, v)| (k.clone(), *v)).collect(), None));
    let goal = Predicate::set(ids.iter().map(|id| at_pose(id, targets[id])).collect());
    if restore {
        let back = Predicate::set(order.iter().take(moved).map(|id| at_pose(id, s.pose(id))).collect());
        b.prompt = Prompt::default().t("Rearrange to ").scene().t(" and then restore.");
        b.predicate = Some(Predicate::sequence(vec![goal, back]));
    } else {
        b.prompt = Prompt::default().t("Rearrange to ").scene().t(".");
        b.predicate = Some(goal);
    }
    Ok(())
}

fn rotate_symmetry(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let tex = s.texture(true)?;
    let n = s.rng.gen_range(2..=3);
    let mut ids = Vec::new();
    for _ in 0..n {
        let tpl = s.template(is_box)?;
        let o = s.make(tpl, &tex, None);
        ids.push(s.place(o, TABLE)?);
    }
    s.distractors(1, 2, TABLE, |_| true)?;
    let (a, d) = s.rotation();
    b.prompt = if s.coin() {
        Prompt::default().t("Rotate objects with ").x(&tex).t(" texture").t(&rotation_text(a, d))
    } else {
        Prompt::default().t("Rotate identically textured objects").t(&rotation_text(a, d))
    };
    b.predicate = Some(Predicate::set(ids.iter().map(|id| Predicate::rotated_by(id, a, d)).collect()));
    Ok(())
}

fn stack(s: &mut Sampler, b: &mut Built, topple: bool) -> Result<()> {
    let by_tex = s.coin();
    let top_ok = move |t: &TemplateDef| !topple || toppleable(t);
    let o2 = s.object(flat, by_tex)?;
    let o2 = s.place(o2, TABLE)?;
    let o1 = s.object(flat, by_tex)?;
    let o1 = s.place(o1, TABLE)?;
    let o3 = s.object(top_ok, by_tex)?;
    let o3 = s.place(o3, TABLE)?;
    s.distractors(0, 1, TABLE, |_| true)?;
    let mut p = refer(Prompt::default().t("Stack "), s, &o1, by_tex).t(" on ");
    p = refer(p, s, &o2, by_tex).t(if by_tex { ", " } else { ", and " });
    p = refer(p, s, &o3, by_tex).t(" on ");
    p = refer(p, s, &o1, by_tex);
    let mut seq = vec![on_top(&o1, &o2), on_top(&o3, &o1)];
    if topple {
        p = p.t(" and then topple the stack");
        seq.push(Predicate::ToppleStructure { objs: vec![o2.clone(), o1.clone(), o3.clone()] });
    }
    b.prompt = p;
    b.predicate = Some(Predicate::sequence(seq));
    Ok(())
}

fn stack_reversed(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let n = s.rng.gen_range(3..=4);
    let mut ids = Vec::new();
    for k in 0..n {
        let o = if k == 0 { s.object(|_| true, false)? } else { s.object(flat, false)? };
        ids.push(s.place(o, TABLE)?);
    }
    let mut p = Prompt::default().t("Stack ");
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            p = p.t(", ");
        }
        p = p.o(id);
    }
    b.prompt = p.t(" in the reversed order");
    // the last listed object ends up at the bottom
    let seq = (0..n - 1).rev().map(|i| on_top(&ids[i], &ids[i + 1])).collect();
    b.predicate = Some(Predicate::sequence(seq));
    Ok(())
}

fn areas_and_objects(s: &mut Sampler, areas: &[(String, WorldObject)], per_area: (usize, usize), region: Rect) -> Result<Vec<Predicate>> {
    let mut preds = Vec::new();
    for (tex, area) in areas {
        let k = s.rng.gen_range(per_area.0..=per_area.1);
        for _ in 0..k {
            let o = s.object_with_texture(|t| t.x[1] <= 0.065, tex)?;
            let id = s.place(o, region)?;
            preds.push(Predicate::Inside { obj: id, container: area.id.clone() });
        }
    }
    Ok(preds)
}

fn sort(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let n = s.rng.gen_range(2..=3);
    let mut areas = Vec::new();
    for k in 0..n {
        let tex = s.texture(true)?;
        let mut a = fixture(&format!("area{k}"), ObjectKind::Area, [0.09, 0.09, 0.001], DVec2::ZERO, 0.001, &tex, "area");
        s.place_with(&mut a, TABLE, MARGIN, |_| true)?;
        s.objects.push(a.clone());
        areas.push((tex, a));
    }
    let preds = areas_and_objects(s, &areas, (1, if n == 2 { 2 } else { 1 }), TABLE)?;
    b.prompt = Prompt::default().t("Place the objects in the identically textured areas");
    b.predicate = Some(Predicate::set(preds));
    Ok(())
}

#[derive(PartialEq, Clone, Copy)]
enum SwapKind {
    Plain,
    Push,
    Rotate,
}

fn swap(s: &mut Sampler, b: &mut Built, kind: SwapKind) -> Result<()> {
    let filter = move |t: &TemplateDef| match kind {
        SwapKind::Plain => true,
        SwapKind::Push => round(t) && t.x[1] <= 0.06,
        SwapKind::Rotate => is_box(t),
    };
    let inner = Rect::new([-0.25, -0.25], [0.25, 0.25]);
    let o1 = s.object(filter, false)?;
    let o1 = s.place(o1, inner)?;
    let p1 = s.pose(&o1);
    let o2 = s.object(filter, false)?;
    let (lo, hi) = if kind == SwapKind::Push { (0.2, 0.3) } else { (0.15, 0.35) };
    let o2 = s.place_filtered(o2, inner, move |xy| (lo..hi).contains(&xy.distance(p1.xy())))?;
    let p2 = s.pose(&o2);
    // both swapped objects need room at either position
    let r = plan_radius(s.get(&o1)).max(plan_radius(s.get(&o2)));
    let keep = if kind == SwapKind::Push { 0.25 } else { r + 0.05 };
    s.distractors(0, if kind == SwapKind::Push { 1 } else { 2 }, TABLE, move |xy| {
        seg_dist(xy, p1.xy(), p2.xy()) > keep + 0.05
    })?;
    let t1 = Pose::new(DVec3::new(p2.position.x, p2.position.y, p1.position.z), p1.orientation);
    let t2 = Pose::new(DVec3::new(p1.position.x, p1.position.y, p2.position.z), p2.orientation);
    let mut p = Prompt::default().t("Swap positions of ").o(&o1).t(" and ").o(&o2);
    let preds = match kind {
        SwapKind::Plain => {
            p = p.t(".");
            vec![at_pos(&o1, &t1), at_pos(&o2, &t2)]
        }
        SwapKind::Push => {
            p = p.t(" by pushing");
            vec![at_pos(&o1, &t1), at_pos(&o2, &t2), Predicate::NeverGrasped { objs: vec![o1.clone(), o2.clone()] }]
        }
        SwapKind::Rotate => {
            let (a, d) = s.rotation();
            p = p.t(" but rotate them by").t(&rotation_text(a, d));
            let turn = |pose: Pose| {
                Pose::from_xyz_yaw(pose.position.x, pose.position.y, pose.position.z, pose.yaw() + d.sign() * a.to_radians())
            };
            vec![at_pose(&o1, turn(t1)), at_pose(&o2, turn(t2))]
        }
    };
    b.prompt = p;
    b.predicate = Some(Predicate::set(preds));
    Ok(())
}

fn balance(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let mut units = Vec::new();
    for _ in 0..MAX_RETRIES {
        let n = s.rng.gen_range(3..=5);
        let u: Vec<u32> = (0..n).map(|_| s.rng.gen_range(1..=3)).collect();
        let m: Vec<f64> = u.iter().map(|&k| k as f64).collect();
        if let Some((l, r)) = balance_partition(&m) {
            if l.len() <= 4 && r.len() <= 4 {
                units = u;
                break;
            }
        }
    }
    if units.is_empty() {
        return Err(s.err("no balanced mass set"));
    }
    let pivot = [0.0, 0.25, 0.0];
    let arm = 0.25;
    let tex = s.texture(false)?;
    for (id, x) in [("pan_left", -arm), ("pan_right", arm)] {
        s.objects.push(fixture(id, ObjectKind::Area, [0.12, 0.12, 0.01], DVec2::new(x, pivot[1]), 0.01, &tex, "pan"));
    }
    let region = Rect::new([-0.4, -0.42], [0.4, 0.02]);
    let mut ids = Vec::new();
    for k in &units {
        let tpl = s.template(is_box)?;
        let tex = s.texture(false)?;
        let side = 0.05 * (*k as f64).sqrt();
        let shape = Shape::cuboid(side / 2.0, side / 2.0, 0.03);
        let o = s.make(tpl, &tex, Some(shape));
        ids.push(s.place(o, region)?);
    }
    b.scale = Some(ScaleSpec { pivot, arm, left_pan: "pan_left".into(), right_pan: "pan_right".into() });
    b.notes.insert("mass_units".into(), units.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(","));
    b.prompt = Prompt::default().t("Place all the objects on the scale while keeping it in balance");
    b.predicate = Some(Predicate::Balanced { objs: ids, tilt_tol: BALANCE_TOLERANCE });
    Ok(())
}

fn footprint_area(o: &WorldObject) -> f64 {
    match o.shape {
        Shape::OrientedBox { half_extents: [x, y, _] } => 4.0 * x * y,
        Shape::Disc { radius, .. } | Shape::Sphere { radius } => std::f64::consts::PI * radius * radius,
    }
}

fn sort_stack(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let n = s.rng.gen_range(2..=3);
    let mut preds = Vec::new();
    for _ in 0..n {
        let tex = s.texture(true)?;
        let a = s.object_with_texture(flat, &tex)?;
        let a = s.place(a, TABLE)?;
        let c = s.object_with_texture(|_| true, &tex)?;
        let c = s.place(c, TABLE)?;
        let (top, base) = if s.get(&c).template == "ball" || footprint_area(s.get(&c)) <= footprint_area(s.get(&a)) || !flat_obj(s.get(&c)) {
            (c, a)
        } else {
            (a, c)
        };
        preds.push(on_top(&top, &base));
    }
    b.prompt = if s.coin() {
        Prompt::default().t("Stack identically textured objects")
    } else {
        Prompt::default().t("Place identically textured objects on top of each other")
    };
    b.predicate = Some(Predicate::set(preds));
    Ok(())
}

fn flat_obj(o: &WorldObject) -> bool {
    !matches!(o.shape, Shape::Sphere { .. })
}

fn throw_sort(s: &mut Sampler, b: &mut Built) -> Result<()> {
    let mut sides = vec![(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
    sides.shuffle(&mut s.rng);
    let mut areas = Vec::new();
    for (k, (sx, sy)) in sides.into_iter().take(2).enumerate() {
        let tex = s.texture(true)?;
        let lateral = s.rng.gen_range(-0.2..0.2);
        let xy = if sx != 0.0 { DVec2::new(0.82 * sx, lateral) } else { DVec2::new(lateral, 0.82 * sy) };
        let a = fixture(&format!("area{k}"), ObjectKind::Area, [0.13, 0.13, 0.001], xy, 0.001, &tex, "area");
        s.objects.push(a.clone());
        areas.push((tex, a));
    }
    let preds = areas_and_objects(s, &areas, (1, 2), Rect::new([-0.3, -0.3], [0.3, 0.3]))?;
    b.prompt = Prompt::default().t("Place the objects in the identically textured areas by throwing");
    b.predicate = Some(Predicate::set(preds));
    Ok(())
}
