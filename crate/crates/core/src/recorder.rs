//! Episode records: tensors, frames, boxes, annotations and their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Camera;
use crate::predicates::{Predicate, PredicateTree, TouchMode};
use crate::render::{BoundingBox, Image};
use crate::solvers::Phase;
use crate::tasks::{describe_object, RenderedPrompt, RenderedSegment};
use crate::world::WorldState;

pub const MAGIC: &[u8; 4] = b"CSKT";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// Dense row-major tensor in the CSKT container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(dims: Vec<u32>, data: Vec<f32>) -> Self {
        Tensor { dims, data: TensorData::F32(data) }
    }

    pub fn u8(dims: Vec<u32>, data: Vec<u8>) -> Self {
        Tensor { dims, data: TensorData::U8(data) }
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (code, size) = match self.data {
            TensorData::F32(_) => (0u8, 4),
            TensorData::U8(_) => (1u8, 1),
        };
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + size * self.len());
        out.extend_from_slice(MAGIC);
        out.push(code);
        out.push(self.dims.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8], file: &str) -> Result<Tensor> {
        let perr = |offset: usize, msg: &str| Error::Parse { file: file.into(), offset, msg: msg.into() };
        if bytes.len() < 8 {
            return Err(perr(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(perr(0, "bad magic"));
        }
        let size = match bytes[4] {
            0 => 4,
            1 => 1,
            _ => return Err(perr(4, "unknown dtype code")),
        };
        let rank = bytes[5] as usize;
        if bytes[6] != 0 || bytes[7] != 0 {
            return Err(perr(6, "reserved bytes not zero"));
        }
        let body = 8 + 4 * rank;
        if bytes.len() < body {
            return Err(perr(bytes.len(), "truncated dimensions"));
        }
        let dims: Vec<u32> = bytes[8..body].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize));
        let want = count.and_then(|c| c.checked_mul(size)).ok_or_else(|| perr(8, "dimensions overflow"))?;
        let payload = &bytes[body..];
        if payload.len() != want {
            return Err(Error::Integrity {
                file: file.into(),
                msg: format!("payload has {} bytes, dims {dims:?} need {want}", payload.len()),
            });
        }
        let data = if size == 4 {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        } else {
            TensorData::U8(payload.to_vec())
        };
        Ok(Tensor { dims, data })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub task: String,
    pub level: String,
    pub seed: u64,
    pub split: String,
    pub prompt: RenderedPrompt,
    pub success: bool,
    pub length: usize,
    /// Skill solvers the acting policy reported using.
    #[serde(default)]
    pub solvers: Vec<String>,
}

/// Task, sub-task and step level descriptions of one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub task: String,
    pub subtask: String,
    pub step: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    pub actions: Vec<[f32; 7]>,
    pub rewards: Vec<f32>,
    pub success: Vec<u8>,
    pub cameras: Vec<Camera>,
    /// Frames per camera, parallel to `cameras`.
    pub frames: Vec<Vec<Image>>,
    pub boxes: Vec<Vec<BoundingBox>>,
    pub annotations: Vec<Annotation>,
    pub keysteps: Vec<usize>,
    pub keystep_images: Vec<Image>,
    pub prompt_assets: Vec<Image>,
}

#[derive(Serialize, Deserialize)]
struct BoxLine {
    index: usize,
    boxes: Vec<BoundingBox>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    index: usize,
    #[serde(flatten)]
    annotation: Annotation,
}

#[derive(Serialize, Deserialize)]
struct KeystepsFile {
    indices: Vec<usize>,
}

fn integrity(file: &str, msg: impl Into<String>) -> Error {
    Error::Integrity { file: file.into(), msg: msg.into() }
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Checks the record invariants, naming the file a violation would live in.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rewards.len() != n {
            return Err(integrity("rewards.cskt", format!("{} rewards for {n} actions", self.rewards.len())));
        }
        if self.success.len() != n {
            return Err(integrity("success.cskt", format!("{} flags for {n} actions", self.success.len())));
        }
        if self.success.iter().any(|&f| f > 1) || self.success.windows(2).any(|w| w[1] < w[0]) {
            return Err(integrity("success.cskt", "success flags are not a latched 0/1 sequence"));
        }
        let last = self.success.last().is_some_and(|&f| f == 1);
        if last != self.meta.success {
            return Err(integrity("meta.json", "success flag disagrees with success.cskt"));
        }
        if self.meta.length != n {
            return Err(integrity("meta.json", format!("length {} but {n} actions", self.meta.length)));
        }
        if self.frames.len() != self.cameras.len() {
            return Err(integrity("cameras.json", "frame streams and cameras differ in number"));
        }
        for (cam, frames) in self.cameras.iter().zip(&self.frames) {
            if frames.len() != n {
                return Err(integrity(&format!("frames/{}", cam.id.name()), format!("{} frames for {n} actions", frames.len())));
            }
        }
        if self.boxes.len() != n {
            return Err(integrity("boxes.jsonl", format!("{} lines for {n} actions", self.boxes.len())));
        }
        if self.annotations.len() != n {
            return Err(integrity("annotations.jsonl", format!("{} lines for {n} actions", self.annotations.len())));
        }
        if self.keysteps.iter().any(|&k| k >= n) {
            return Err(integrity("keysteps.json", "keystep index beyond episode end"));
        }
        if self.keysteps.len() != self.keystep_images.len() {
            return Err(integrity("keysteps.json", "keystep indices and images differ in number"));
        }
        let assets = prompt_asset_names(&self.meta.prompt);
        if assets.len() != self.prompt_assets.len() {
            return Err(integrity("meta.json", "prompt asset count mismatch"));
        }
        Ok(())
    }
}

/// Asset file names referenced by a rendered prompt, in order.
pub fn prompt_asset_names(p: &RenderedPrompt) -> Vec<String> {
    p.segments
        .iter()
        .filter_map(|s| match s {
            RenderedSegment::Image { asset } => Some(asset.clone()),
            RenderedSegment::Text { .. } => None,
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(&p, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record types serialize")
}

/// JSON parse error with a byte offset into `text`.
fn json_err(file: &str, text: &str, base: usize, e: serde_json::Error) -> Error {
    let line_start: usize = text.split_inclusive('\n').take(e.line().saturating_sub(1)).map(str::len).sum();
    Error::Parse { file: file.into(), offset: base + line_start + e.column().saturating_sub(1), msg: e.to_string() }
}

fn from_json<T: for<'de> Deserialize<'de>>(file: &str, text: &str, base: usize) -> Result<T> {
    serde_json::from_str(text).map_err(|e| json_err(file, text, base, e))
}

fn utf8(file: &str, bytes: Vec<u8>) -> Result<String> {
    String::from_utf8(bytes).map_err(|e| Error::Parse { file: file.into(), offset: e.utf8_error().valid_up_to(), msg: "invalid UTF-8".into() })
}

fn jsonl<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches('\n');
        if !body.is_empty() {
            out.push(from_json(file, body, offset)?);
        }
        offset += line.len();
    }
    Ok(out)
}

/// Writes `rec` under `dir` in the dataset layout.
pub fn write_episode(dir: &Path, rec: &EpisodeRecord) -> Result<()> {
    rec.validate()?;
    for sub in ["frames", "keysteps", "prompt_assets"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = rec.len() as u32;
    let mut meta = serde_json::to_string_pretty(&rec.meta).expect("meta serializes");
    meta.push('\n');
    write(&dir.join("meta.json"), meta.as_bytes())?;
    let flat: Vec<f32> = rec.actions.iter().flatten().copied().collect();
    write(&dir.join("actions.cskt"), &Tensor::f32(vec![n, 7], flat).encode())?;
    write(&dir.join("rewards.cskt"), &Tensor::f32(vec![n], rec.rewards.clone()).encode())?;
    write(&dir.join("success.cskt"), &Tensor::u8(vec![n], rec.success.clone()).encode())?;
    for (cam, frames) in rec.cameras.iter().zip(&rec.frames) {
        let d = dir.join("frames").join(cam.id.name());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, f) in frames.iter().enumerate() {
            write(&d.join(format!("{i:06}.ppm")), &f.to_ppm())?;
        }
    }
    let mut boxes = String::new();
    for (index, b) in rec.boxes.iter().enumerate() {
        boxes.push_str(&to_json(&BoxLine { index, boxes: b.clone() }));
        boxes.push('\n');
    }
    write(&dir.join("boxes.jsonl"), boxes.as_bytes())?;
    let mut ann = String::new();
    for (index, a) in rec.annotations.iter().enumerate() {
        ann.push_str(&to_json(&AnnotationLine { index, annotation: a.clone() }));
        ann.push('\n');
    }
    write(&dir.join("annotations.jsonl"), ann.as_bytes())?;
    write(&dir.join("keysteps.json"), format!("{}\n", to_json(&KeystepsFile { indices: rec.keysteps.clone() })).as_bytes())?;
    let kd = dir.join("keysteps");
    fs::create_dir_all(&kd).map_err(|e| Error::io(&kd, e))?;
    for (k, img) in rec.keystep_images.iter().enumerate() {
        write(&kd.join(format!("{k:02}.ppm")), &img.to_ppm())?;
    }
    let pd = dir.join("prompt_assets");
    fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
    for (name, img) in prompt_asset_names(&rec.meta.prompt).iter().zip(&rec.prompt_assets) {
        write(&dir.join(name), &img.to_ppm())?;
    }
    write(&dir.join("cameras.json"), format!("{}\n", to_json(&rec.cameras)).as_bytes())?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<EpisodeMeta> {
    from_json("meta.json", &utf8("meta.json", read(dir, "meta.json")?)?, 0)
}

/// The N×7 action matrix alone.
pub fn read_actions(dir: &Path) -> Result<Vec<[f32; 7]>> {
    let t = Tensor::decode(&read(dir, "actions.cskt")?, "actions.cskt")?;
    match (&t.data, t.dims.as_slice()) {
        (TensorData::F32(v), [_, 7]) => Ok(v.chunks_exact(7).map(|c| c.try_into().expect("rows of 7")).collect()),
        _ => Err(integrity("actions.cskt", format!("expected float32 [N,7], got dims {:?}", t.dims))),
    }
}

fn read_vector_f32(dir: &Path, name: &str) -> Result<Vec<f32>> {
    let t = Tensor::decode(&read(dir, name)?, name)?;
    match (t.data, t.dims.len()) {
        (TensorData::F32(v), 1) => Ok(v),
        _ => Err(integrity(name, "expected a float32 vector")),
    }
}

fn read_vector_u8(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let t = Tensor::decode(&read(dir, name)?, name)?;
    match (t.data, t.dims.len()) {
        (TensorData::U8(v), 1) => Ok(v),
        _ => Err(integrity(name, "expected a u8 vector")),
    }
}

fn read_image(dir: &Path, name: &str) -> Result<Image> {
    Image::from_ppm(&read(dir, name)?, name)
}

/// Reads a numbered image sequence, requiring exactly `0..n`.
fn read_sequence(dir: &Path, sub: &str, width: usize, n: usize) -> Result<Vec<Image>> {
    let d = dir.join(sub);
    let count = match fs::read_dir(&d) {
        Ok(it) => it.count(),
        Err(_) if n == 0 => 0,
        Err(e) => return Err(Error::io(&d, e)),
    };
    if count != n {
        return Err(integrity(sub, format!("{count} files, expected {n}")));
    }
    (0..n).map(|i| read_image(dir, &format!("{sub}/{i:0width$}.ppm"))).collect()
}

/// Reads and validates an episode directory.
pub fn read_episode(dir: &Path) -> Result<EpisodeRecord> {
    let meta = read_meta(dir)?;
    let actions = read_actions(dir)?;
    let rewards = read_vector_f32(dir, "rewards.cskt")?;
    let success = read_vector_u8(dir, "success.cskt")?;
    let n = actions.len();
    let cameras: Vec<Camera> = from_json("cameras.json", &utf8("cameras.json", read(dir, "cameras.json")?)?, 0)?;
    let mut frames = Vec::new();
    for cam in &cameras {
        frames.push(read_sequence(dir, &format!("frames/{}", cam.id.name()), 6, n)?);
    }
    let lines: Vec<BoxLine> = jsonl("boxes.jsonl", &utf8("boxes.jsonl", read(dir, "boxes.jsonl")?)?)?;
    if lines.iter().enumerate().any(|(i, l)| l.index != i) {
        return Err(integrity("boxes.jsonl", "line indices out of order"));
    }
    let ann: Vec<AnnotationLine> = jsonl("annotations.jsonl", &utf8("annotations.jsonl", read(dir, "annotations.jsonl")?)?)?;
    if ann.iter().enumerate().any(|(i, l)| l.index != i) {
        return Err(integrity("annotations.jsonl", "line indices out of order"));
    }
    let ks: KeystepsFile = from_json("keysteps.json", &utf8("keysteps.json", read(dir, "keysteps.json")?)?, 0)?;
    let keystep_images = read_sequence(dir, "keysteps", 2, ks.indices.len())?;
    let names = prompt_asset_names(&meta.prompt);
    let pd = dir.join("prompt_assets");
    let count = fs::read_dir(&pd).map(|it| it.count()).unwrap_or(0);
    if count != names.len() {
        return Err(integrity("prompt_assets", format!("{count} files, expected {}", names.len())));
    }
    let prompt_assets = names.iter().map(|name| read_image(dir, name)).collect::<Result<Vec<_>>>()?;
    let rec = EpisodeRecord {
        meta,
        actions,
        rewards,
        success,
        cameras,
        frames,
        boxes: lines.into_iter().map(|l| l.boxes).collect(),
        annotations: ann.into_iter().map(|l| l.annotation).collect(),
        keysteps: ks.indices,
        keystep_images,
        prompt_assets,
    };
    rec.validate()?;
    Ok(rec)
}

/// Episode directories (those holding a meta.json) under `root`, sorted.
pub fn find_episodes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join("meta.json").is_file() {
            out.push(d);
            continue;
        }
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn name(state: &WorldState, i: usize) -> String {
    describe_object(&state.objects[i])
}

/// Sub-task description of predicate node `node`.
///
/// Nodes sharing a description are numbered in tree order, so the text
/// changes whenever the active node does.
pub fn subtask_text(tree: &PredicateTree, node: usize, state: &WorldState) -> String {
    let base = base_subtask(tree, node, state);
    let same: Vec<usize> = (0..tree.nodes.len()).filter(|&j| j == node || base_subtask(tree, j, state) == base).collect();
    if same.len() < 2 {
        return base;
    }
    let k = same.iter().position(|&j| j == node).expect("node listed") + 1;
    format!("{base} (goal {k} of {})", same.len())
}

fn base_subtask(tree: &PredicateTree, node: usize, state: &WorldState) -> String {
    let n = &tree.nodes[node];
    let o = |k: usize| n.objects.get(k).map_or_else(String::new, |&i| name(state, i));
    match &n.pred {
        Predicate::EEAtPos { .. } | Predicate::EEAtPose { .. } => "move the gripper to the goal pose".into(),
        Predicate::AtPos { .. } => format!("move {} to its goal position", o(0)),
        Predicate::AtPose { .. } => format!("put {} in its goal pose", o(0)),
        Predicate::OnTop { .. } => format!("put {} on {}", o(0), o(1)),
        Predicate::Inside { .. } => format!("put {} in {}", o(0), o(1)),
        Predicate::Touch { mode: TouchMode::Gentle, .. } | Predicate::TouchedGently { .. } => format!("touch {}", o(0)),
        Predicate::Touch { mode: TouchMode::Push, .. } | Predicate::TouchPushed { .. } => format!("push {}", o(0)),
        Predicate::Touch { mode: TouchMode::Topple, .. } => format!("topple {}", o(0)),
        Predicate::Hit { .. } => format!("throw {} at {}", o(0), o(1)),
        Predicate::ToppleStructure { .. } => "topple the structure".into(),
        Predicate::Grasped { .. } => format!("pick up {}", o(0)),
        Predicate::PushProgress { .. } => format!("push {} towards {}", o(0), o(1)),
        Predicate::RotatedBy { angle_deg, direction, .. } => format!("rotate {} {angle_deg} degrees {}", o(0), direction.word()),
        Predicate::Balanced { .. } => "balance the scale".into(),
        Predicate::TraceGoals { .. } => "trace the goal positions".into(),
        Predicate::NotTouching { .. } => "avoid the obstacles".into(),
        Predicate::NeverGrasped { .. } => "do not grasp the objects".into(),
        Predicate::Set { .. } | Predicate::Sequence { .. } | Predicate::Once { .. } => "complete the task".into(),
    }
}

/// Step-level description of a solver phase.
pub fn step_text(phase: Phase, state: &WorldState) -> String {
    match phase {
        Phase::Idle => "idle".into(),
        Phase::Moving => "moving to the goal".into(),
        Phase::Approaching(i) => format!("moving towards {}", name(state, i)),
        Phase::Grasping(_) => "closing gripper".into(),
        Phase::Lifting(i) => format!("lifting {}", name(state, i)),
        Phase::Carrying(i) => format!("carrying {}", name(state, i)),
        Phase::Releasing(_) => "releasing".into(),
        Phase::Retreating => "moving away".into(),
        Phase::Pushing(i) => format!("pushing {}", name(state, i)),
        Phase::Sweeping(i) => format!("sweeping into {}", name(state, i)),
        Phase::Throwing(i) => format!("throwing {}", name(state, i)),
        Phase::Touching(i) => format!("touching {}", name(state, i)),
        Phase::Waiting => "waiting".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn actions_header_bytes() {
        let t = Tensor::f32(vec![100, 7], vec![0.0; 700]);
        let b = t.encode();
        assert_eq!(&b[..16], &[b'C', b'S', b'K', b'T', 0, 2, 0, 0, 100, 0, 0, 0, 7, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 2800);
        assert_eq!(Tensor::decode(&b, "a").unwrap(), t);
    }

    #[test]
    fn malformed_tensors() {
        let b = Tensor::u8(vec![3], vec![1, 2, 3]).encode();
        assert!(matches!(Tensor::decode(&b[..b.len() - 1], "s"), Err(Error::Integrity { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad, "s"), Err(Error::Parse { offset: 0, .. })));
        let mut bad = b.clone();
        bad[4] = 7;
        assert!(matches!(Tensor::decode(&bad, "s"), Err(Error::Parse { offset: 4, .. })));
        assert!(matches!(Tensor::decode(&b[..10], "s"), Err(Error::Parse { offset: 10, .. })));
    }

    #[test]
    fn json_offsets_point_into_file() {
        let text = "{\"a\": 1,\n \"b\": x}";
        let e = from_json::<serde_json::Value>("f.json", text, 0).unwrap_err();
        let Error::Parse { offset, .. } = e else { panic!() };
        assert_eq!(&text[offset..offset + 1], "x");
    }
}
