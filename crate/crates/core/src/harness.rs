//! Policy evaluation, dataset generation and the subprocess policy protocol.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::geom::{Camera, CameraId};
use crate::predicates::PredicateTree;
use crate::recorder::{self, subtask_text, step_text, Annotation, EpisodeMeta, EpisodeRecord};
use crate::render::{bounding_boxes, prompt_asset_images, render_frame, Image};
use crate::solvers::{next_predicate, Oracle, Phase};
use crate::tasks::{instantiate, render_prompt, Level, PromptMode, RenderedPrompt, Split, TaskInstance, TASKS};
use crate::world::{Action, WorldState};

pub const ACTION_DIM: usize = 7;
pub const DEFAULT_TIMEOUT_MS: u64 = 5000;

/// What the policy sees at one step.
#[derive(Debug, Clone)]
pub struct Observation<'a> {
    pub step: usize,
    /// Present on the first step only.
    pub prompt: Option<(&'a RenderedPrompt, &'a [Image])>,
    pub frames: Vec<(CameraId, Image)>,
    /// Tip position and orientation quaternion (x, y, z, w).
    pub ee: [f64; 7],
    pub grip: f64,
}

/// Privileged simulator state, used only by in-process policies.
pub struct EpisodeContext<'a> {
    pub state: &'a WorldState,
    pub tree: &'a PredicateTree,
}

/// Optional solver context returned with an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub subtask: String,
    pub step: String,
    pub skills: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub action: [f64; 7],
    pub info: Option<StepInfo>,
}

pub trait Policy: Send {
    fn reset(&mut self, inst: &TaskInstance) -> Result<()>;
    fn needs_frames(&self) -> bool {
        false
    }
    fn act(&mut self, obs: &Observation, ctx: &EpisodeContext) -> Result<Reply>;
}

fn oracle_info(oracle: &Oracle, st: &WorldState, tree: &PredicateTree) -> StepInfo {
    let (subtask, phase) = match oracle.last_step() {
        Some(s) => (s.node.map(|n| subtask_text(tree, n, st)), s.phase),
        None => (None, Phase::Idle),
    };
    StepInfo {
        subtask: subtask.unwrap_or_else(|| "task complete".into()),
        step: step_text(phase, st),
        skills: oracle.kinds_used().iter().map(|k| k.name().to_string()).collect(),
    }
}

pub struct OraclePolicy {
    cfg: Config,
    oracle: Oracle,
}

impl OraclePolicy {
    pub fn new(cfg: &Config) -> Self {
        OraclePolicy { cfg: cfg.clone(), oracle: Oracle::new(cfg) }
    }

    /// Drops every live solver so the next step rebuilds them from scratch.
    pub fn reset_solvers(&mut self) {
        self.oracle.reset_solvers();
    }
}

impl Policy for OraclePolicy {
    fn reset(&mut self, _inst: &TaskInstance) -> Result<()> {
        self.oracle = Oracle::new(&self.cfg);
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, ctx: &EpisodeContext) -> Result<Reply> {
        let a = self.oracle.act(ctx.state, ctx.tree);
        Ok(Reply { action: a.to_array(), info: Some(oracle_info(&self.oracle, ctx.state, ctx.tree)) })
    }
}

fn mix(task: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Uniform actions inside the clamp bounds.
pub struct RandomPolicy {
    cfg: Config,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(cfg: &Config) -> Self {
        RandomPolicy { cfg: cfg.clone(), rng: ChaCha8Rng::seed_from_u64(0) }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, inst: &TaskInstance) -> Result<()> {
        self.rng = ChaCha8Rng::seed_from_u64(mix(&inst.task, inst.seed));
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _ctx: &EpisodeContext) -> Result<Reply> {
        let w = &self.cfg.world;
        let mut a = [0.0; 7];
        for (i, v) in a.iter_mut().enumerate() {
            let lim = match i {
                0..=2 => w.max_translation,
                3..=5 => w.max_rotation,
                _ => 1.0,
            };
            *v = self.rng.gen_range(-lim..=lim);
        }
        Ok(Reply { action: a, info: None })
    }
}

/// Policy served by an external command over stdin/stdout, one process per episode.
pub struct SubprocessPolicy {
    cmd: String,
    timeout: Duration,
    proc: Option<Running>,
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl SubprocessPolicy {
    pub fn new(cmd: &str, timeout_ms: u64) -> Self {
        SubprocessPolicy { cmd: cmd.to_string(), timeout: Duration::from_millis(timeout_ms), proc: None }
    }

    fn spawn(&self) -> Result<Running> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.cmd)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Protocol(format!("cannot start `{}`: {e}", self.cmd)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Running { child, stdin, lines: rx })
    }

    fn exchange(&mut self, msg: &Value) -> Result<Value> {
        let timeout = self.timeout;
        let p = self.proc.as_mut().ok_or_else(|| Error::Protocol("policy process not running".into()))?;
        let mut line = msg.to_string();
        line.push('\n');
        p.stdin
            .write_all(line.as_bytes())
            .and_then(|_| p.stdin.flush())
            .map_err(|e| Error::Protocol(format!("policy process closed its input: {e}")))?;
        let reply = match p.lines.recv_timeout(timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(Error::Protocol(format!("reading reply: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(Error::Protocol(format!("no reply within {} ms", timeout.as_millis()))),
            Err(RecvTimeoutError::Disconnected) => return Err(Error::Protocol("policy process exited".into())),
        };
        serde_json::from_str(&reply).map_err(|e| Error::Protocol(format!("malformed reply `{reply}`: {e}")))
    }

    fn expect_ready(&mut self, msg: &Value) -> Result<()> {
        let r = self.exchange(msg)?;
        if r.get("type").and_then(Value::as_str) != Some("ready") {
            return Err(Error::Protocol(format!("expected ready, got {r}")));
        }
        Ok(())
    }
}

impl Policy for SubprocessPolicy {
    fn reset(&mut self, inst: &TaskInstance) -> Result<()> {
        self.proc = None;
        self.proc = Some(self.spawn()?);
        self.expect_ready(&hello_message())?;
        self.expect_ready(&reset_message(inst))
    }

    fn needs_frames(&self) -> bool {
        true
    }

    fn act(&mut self, obs: &Observation, _ctx: &EpisodeContext) -> Result<Reply> {
        let r = self.exchange(&obs_message(obs))?;
        parse_act(&r)
    }
}

pub fn hello_message() -> Value {
    json!({"type": "hello", "action_dim": ACTION_DIM, "cameras": ["base", "hand"]})
}

pub fn reset_message(inst: &TaskInstance) -> Value {
    json!({"type": "reset", "task": inst.task, "seed": inst.seed, "split": inst.split.name(), "level": inst.level.name()})
}

pub fn obs_message(obs: &Observation) -> Value {
    let frames: serde_json::Map<String, Value> =
        obs.frames.iter().map(|(id, img)| (id.name().to_string(), Value::String(B64.encode(img.to_ppm())))).collect();
    let mut m = json!({
        "type": "obs",
        "step": obs.step,
        "frames": frames,
        "proprio": {"ee": obs.ee, "grip": obs.grip},
    });
    if let Some((prompt, assets)) = obs.prompt {
        let names = recorder::prompt_asset_names(prompt);
        let images: serde_json::Map<String, Value> =
            names.into_iter().zip(assets).map(|(n, img)| (n, Value::String(B64.encode(img.to_ppm())))).collect();
        m["prompt"] = serde_json::to_value(prompt).expect("prompt serializes");
        m["prompt_assets"] = Value::Object(images);
    }
    m
}

pub fn parse_act(r: &Value) -> Result<Reply> {
    if r.get("type").and_then(Value::as_str) != Some("act") {
        return Err(Error::Protocol(format!("expected act, got {r}")));
    }
    let arr = r
        .get("action")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Protocol("act reply without an action array".into()))?;
    if arr.len() != ACTION_DIM {
        return Err(Error::Protocol(format!("action has {} components, expected {ACTION_DIM}", arr.len())));
    }
    let mut action = [0.0; 7];
    for (a, v) in action.iter_mut().zip(arr) {
        *a = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| Error::Protocol(format!("bad action component {v}")))?;
    }
    let info = match r.get("info") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| Error::Protocol(format!("bad info: {e}")))?),
    };
    Ok(Reply { action, info })
}

/// Action the world actually executes for a policy output.
pub fn sanitize(a: [f64; 7], cfg: &Config) -> Result<Action> {
    let act = Action::from_array(a);
    if !act.is_finite() {
        return Err(Error::Protocol(format!("non-finite action {a:?}")));
    }
    Ok(act.clamped(&cfg.world))
}

fn proprio(st: &WorldState) -> ([f64; 7], f64) {
    let p = st.ee.pose.position;
    let q = st.ee.pose.orientation;
    ([p.x, p.y, p.z, q.x, q.y, q.z, q.w], if st.ee.suction_on { 1.0 } else { -1.0 })
}

/// Annotation levels when the policy gives no solver context.
fn derived_info(st: &WorldState, tree: &PredicateTree) -> StepInfo {
    let subtask = next_predicate(tree, st).map_or_else(|| "task complete".into(), |n| subtask_text(tree, n, st));
    let phase = match st.ee.attached {
        Some(i) => Phase::Carrying(i),
        None if st.ee.suction_on => Phase::Grasping(0),
        None => Phase::Moving,
    };
    StepInfo { subtask, step: step_text(phase, st), skills: Vec::new() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub record: bool,
    pub max_steps: usize,
}

impl RunOptions {
    pub fn new(cfg: &Config) -> Self {
        RunOptions { record: false, max_steps: cfg.solver.episode_timeout }
    }

    pub fn recording(cfg: &Config) -> Self {
        RunOptions { record: true, ..Self::new(cfg) }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub task: String,
    pub seed: u64,
    pub level: Level,
    pub success: bool,
    pub length: usize,
    pub total_reward: f64,
    pub solvers: Vec<String>,
    /// Protocol or engine error that ended the episode early.
    pub error: Option<String>,
    pub record: Option<EpisodeRecord>,
}

pub fn cameras() -> Vec<Camera> {
    vec![Camera::base(), Camera::hand()]
}

/// Runs one episode of `policy` on `inst`.
pub fn run_episode(inst: &TaskInstance, policy: &mut dyn Policy, cfg: &Config, opts: RunOptions) -> Result<EpisodeOutcome> {
    let mut w = WorldState::reset(&inst.scene, &cfg.world)?;
    let mut tree = PredicateTree::with_rotation_weight(&inst.predicate, &w, cfg.pose_rotation_weight)?;
    let prompt = render_prompt(inst, PromptMode::Multimodal)?;
    let assets = prompt_asset_images(inst, &cfg.world)?;
    let cams = cameras();
    let with_frames = opts.record || policy.needs_frames();

    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut flags = Vec::new();
    let mut frames: Vec<Vec<Image>> = vec![Vec::new(); cams.len()];
    let mut boxes = Vec::new();
    let mut annotations = Vec::new();
    let mut keysteps = Vec::new();
    let mut keystep_images = Vec::new();
    let mut solvers = Vec::new();
    let mut total = 0.0;
    let mut error = None;

    if let Err(e) = policy.reset(inst) {
        log::warn!("{} seed {}: {e}", inst.task, inst.seed);
        error = Some(e.to_string());
    }
    let mut step = 0;
    while error.is_none() && step < opts.max_steps && !tree.success() && !tree.failed() {
        let shots: Vec<(CameraId, Image)> =
            if with_frames { cams.iter().map(|c| (c.id, render_frame(&w, c))).collect() } else { Vec::new() };
        let (ee, grip) = proprio(&w);
        let obs = Observation { step, prompt: (step == 0).then_some((&prompt, assets.as_slice())), frames: shots, ee, grip };
        let reply = match policy.act(&obs, &EpisodeContext { state: &w, tree: &tree }) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{} seed {} step {step}: {e}", inst.task, inst.seed);
                error = Some(e.to_string());
                break;
            }
        };
        let action = match sanitize(reply.action, cfg) {
            Ok(a) => a,
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        };
        let info = match reply.info {
            Some(i) => {
                solvers = i.skills.clone();
                i
            }
            None => derived_info(&w, &tree),
        };
        if opts.record {
            boxes.push(cams.iter().flat_map(|c| bounding_boxes(&w, c)).collect::<Vec<_>>());
            for (k, (_, img)) in obs.frames.into_iter().enumerate() {
                frames[k].push(img);
            }
            annotations.push(Annotation { task: prompt.text.clone(), subtask: info.subtask, step: info.step });
        }
        let prev = w.clone();
        w.step(&action)?;
        let (reward, _) = tree.evaluate(&prev, &w)?;
        total += reward;
        actions.push(action.to_array().map(|v| v as f32));
        rewards.push(reward as f32);
        flags.push(tree.success() as u8);
        if opts.record && !tree.newly_done().is_empty() {
            keysteps.push(step);
            keystep_images.push(render_frame(&w, &cams[0]));
        }
        step += 1;
    }
    let success = tree.success();
    let record = opts.record.then(|| EpisodeRecord {
        meta: EpisodeMeta {
            task: inst.task.clone(),
            level: inst.level.name().to_string(),
            seed: inst.seed,
            split: inst.split.name().to_string(),
            prompt: prompt.clone(),
            success,
            length: actions.len(),
            solvers: solvers.clone(),
        },
        actions,
        rewards,
        success: flags,
        cameras: cams.clone(),
        frames,
        boxes,
        annotations,
        keysteps,
        keystep_images,
        prompt_assets: assets,
    });
    Ok(EpisodeOutcome {
        task: inst.task.clone(),
        seed: inst.seed,
        level: inst.level,
        success,
        length: step,
        total_reward: total,
        solvers,
        error,
        record,
    })
}

struct Resetting {
    inner: OraclePolicy,
    at: usize,
}

impl Policy for Resetting {
    fn reset(&mut self, inst: &TaskInstance) -> Result<()> {
        self.inner.reset(inst)
    }

    fn act(&mut self, obs: &Observation, ctx: &EpisodeContext) -> Result<Reply> {
        if obs.step == self.at {
            self.inner.reset_solvers();
        }
        self.inner.act(obs, ctx)
    }
}

/// Oracle episode with every solver rebuilt from scratch at step `at`.
pub fn run_oracle_with_reset(inst: &TaskInstance, cfg: &Config, at: usize) -> Result<EpisodeOutcome> {
    let mut p = Resetting { inner: OraclePolicy::new(cfg), at };
    run_episode(inst, &mut p, cfg, RunOptions::new(cfg))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Oracle,
    Random,
    Command { cmd: String, timeout_ms: u64 },
}

impl Endpoint {
    /// Parses `oracle`, `random` or `cmd:<shell command>`.
    pub fn parse(s: &str, timeout_ms: u64) -> Result<Endpoint> {
        match s {
            "oracle" => Ok(Endpoint::Oracle),
            "random" => Ok(Endpoint::Random),
            _ => match s.strip_prefix("cmd:") {
                Some(c) if !c.trim().is_empty() => Ok(Endpoint::Command { cmd: c.to_string(), timeout_ms }),
                _ => Err(Error::Config(format!("unknown policy `{s}` (oracle, random, cmd:<command>)"))),
            },
        }
    }

    pub fn policy(&self, cfg: &Config) -> Box<dyn Policy> {
        match self {
            Endpoint::Oracle => Box::new(OraclePolicy::new(cfg)),
            Endpoint::Random => Box::new(RandomPolicy::new(cfg)),
            Endpoint::Command { cmd, timeout_ms } => Box::new(SubprocessPolicy::new(cmd, *timeout_ms)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub successes: usize,
    /// Percent.
    pub success_rate: f64,
    /// Mean total reward per episode.
    pub ar: f64,
    /// AR divided by mean episode length.
    pub rs: f64,
    pub mean_length: f64,
}

impl Summary {
    pub fn of<'a>(eps: impl IntoIterator<Item = &'a EpisodeOutcome>) -> Summary {
        let (mut n, mut s, mut r, mut l) = (0usize, 0usize, 0.0, 0usize);
        for e in eps {
            n += 1;
            s += e.success as usize;
            r += e.total_reward;
            l += e.length;
        }
        if n == 0 {
            return Summary { episodes: 0, successes: 0, success_rate: 0.0, ar: 0.0, rs: 0.0, mean_length: 0.0 };
        }
        let ar = r / n as f64;
        let mean_length = l as f64 / n as f64;
        Summary {
            episodes: n,
            successes: s,
            success_rate: 100.0 * s as f64 / n as f64,
            ar,
            rs: if mean_length > 0.0 { ar / mean_length } else { 0.0 },
            mean_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: Summary,
    pub per_task: BTreeMap<String, Summary>,
    pub errors: Vec<String>,
}

impl Metrics {
    pub fn from_outcomes(eps: &[EpisodeOutcome]) -> Metrics {
        let mut by_task: BTreeMap<String, Vec<&EpisodeOutcome>> = BTreeMap::new();
        for e in eps {
            by_task.entry(e.task.clone()).or_default().push(e);
        }
        Metrics {
            overall: Summary::of(eps),
            per_task: by_task.into_iter().map(|(t, v)| (t, Summary::of(v))).collect(),
            errors: eps.iter().filter_map(|e| e.error.as_ref().map(|m| format!("{} seed {}: {m}", e.task, e.seed))).collect(),
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:>5} {:>8} {:>9} {:>7} {:>8}\n", "task", "eps", "suc%", "AR", "R/S", "len");
        let row = |name: &str, m: &Summary| {
            format!("{name:<22} {:>5} {:>8.1} {:>9.2} {:>7.3} {:>8.1}\n", m.episodes, m.success_rate, m.ar, m.rs, m.mean_length)
        };
        for (t, m) in &self.per_task {
            s.push_str(&row(t, m));
        }
        s.push_str(&row("overall", &self.overall));
        s
    }
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| Error::Config(e.to_string()))
}

/// Runs every (task, seed) episode with a fresh policy from `endpoint`.
pub fn evaluate(
    endpoint: &Endpoint,
    tasks: &[String],
    seeds: RangeInclusive<u64>,
    split: Split,
    workers: usize,
    cfg: &Config,
) -> Result<(Metrics, Vec<EpisodeOutcome>)> {
    let jobs: Vec<(String, u64)> = tasks.iter().flat_map(|t| seeds.clone().map(move |s| (t.clone(), s))).collect();
    let outcomes = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(task, seed)| {
                let inst = instantiate(task, *seed, split)?;
                let mut p = endpoint.policy(cfg);
                run_episode(&inst, p.as_mut(), cfg, RunOptions::new(cfg))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((Metrics::from_outcomes(&outcomes), outcomes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub attempted: usize,
    pub written: usize,
    pub discarded: usize,
    /// (task, seed, reason) for each discarded episode.
    pub failures: Vec<(String, u64, String)>,
}

pub fn episode_dir(out: &Path, task: &str, seed: u64) -> PathBuf {
    out.join(task).join(format!("traj_{seed}"))
}

/// Runs the oracle per (task, seed) and writes successful episodes under `out/<task>/traj_<seed>`.
pub fn generate(tasks: &[String], seeds: RangeInclusive<u64>, split: Split, out: &Path, workers: usize, cfg: &Config) -> Result<GenerationReport> {
    let jobs: Vec<(String, u64)> = tasks.iter().flat_map(|t| seeds.clone().map(move |s| (t.clone(), s))).collect();
    let results: Vec<(String, u64, std::result::Result<(), String>)> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|(task, seed)| {
                let r = (|| -> Result<std::result::Result<(), String>> {
                    let inst = instantiate(task, *seed, split)?;
                    let mut p = OraclePolicy::new(cfg);
                    let o = run_episode(&inst, &mut p, cfg, RunOptions::recording(cfg))?;
                    if !o.success {
                        return Ok(Err(o.error.unwrap_or_else(|| format!("oracle failed after {} steps", o.length))));
                    }
                    recorder::write_episode(&episode_dir(out, task, *seed), o.record.as_ref().expect("recorded"))?;
                    Ok(Ok(()))
                })();
                let r = r.unwrap_or_else(|e| Err(e.to_string()));
                (task.clone(), *seed, r)
            })
            .collect()
    });
    let mut rep = GenerationReport::default();
    for (task, seed, r) in results {
        rep.attempted += 1;
        match r {
            Ok(()) => rep.written += 1,
            Err(reason) => {
                log::warn!("discarded {task} seed {seed}: {reason}");
                rep.discarded += 1;
                rep.failures.push((task, seed, reason));
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub steps: usize,
    pub min: [f64; 7],
    pub max: [f64; 7],
    pub mean: [f64; 7],
    /// Per task: episode length bucket start → count.
    pub lengths: BTreeMap<String, BTreeMap<usize, usize>>,
    pub mean_length: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
}

pub const HISTOGRAM_BUCKET: usize = 25;

pub fn stats(root: &Path) -> Result<DatasetStats> {
    let mut st = DatasetStats {
        episodes: 0,
        steps: 0,
        min: [f64::INFINITY; 7],
        max: [f64::NEG_INFINITY; 7],
        mean: [0.0; 7],
        lengths: BTreeMap::new(),
        mean_length: BTreeMap::new(),
        skipped: Vec::new(),
    };
    let mut sums = [0.0f64; 7];
    let mut totals: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for dir in recorder::find_episodes(root)? {
        let (meta, actions) = match recorder::read_meta(&dir).and_then(|m| Ok((m, recorder::read_actions(&dir)?))) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                st.skipped.push(dir.display().to_string());
                continue;
            }
        };
        st.episodes += 1;
        st.steps += actions.len();
        for row in &actions {
            for (k, &v) in row.iter().enumerate() {
                let v = v as f64;
                st.min[k] = st.min[k].min(v);
                st.max[k] = st.max[k].max(v);
                sums[k] += v;
            }
        }
        let n = actions.len();
        *st.lengths.entry(meta.task.clone()).or_default().entry(n / HISTOGRAM_BUCKET * HISTOGRAM_BUCKET).or_default() += 1;
        let t = totals.entry(meta.task).or_default();
        t.0 += 1;
        t.1 += n;
    }
    if st.episodes == 0 {
        return Err(Error::Integrity { file: root.into(), msg: "no readable episodes".into() });
    }
    if st.steps == 0 {
        st.min = [0.0; 7];
        st.max = [0.0; 7];
    } else {
        st.mean = sums.map(|s| s / st.steps as f64);
    }
    st.mean_length = totals.into_iter().map(|(t, (e, n))| (t, n as f64 / e as f64)).collect();
    Ok(st)
}

/// Validates every episode directory under `root`, returning (dir, error) for each bad one.
pub fn inspect(root: &Path) -> Result<(usize, Vec<(PathBuf, Error)>)> {
    let dirs = recorder::find_episodes(root)?;
    let bad = dirs.iter().filter_map(|d| recorder::read_episode(d).err().map(|e| (d.clone(), e))).collect();
    Ok((dirs.len(), bad))
}

/// Task names selected by a comma list of names and/or level names (`L0`, `L1`, `L2`, `all`).
pub fn select_tasks(spec: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let level = match part {
            "L0" => Some(Some(Level::L0)),
            "L1" => Some(Some(Level::L1)),
            "L2" => Some(Some(Level::L2)),
            "all" => Some(None),
            _ => None,
        };
        match level {
            Some(l) => out.extend(TASKS.iter().filter(|t| l.is_none_or(|l| t.level == l)).map(|t| t.name.to_string())),
            None => out.push(crate::tasks::task_info(part)?.name.to_string()),
        }
    }
    let mut seen = std::collections::HashSet::new();
    out.retain(|t| seen.insert(t.clone()));
    Ok(out)
}

/// Parses an inclusive seed range `a..b` (or `a..=b`, or a single seed).
pub fn parse_seeds(s: &str) -> Result<RangeInclusive<u64>> {
    let bad = || Error::Config(format!("bad seed range `{s}` (expected a..b)"));
    let num = |x: &str| x.trim().parse::<u64>().map_err(|_| bad());
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b.strip_prefix('=').unwrap_or(b))?);
            if a > b {
                return Err(bad());
            }
            Ok(a..=b)
        }
        None => num(s).map(|a| a..=a),
    }
}

enum Served {
    Zero,
    Oracle { cfg: Box<Config>, shadow: Option<Box<Shadow>> },
}

struct Shadow {
    world: WorldState,
    tree: PredicateTree,
    oracle: Oracle,
}

/// Answers protocol messages from `input` on `output` until end of input.
///
/// `oracle` serves the oracle from a shadow simulation rebuilt from each reset
/// message; otherwise every action is zero.
pub fn serve(oracle: bool, cfg: &Config, input: impl BufRead, mut output: impl Write) -> Result<()> {
    let mut me = if oracle { Served::Oracle { cfg: Box::new(cfg.clone()), shadow: None } } else { Served::Zero };
    for line in input.lines() {
        let line = line.map_err(|e| Error::Protocol(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let msg: Value = serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("malformed message: {e}")))?;
        let reply = match msg.get("type").and_then(Value::as_str) {
            Some("hello") => {
                if msg.get("action_dim").and_then(Value::as_u64) != Some(ACTION_DIM as u64) {
                    return Err(Error::Protocol("unsupported action_dim".into()));
                }
                json!({"type": "ready"})
            }
            Some("reset") => {
                if let Served::Oracle { cfg, shadow } = &mut me {
                    let field = |k: &str| msg.get(k).ok_or_else(|| Error::Protocol(format!("reset without {k}")));
                    let task = field("task")?.as_str().ok_or_else(|| Error::Protocol("bad task".into()))?;
                    let seed = field("seed")?.as_u64().ok_or_else(|| Error::Protocol("bad seed".into()))?;
                    let split: Split = field("split")?.as_str().unwrap_or_default().parse()?;
                    let inst = instantiate(task, seed, split)?;
                    let world = WorldState::reset(&inst.scene, &cfg.world)?;
                    let tree = PredicateTree::with_rotation_weight(&inst.predicate, &world, cfg.pose_rotation_weight)?;
                    *shadow = Some(Box::new(Shadow { world, tree, oracle: Oracle::new(cfg) }));
                }
                json!({"type": "ready"})
            }
            Some("obs") => match &mut me {
                Served::Zero => json!({"type": "act", "action": vec![0.0f64; ACTION_DIM]}),
                Served::Oracle { cfg, shadow } => {
                    let sh = shadow.as_mut().ok_or_else(|| Error::Protocol("obs before reset".into()))?;
                    let a = sh.oracle.act(&sh.world, &sh.tree).to_array();
                    let info = oracle_info(&sh.oracle, &sh.world, &sh.tree);
                    let prev = sh.world.clone();
                    sh.world.step(&sanitize(a, cfg)?)?;
                    sh.tree.evaluate(&prev, &sh.world)?;
                    json!({"type": "act", "action": a, "info": info})
                }
            },
            _ => return Err(Error::Protocol(format!("unknown message {line}"))),
        };
        writeln!(output, "{reply}").and_then(|_| output.flush()).map_err(|e| Error::Protocol(e.to_string()))?;
    }
    Ok(())
}
