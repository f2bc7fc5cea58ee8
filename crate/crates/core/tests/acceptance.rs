//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use parry3d_f64::glamx::{DQuat, DVec2, DVec3};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use skillbench::config::Config;
use skillbench::error::Error;
use skillbench::geom::{Camera, CameraId, Pose, Shape};
use skillbench::harness::{self, Endpoint, EpisodeOutcome, OraclePolicy, RunOptions, SubprocessPolicy};
use skillbench::planner::{ballistic_release, rrt_connect, MovingBody, PlanQuery};
use skillbench::predicates::{Direction, Predicate, PredicateTree, TouchMode};
use skillbench::recorder::{read_episode, write_episode, Annotation, EpisodeMeta, EpisodeRecord, Tensor};
use skillbench::render::{BoundingBox, Image};
use skillbench::solvers::Oracle;
use skillbench::tasks::{instantiate, render_prompt, Level, PromptMode, RenderedPrompt, RenderedSegment, Split, TASKS};
use skillbench::world::{Body, Event, ObjectKind, SceneSpec, WorldObject, WorldState};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const GRAVITY: f64 = 9.81;
const ROT_WEIGHT: f64 = 0.1;
const EE_RADIUS: f64 = 0.01;
const CONTACT_TOL: f64 = 1e-3;

fn all_tasks() -> Vec<String> {
    TASKS.iter().map(|t| t.name.to_string()).collect()
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

fn oracle_run(cfg: &Config) -> Result<(Vec<EpisodeOutcome>, f64), String> {
    let t0 = Instant::now();
    let (_, eps) = harness::evaluate(&Endpoint::Oracle, &all_tasks(), 100..=119, Split::Train, workers(), cfg).map_err(|e| e.to_string())?;
    Ok((eps, t0.elapsed().as_secs_f64()))
}

fn c1_oracle(eps: &[EpisodeOutcome], secs: f64) -> Outcome {
    let mut by_task: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for e in eps {
        let t = by_task.entry(e.task.as_str()).or_default();
        t.0 += 1;
        t.1 += e.success as usize;
    }
    ensure!(by_task.len() == 33, "{} tasks evaluated", by_task.len());
    let bad: Vec<String> = by_task.iter().filter(|(_, (n, s))| n != s || *n != 20).map(|(t, (n, s))| format!("{t} {s}/{n}")).collect();
    ensure!(bad.is_empty(), "below 100%: {}", bad.join(", "));
    ensure!(secs < 600.0, "took {secs:.1} s");
    Ok(format!("33 tasks x 20 seeds, {} episodes all successful in {secs:.1} s", eps.len()))
}

fn cube(id: &str, x: f64, y: f64, half: f64) -> WorldObject {
    WorldObject::new(id, ObjectKind::Solid, Shape::cuboid(half, half, half), Pose::from_position(DVec3::new(x, y, half)), "cube", "red", 1000.0)
}

fn world(objects: Vec<WorldObject>) -> WorldState {
    WorldState::reset(&SceneSpec::new(objects, Pose::from_position(DVec3::new(0.0, -0.4, 0.5)), 0), &Config::default().world).unwrap()
}

/// Builds a world, compiles `pred`, applies `edit` and evaluates once.
fn judge(objects: Vec<WorldObject>, pred: &Predicate, edit: impl FnOnce(&mut WorldState)) -> bool {
    let mut w = world(objects);
    let mut t = PredicateTree::new(pred, &w).unwrap();
    edit(&mut w);
    t.evaluate(&w.clone(), &w).unwrap().1
}

fn contact(w: &mut WorldState, obj: usize) {
    w.events.push(Event::Contact { a: Body::Ee, b: obj, speed: 0.0 });
}

/// Position on a ray from the origin at angle `theta` whose distance to `goal` is `d`.
fn ray_point(goal: DVec2, theta: f64, d: f64) -> DVec2 {
    let u = DVec2::new(theta.cos(), theta.sin());
    let b = -2.0 * u.dot(goal);
    let c = goal.length_squared() - d * d;
    let r = (-b - (b * b - 4.0 * c).sqrt()) / 2.0;
    u * r
}

fn c2_scenarios() -> Outcome {
    struct Case {
        name: String,
        expected: bool,
        got: bool,
    }
    let mut cases = Vec::new();
    let mut add = |name: String, expected: bool, got: bool| cases.push(Case { name, expected, got });

    // combined pose error: position + 0.1 * rotation angle, threshold 0.05
    let at_pose = || Predicate::AtPose { obj: "o".into(), target: Pose::from_position(DVec3::new(0.0, 0.0, 0.02)), tol: 0.05 };
    for off in [0.047, 0.053] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &at_pose(), |w| w.objects[0].pose.position.x = off);
        add(format!("pose offset {off} m"), off <= 0.05, got);
    }
    for angle in [0.47, 0.53] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &at_pose(), |w| w.objects[0].pose.orientation = DQuat::from_rotation_z(angle));
        add(format!("pose rotation {angle} rad"), ROT_WEIGHT * angle <= 0.05, got);
    }
    for (off, angle) in [(0.02, 0.27), (0.02, 0.33)] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &at_pose(), |w| {
            w.objects[0].pose = Pose::new(DVec3::new(0.0, off, 0.02), DQuat::from_rotation_z(angle))
        });
        add(format!("pose {off} m + {angle} rad"), off + ROT_WEIGHT * angle <= 0.05, got);
    }

    // rotate 90 degrees clockwise: 5 degree and 5 cm tolerances
    let rot = || Predicate::rotated_by("o", 90.0, Direction::Clockwise);
    for err in [4.5f64, 5.5, -4.5, -5.5] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &rot(), |w| {
            w.objects[0].pose.orientation = DQuat::from_rotation_z((-90.0 + err).to_radians())
        });
        add(format!("rotate error {err} deg"), f64::abs(err) <= 5.0, got);
    }
    for drift in [0.045, 0.055] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &rot(), |w| {
            w.objects[0].pose = Pose::new(DVec3::new(drift, 0.0, 0.02), DQuat::from_rotation_z(-FRAC_PI_2))
        });
        add(format!("rotate drift {drift} m"), drift <= 0.05, got);
    }

    // push: distance to goal reduced by 30 %, displacement within 45 degrees of the goal axis
    let goal = DVec2::new(0.4, 0.0);
    let push = || Predicate::push_progress("o", "g");
    let objs = || vec![cube("o", 0.0, 0.0, 0.02), cube("g", 0.4, 0.0, 0.02)];
    for frac in [0.33, 0.27] {
        let p = DVec2::new(0.4 * frac, 0.0);
        let got = judge(objs(), &push(), |w| w.objects[0].pose.position = p.extend(0.02));
        add(format!("push reduction {frac}"), frac >= 0.3, got);
    }
    for deg in [40.5, 49.5] {
        let p = ray_point(goal, f64::to_radians(deg), 0.4 * 0.6);
        let got = judge(objs(), &push(), |w| w.objects[0].pose.position = p.extend(0.02));
        let angle = p.angle_to(goal).abs().to_degrees();
        add(format!("push direction {deg} deg"), angle <= 45.0 && goal.distance(p) <= 0.7 * 0.4, got);
    }

    // touch gently: object may move at most 3 cm
    let gentle = || Predicate::TouchedGently { obj: "o".into(), max_move: 0.03 };
    for moved in [0.027, 0.033] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &gentle(), |w| {
            w.objects[0].pose.position.x += moved;
            contact(w, 0);
        });
        add(format!("touch moved {moved} m"), moved <= 0.03, got);
    }
    add(
        "touch without contact".into(),
        false,
        judge(vec![cube("o", 0.0, 0.0, 0.02)], &gentle(), |w| w.objects[0].pose.position.x += 0.01),
    );

    // touch and push: object must move at least 10 cm and stay upright
    let shove = || Predicate::TouchPushed { obj: "o".into(), min_move: 0.10, forbid_topple: true };
    for moved in [0.105, 0.095] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &shove(), |w| {
            w.objects[0].pose.position.x += moved;
            contact(w, 0);
        });
        add(format!("touch-push moved {moved} m"), moved >= 0.10, got);
    }

    // topple: vertical axis beyond 45 degrees
    let topple = || Predicate::Touch { obj: "o".into(), mode: TouchMode::Topple };
    for deg in [49.5, 40.5] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &topple(), |w| {
            w.objects[0].pose.orientation = DQuat::from_rotation_y(f64::to_radians(deg));
            contact(w, 0);
        });
        add(format!("topple tilt {deg} deg"), deg > 45.0, got);
    }

    // place: resting on the base with at least 25 % footprint overlap, gripper clear
    let on_top = || Predicate::OnTop { obj: "a".into(), base: "b".into() };
    let stack = |x: f64| vec![cube("b", 0.0, 0.0, 0.03), {
        let mut a = cube("a", x, 0.0, 0.02);
        a.pose.position.z = 0.08;
        a
    }];
    // top footprint [x-0.02, x+0.02] over base [-0.03, 0.03]: overlap (0.05 - x) / 0.04
    for frac in [0.275, 0.225] {
        let x = 0.05 - 0.04 * frac;
        add(format!("place overlap {frac}"), frac >= 0.25, judge(stack(x), &on_top(), |_| {}));
    }
    add("place on the table".into(), false, judge(vec![cube("b", 0.0, 0.0, 0.03), cube("a", 0.2, 0.0, 0.02)], &on_top(), |_| {}));
    for gap in [0.0011, 0.0009] {
        let got = judge(stack(0.0), &on_top(), |w| w.ee.pose.position = DVec3::new(0.0, 0.0, 0.10 + gap));
        add(format!("place gripper gap {gap} m"), gap > CONTACT_TOL, got);
    }

    // pick: held and clear of the table
    let pick = || Predicate::Grasped { obj: "o".into() };
    for lift in [0.0011, 0.0009] {
        let got = judge(vec![cube("o", 0.0, 0.0, 0.02)], &pick(), |w| {
            w.objects[0].pose.position.z = 0.02 + lift;
            w.ee.pose.position = DVec3::new(0.0, 0.0, 0.04 + lift);
            w.ee.suction_on = true;
            w.ee.attached = Some(0);
        });
        add(format!("pick lift {lift} m"), lift > CONTACT_TOL, got);
    }
    add(
        "pick lifted but not held".into(),
        false,
        judge(vec![cube("o", 0.0, 0.0, 0.02)], &pick(), |w| w.objects[0].pose.position.z = 0.05),
    );

    let wrong: Vec<String> = cases.iter().filter(|c| c.expected != c.got).map(|c| format!("{} (expected {}, got {})", c.name, c.expected, c.got)).collect();
    ensure!(wrong.is_empty(), "{}", wrong.join("; "));
    let sides = cases.iter().filter(|c| c.expected).count();
    Ok(format!("{} scenarios ({} passing, {} failing cases) match", cases.len(), sides, cases.len() - sides))
}

const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;

fn hash_dir(root: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = fs::read(&f).unwrap();
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn c3_determinism(cfg: &Config) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pick = vec!["pick".to_string()];
    let mut hashes = Vec::new();
    for (k, (seeds, w)) in [(7..=7, 1), (7..=7, 1), (7..=7, 4), (0..=7, 1), (0..=7, 4)].into_iter().enumerate() {
        let out = tmp.path().join(format!("run{k}"));
        let rep = harness::generate(&pick, seeds.clone(), Split::Train, &out, w, cfg).map_err(|e| e.to_string())?;
        ensure!(rep.written == seeds.clone().count() && rep.attempted == rep.written + rep.discarded, "run {k}: {rep:?}");
        hashes.push(hash_dir(&out));
    }
    ensure!(hashes[0] == hashes[1], "repeat run differs");
    ensure!(hashes[0] == hashes[2], "workers 1 vs 4 differ for seed 7");
    ensure!(hashes[3] == hashes[4], "workers 1 vs 4 differ for seeds 0..7");
    Ok(format!("pick seed 7 sha256 {}.. identical across repeats and worker counts", &hashes[0][..16]))
}

/// Distance from `p` to a box resting on the table with yaw `yaw`.
fn box_distance(p: DVec3, center: DVec3, half: [f64; 3], yaw: f64) -> f64 {
    let d = p - center;
    let (s, c) = yaw.sin_cos();
    let local = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
    let out: f64 = (0..3).map(|k| (local[k].abs() - half[k]).max(0.0).powi(2)).sum();
    out.sqrt()
}

fn c4_planner(cfg: &Config) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lo = [-0.6, -0.6, 0.0];
    let hi = [0.6, 0.6, 0.8];
    let mut worst = f64::INFINITY;
    let mut checked = 0usize;
    for q in 0..100u64 {
        let n = rng.gen_range(1..=5);
        let boxes: Vec<(DVec3, [f64; 3], f64)> = (0..n)
            .map(|_| {
                let half = [rng.gen_range(0.03..0.1), rng.gen_range(0.03..0.1), rng.gen_range(0.05..0.3)];
                (DVec3::new(rng.gen_range(-0.25..0.25), rng.gen_range(-0.25..0.25), half[2]), half, rng.gen_range(-3.1..3.1))
            })
            .collect();
        let start = DVec3::new(-0.45, rng.gen_range(-0.4..0.4), rng.gen_range(0.02..0.15));
        let goal = DVec3::new(0.45, rng.gen_range(-0.4..0.4), rng.gen_range(0.02..0.15));
        let query = PlanQuery {
            start: Pose::from_position(start),
            goal: Pose::from_position(goal),
            body: MovingBody::bare(EE_RADIUS),
            obstacles: boxes.iter().map(|(c, h, y)| (Shape::cuboid(h[0], h[1], h[2]), Pose::from_xyz_yaw(c.x, c.y, c.z, *y))).collect(),
            bounds: (lo, hi),
            seed: q,
        };
        let path = rrt_connect(&query, &cfg.planner).map_err(|e| format!("query {q} with {n} obstacles: {e}"))?;
        let pts: Vec<DVec3> = path.waypoints.iter().map(|p| p.position).collect();
        ensure!(pts[0].distance(start) < 1e-9 && pts[pts.len() - 1].distance(goal) < 1e-9, "query {q}: endpoints moved");
        for w in pts.windows(2) {
            let k = (w[0].distance(w[1]) / 0.005).ceil().max(1.0) as usize;
            for i in 0..=k {
                let tip = w[0].lerp(w[1], i as f64 / k as f64);
                ensure!((0..3).all(|a| tip[a] >= lo[a] - 1e-9 && tip[a] <= hi[a] + 1e-9), "query {q}: out of bounds at {tip}");
                let centre = tip + DVec3::Z * EE_RADIUS;
                for (c, h, y) in &boxes {
                    let gap = box_distance(centre, *c, *h, *y) - EE_RADIUS;
                    worst = worst.min(gap);
                    ensure!(gap > 0.0, "query {q}: collision at {tip} (gap {gap})");
                }
                checked += 1;
            }
        }
    }
    Ok(format!("100/100 paths collision free, {checked} samples at 5 mm, min gap {:.2} mm", worst * 1000.0))
}

fn c5_ballistics(cfg: &Config) -> Outcome {
    let mut report = Vec::new();
    for d in [0.5, 1.0, 1.5] {
        let r = 0.02;
        let u = DVec2::new(1.0, 1.0).normalize();
        let release = (-u * d / 2.0).extend(r);
        let target = (u * d / 2.0).extend(r);
        let v = ballistic_release(release, target, std::f64::consts::FRAC_PI_4, GRAVITY).map_err(|e| e.to_string())?;
        let expected = (GRAVITY * d).sqrt();
        ensure!((v.length() - expected).abs() <= 1e-9 * expected, "d {d}: speed {} vs {expected}", v.length());
        let mut ball = WorldObject::new("ball", ObjectKind::Solid, Shape::Sphere { radius: r }, Pose::from_position(release), "ball", "red", 1000.0);
        ball.in_flight = true;
        ball.velocity = v.to_array();
        let spec = SceneSpec::new(vec![ball], Pose::from_position(DVec3::new(0.5, -0.5, 0.7)), 0);
        let mut w = WorldState::reset(&spec, &cfg.world).map_err(|e| e.to_string())?;
        let mut n = 0;
        while w.objects[0].in_flight && n < 1000 {
            w.step(&skillbench::world::Action::zero()).map_err(|e| e.to_string())?;
            n += 1;
        }
        let err = w.objects[0].pose.position.truncate().distance(target.truncate());
        ensure!(err <= 0.03, "d {d}: landing error {err:.4} m");
        report.push(format!("d={d}: v={:.4} err={:.4}", v.length(), err));
    }
    Ok(report.join(", "))
}

/// Whether some subset of `m` sums to exactly half the total (relative 1e-9).
fn has_equal_partition(m: &[f64]) -> bool {
    let total: f64 = m.iter().sum();
    (0u32..1 << m.len()).any(|mask| {
        let s: f64 = (0..m.len()).filter(|i| mask >> i & 1 == 1).map(|i| m[i]).sum();
        (2.0 * s - total).abs() <= 1e-9 * total
    })
}

fn c6_balance(cfg: &Config) -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 100..200 {
        let inst = instantiate("balance", seed, Split::Train).map_err(|e| e.to_string())?;
        let Predicate::Balanced { objs, .. } = &inst.predicate else { return Err("balance predicate expected".into()) };
        let masses: Vec<f64> = objs.iter().map(|id| inst.scene.objects.iter().find(|o| &o.id == id).unwrap().mass).collect();
        ensure!(has_equal_partition(&masses), "seed {seed}: masses {masses:?} have no equal split");
        let mut w = WorldState::reset(&inst.scene, &cfg.world).map_err(|e| e.to_string())?;
        let mut tree = PredicateTree::with_rotation_weight(&inst.predicate, &w, cfg.pose_rotation_weight).map_err(|e| e.to_string())?;
        let mut oracle = Oracle::new(cfg);
        let mut steps = 0;
        while !tree.success() && !tree.failed() && steps < cfg.solver.episode_timeout {
            let a = oracle.act(&w, &tree);
            let prev = w.clone();
            w.step(&a).map_err(|e| e.to_string())?;
            tree.evaluate(&prev, &w).map_err(|e| e.to_string())?;
            steps += 1;
        }
        ensure!(tree.success(), "seed {seed}: oracle failed after {steps} steps");
        let tilt = w.scale_tilt().abs();
        ensure!(tilt <= 0.01, "seed {seed}: final tilt {tilt}");
        worst = worst.max(tilt);
    }
    Ok(format!("100/100 instances partition exactly, max final |tilt| {worst:.2e} rad"))
}

fn text(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[char] = &['a', 'Z', ' ', '"', '\\', '\n', '\t', 'é', '→', '{', '}', '0', '/'];
    (0..rng.gen_range(0..12)).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

fn finite_f32(rng: &mut ChaCha8Rng) -> f32 {
    let v = f32::from_bits(rng.gen());
    if v.is_finite() {
        v
    } else {
        rng.gen_range(-1.0..1.0)
    }
}

fn finite_f64(rng: &mut ChaCha8Rng) -> f64 {
    let v = f64::from_bits(rng.gen());
    if v.is_finite() {
        v
    } else {
        rng.gen_range(-1.0..1.0)
    }
}

fn image(rng: &mut ChaCha8Rng) -> Image {
    let (w, h) = (rng.gen_range(1..5), rng.gen_range(1..5));
    Image { width: w, height: h, pixels: (0..w * h * 3).map(|_| rng.gen()).collect() }
}

fn random_record(seed: u64, n: usize) -> EpisodeRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segments = Vec::new();
    let mut assets = Vec::new();
    for _ in 0..rng.gen_range(0..5) {
        if rng.gen_bool(0.5) {
            segments.push(RenderedSegment::Text { text: text(&mut rng) });
        } else {
            segments.push(RenderedSegment::Image { asset: format!("prompt_assets/{:02}.ppm", assets.len()) });
            assets.push(image(&mut rng));
        }
    }
    let switch = rng.gen_range(0..=n + 1);
    let success: Vec<u8> = (0..n).map(|i| (i >= switch) as u8).collect();
    let mut cameras = vec![Camera::base(), Camera::hand()];
    for c in &mut cameras {
        c.center = [finite_f64(&mut rng), finite_f64(&mut rng)];
        c.width = finite_f64(&mut rng);
        c.resolution = [rng.gen(), rng.gen()];
    }
    if rng.gen_bool(0.3) {
        cameras.pop();
    }
    let frames = cameras.iter().map(|_| (0..n).map(|_| image(&mut rng)).collect()).collect();
    let keysteps: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.2)).collect();
    let keystep_images = keysteps.iter().map(|_| image(&mut rng)).collect();
    EpisodeRecord {
        meta: EpisodeMeta {
            task: text(&mut rng),
            level: text(&mut rng),
            seed: rng.gen(),
            split: text(&mut rng),
            prompt: RenderedPrompt {
                mode: if rng.gen_bool(0.5) { PromptMode::Multimodal } else { PromptMode::LanguageOnly },
                text: text(&mut rng),
                segments,
            },
            success: success.last() == Some(&1),
            length: n,
            solvers: (0..rng.gen_range(0..3)).map(|_| text(&mut rng)).collect(),
        },
        actions: (0..n).map(|_| std::array::from_fn(|_| finite_f32(&mut rng))).collect(),
        rewards: (0..n).map(|_| finite_f32(&mut rng)).collect(),
        success,
        frames,
        boxes: (0..n)
            .map(|_| {
                (0..rng.gen_range(0..3))
                    .map(|_| BoundingBox {
                        object: text(&mut rng),
                        camera: if rng.gen_bool(0.5) { CameraId::Base } else { CameraId::Hand },
                        x0: rng.gen(),
                        y0: rng.gen(),
                        x1: rng.gen(),
                        y1: rng.gen(),
                        visible: rng.gen(),
                    })
                    .collect()
            })
            .collect(),
        annotations: (0..n).map(|_| Annotation { task: text(&mut rng), subtask: text(&mut rng), step: text(&mut rng) }).collect(),
        cameras,
        keysteps,
        keystep_images,
        prompt_assets: assets,
    }
}

fn corrupted(name: &str, dir: &Path, edit: impl FnOnce(&Path), want_file: &str, integrity: bool) -> Result<(), String> {
    edit(dir);
    match read_episode(dir) {
        Err(Error::Integrity { file, .. }) if integrity && file.to_string_lossy().starts_with(want_file) => Ok(()),
        Err(Error::Parse { file, .. }) if !integrity && file.to_string_lossy() == want_file => Ok(()),
        other => Err(format!("{name}: got {other:?}")),
    }
}

fn c7_roundtrip() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runner = TestRunner::new(PtConfig { cases: 256, failure_persistence: None, ..PtConfig::default() });
    let root = tmp.path().to_path_buf();
    let count = std::cell::Cell::new(0usize);
    runner
        .run(&(any::<u64>(), 0usize..8), |(seed, n)| {
            let rec = random_record(seed, n);
            let dir = root.join(format!("ep{seed}_{n}"));
            write_episode(&dir, &rec).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = read_episode(&dir).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&back, &rec);
            // rewriting over an existing directory gives the same record
            write_episode(&dir, &back).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(read_episode(&dir).map_err(|e| TestCaseError::fail(e.to_string()))?, rec);
            fs::remove_dir_all(&dir).ok();
            count.set(count.get() + 1);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let fresh = |k: &str| -> Result<std::path::PathBuf, String> {
        let mut rec = random_record(77, 5);
        rec.meta.prompt.segments = vec![RenderedSegment::Text { text: "x".into() }];
        rec.prompt_assets.clear();
        if rec.cameras.len() == 1 {
            rec.cameras.push(Camera::hand());
            rec.frames.push(rec.frames[0].clone());
        }
        let dir = root.join(k);
        write_episode(&dir, &rec).map_err(|e| e.to_string())?;
        Ok(dir)
    };
    let cut = |file: &'static str, n: usize| {
        move |d: &Path| {
            let p = d.join(file);
            let b = fs::read(&p).unwrap();
            fs::write(&p, &b[..b.len() - n]).unwrap();
        }
    };
    corrupted("truncated actions", &fresh("a")?, cut("actions.cskt", 3), "actions.cskt", true)?;
    corrupted("truncated frame", &fresh("b")?, cut("frames/base/000002.ppm", 1), "frames/base/000002.ppm", true)?;
    corrupted("missing frame", &fresh("c")?, |d| fs::remove_file(d.join("frames/hand/000004.ppm")).unwrap(), "frames/hand", true)?;
    corrupted(
        "short rewards",
        &fresh("d")?,
        |d| fs::write(d.join("rewards.cskt"), Tensor::f32(vec![4], vec![0.0; 4]).encode()).unwrap(),
        "rewards.cskt",
        true,
    )?;
    corrupted(
        "success flag disagrees",
        &fresh("e")?,
        |d| {
            let meta = fs::read_to_string(d.join("meta.json")).unwrap();
            let flipped = if meta.contains("\"success\": true") { meta.replace("\"success\": true", "\"success\": false") } else { meta.replace("\"success\": false", "\"success\": true") };
            fs::write(d.join("meta.json"), flipped).unwrap();
        },
        "meta.json",
        true,
    )?;
    corrupted(
        "missing annotation line",
        &fresh("f")?,
        |d| {
            let t = fs::read_to_string(d.join("annotations.jsonl")).unwrap();
            let keep: Vec<&str> = t.lines().take(4).collect();
            fs::write(d.join("annotations.jsonl"), keep.join("\n") + "\n").unwrap();
        },
        "annotations.jsonl",
        true,
    )?;
    corrupted("garbled meta", &fresh("g")?, |d| fs::write(d.join("meta.json"), "{\"task\": 5").unwrap(), "meta.json", false)?;
    corrupted(
        "bad magic",
        &fresh("h")?,
        |d| {
            let p = d.join("success.cskt");
            let mut b = fs::read(&p).unwrap();
            b[0] = b'X';
            fs::write(&p, b).unwrap();
        },
        "success.cskt",
        false,
    )?;
    Ok(format!("{} randomized records round-trip; 8 corruption cases rejected", count.get()))
}

const GRID: [[f64; 3]; 9] = {
    let mut g = [[0.0; 3]; 9];
    let mut k = 0;
    while k < 9 {
        g[k] = [-0.1 + 0.1 * (k % 3) as f64, -0.1 + 0.1 * (k / 3) as f64, 0.3];
        k += 1;
    }
    g
};

fn tree_strategy() -> impl Strategy<Value = Predicate> {
    let leaf = (0usize..9).prop_map(|k| Predicate::EEAtPos { target: GRID[k], tol: 0.01 });
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..4).prop_map(Predicate::set),
            proptest::collection::vec(inner.clone(), 1..4).prop_map(Predicate::sequence),
            inner.prop_map(Predicate::once),
        ]
    })
}

fn check_structure(t: &PredicateTree) -> std::result::Result<(), TestCaseError> {
    for n in &t.nodes {
        prop_assert!((0.0..=1.0).contains(&n.reward), "reward {} out of range", n.reward);
        let kids: Vec<_> = n.children.iter().map(|&c| &t.nodes[c]).collect();
        match &n.pred {
            Predicate::Sequence { .. } => {
                // a child is done only if every earlier child finished strictly before it
                for (a, b) in kids.iter().zip(kids.iter().skip(1)) {
                    if let Some(db) = b.done_step {
                        let da = a.done_step.ok_or_else(|| TestCaseError::fail("later child done before earlier"))?;
                        prop_assert!(da < db, "sequence children done at {da} and {db}");
                    }
                }
            }
            Predicate::Set { .. } if !n.is_done() && !n.is_failed() && !kids.is_empty() => {
                let lo = kids.iter().map(|k| k.reward).fold(f64::INFINITY, f64::min);
                let hi = kids.iter().map(|k| k.reward).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(n.reward >= lo - 1e-12 && n.reward <= hi + 1e-12, "set reward {} outside [{lo}, {hi}]", n.reward);
            }
            Predicate::Set { .. } if n.is_done() => prop_assert!(kids.iter().all(|k| k.is_done())),
            _ => {}
        }
    }
    Ok(())
}

fn c8_predicates() -> Outcome {
    let mut runner = TestRunner::new(PtConfig { cases: 256, failure_persistence: None, ..PtConfig::default() });
    runner
        .run(&(tree_strategy(), proptest::collection::vec(0usize..9, 1..40)), |(pred, trace)| {
            let mut w = world(vec![]);
            let mut t = PredicateTree::new(&pred, &w).unwrap();
            let mut latched = false;
            for k in trace {
                w.ee.pose.position = DVec3::from_array(GRID[k]);
                let (r, done) = t.evaluate(&w.clone(), &w).unwrap();
                prop_assert!(!latched || (done && r == 1.0), "success not latched");
                latched |= done;
                check_structure(&t)?;
            }
            Ok(())
        })
        .map_err(|e| format!("latch/sequence/set: {e}"))?;

    runner
        .run(&(tree_strategy(), proptest::collection::vec(0usize..9, 2..30), 0usize..30), |(pred, trace, touch_at)| {
            let mut w = world(vec![cube("o", 0.5, 0.5, 0.02)]);
            let guarded = Predicate::set(vec![pred, Predicate::NotTouching { obstacles: vec!["o".into()] }]);
            let mut t = PredicateTree::new(&guarded, &w).unwrap();
            let mut failed_at = None;
            for (i, k) in trace.into_iter().enumerate() {
                w.ee.pose.position = DVec3::from_array(GRID[k]);
                w.events.clear();
                if i == touch_at {
                    contact(&mut w, 0);
                }
                let was_done = t.success();
                let (r, done) = t.evaluate(&w.clone(), &w).unwrap();
                if was_done {
                    prop_assert!(done, "done root lost success");
                    continue;
                }
                if failed_at.is_some() {
                    prop_assert!(t.failed() && !done && r == 0.0, "failure not absorbing");
                }
                if i == touch_at {
                    prop_assert!(t.failed(), "contact did not fail the guard");
                    failed_at = Some(i);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("failure absorption: {e}"))?;
    Ok("latch, Sequence order, Set bounds and failure absorption hold over 2 x 256 random trees".into())
}

fn c9_stateless(cfg: &Config) -> Outcome {
    let tasks = ["stack", "sort", "swap", "rearrange", "follow_order", "swap_push", "sort_stack", "throw_sort", "balance", "rotate_restore"];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut notes = Vec::new();
    for (k, task) in tasks.iter().enumerate() {
        let inst = instantiate(task, 100 + k as u64, Split::Train).map_err(|e| e.to_string())?;
        let full = harness::run_episode(&inst, &mut OraclePolicy::new(cfg), cfg, RunOptions::new(cfg)).map_err(|e| e.to_string())?;
        ensure!(full.success && full.length > 2, "{task}: reference episode failed");
        let at = rng.gen_range(1..full.length);
        let o = harness::run_oracle_with_reset(&inst, cfg, at).map_err(|e| e.to_string())?;
        ensure!(o.success, "{task}: failed after rebuilding solvers at step {at}");
        notes.push(format!("{task}@{at}"));
    }
    Ok(format!("10/10 succeed after solver rebuild ({})", notes.join(" ")))
}

fn c10_language() -> Outcome {
    let mut skipped = Vec::new();
    let mut converted = 0;
    for t in TASKS.iter().filter(|t| t.level != Level::L2) {
        for seed in 100..105 {
            let inst = instantiate(t.name, seed, Split::Train).map_err(|e| e.to_string())?;
            match render_prompt(&inst, PromptMode::LanguageOnly) {
                Ok(p) => {
                    ensure!(!t.keystep_dependent, "{} converted", t.name);
                    ensure!(!p.text.contains("<img:"), "{}: image marker left in `{}`", t.name, p.text);
                    ensure!(p.segments.iter().all(|s| matches!(s, RenderedSegment::Text { .. })), "{}: image segment left", t.name);
                    converted += 1;
                }
                Err(Error::UnsupportedLanguageOnly(_)) => {
                    ensure!(t.keystep_dependent, "{} refused", t.name);
                    if seed == 100 {
                        skipped.push(t.name);
                    }
                }
                Err(e) => return Err(format!("{}: {e}", t.name)),
            }
        }
    }
    ensure!(skipped.len() == 6, "{} keystep tasks refused: {skipped:?}", skipped.len());
    Ok(format!("{converted} prompts converted; refused: {}", skipped.join(", ")))
}

fn c11_transport(cfg: &Config) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_skillbench");
    let cmd = format!("'{bin}' serve-oracle");
    let remote = Endpoint::Command { cmd: cmd.clone(), timeout_ms: 30_000 };
    let tasks = all_tasks();
    let (a, ea) = harness::evaluate(&Endpoint::Oracle, &tasks, 100..=101, Split::Train, workers(), cfg).map_err(|e| e.to_string())?;
    let (b, eb) = harness::evaluate(&remote, &tasks, 100..=101, Split::Train, workers(), cfg).map_err(|e| e.to_string())?;
    ensure!(b.errors.is_empty(), "protocol errors: {:?}", b.errors);
    ensure!(a == b, "metrics differ: {:?} vs {:?}", a.overall, b.overall);
    for (x, y) in ea.iter().zip(&eb) {
        ensure!(
            x.length == y.length && x.total_reward.to_bits() == y.total_reward.to_bits() && x.solvers == y.solvers,
            "{} seed {} differs",
            x.task,
            x.seed
        );
    }
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for task in ["pick", "stack", "throw_sort", "follow_order"] {
        let inst = instantiate(task, 100, Split::Train).map_err(|e| e.to_string())?;
        let local = harness::run_episode(&inst, &mut OraclePolicy::new(cfg), cfg, RunOptions::recording(cfg)).map_err(|e| e.to_string())?;
        let mut sub = SubprocessPolicy::new(&cmd, 30_000);
        let far = harness::run_episode(&inst, &mut sub, cfg, RunOptions::recording(cfg)).map_err(|e| e.to_string())?;
        let (da, db) = (tmp.path().join(format!("{task}_a")), tmp.path().join(format!("{task}_b")));
        write_episode(&da, local.record.as_ref().unwrap()).map_err(|e| e.to_string())?;
        write_episode(&db, far.record.as_ref().unwrap()).map_err(|e| e.to_string())?;
        ensure!(hash_dir(&da) == hash_dir(&db), "{task}: episode bytes differ");
    }
    let (r, _) = harness::evaluate(&Endpoint::Random, &["pick".to_string()], 0..=99, Split::Train, workers(), cfg).map_err(|e| e.to_string())?;
    ensure!(r.overall.success_rate <= 5.0, "random pick success {}%", r.overall.success_rate);
    Ok(format!(
        "subprocess = in-process on {} episodes (suc {:.1}%, AR {:.3}); 4 recorded episodes byte-identical; random pick {:.1}%",
        eb.len(),
        b.overall.success_rate,
        b.overall.ar,
        r.overall.success_rate
    ))
}

fn c12_composition(eps: &[EpisodeOutcome]) -> Outcome {
    let mut lengths: BTreeMap<Level, (usize, usize)> = BTreeMap::new();
    for e in eps.iter().filter(|e| e.success) {
        let l = lengths.entry(e.level).or_default();
        l.0 += 1;
        l.1 += e.length;
        if e.level != Level::L0 {
            ensure!(e.solvers.len() >= 2, "{} seed {} used only {:?}", e.task, e.seed, e.solvers);
        }
        if e.task == "throw_sort" {
            ensure!(e.solvers.iter().any(|s| s == "Hit"), "throw_sort seed {} never threw", e.seed);
        }
    }
    let mean = |l: Level| lengths.get(&l).map_or(0.0, |(n, s)| *s as f64 / *n as f64);
    let (l0, l1, l2) = (mean(Level::L0), mean(Level::L1), mean(Level::L2));
    ensure!(l2 > l1 && l1 > l0, "mean lengths L0 {l0:.1}, L1 {l1:.1}, L2 {l2:.1}");
    Ok(format!("every L1/L2 episode uses >= 2 solvers; mean length L0 {l0:.1} < L1 {l1:.1} < L2 {l2:.1}"))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let cfg = Config::default();
    let oracle = oracle_run(&cfg);
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    match &oracle {
        Ok((eps, secs)) => results.push(("oracle completeness", guarded(|| c1_oracle(eps, *secs)))),
        Err(e) => results.push(("oracle completeness", Err(e.clone()))),
    }
    results.push(("success-criteria fidelity", guarded(c2_scenarios)));
    results.push(("determinism", guarded(|| c3_determinism(&cfg))));
    results.push(("planner soundness", guarded(|| c4_planner(&cfg))));
    results.push(("ballistics", guarded(|| c5_ballistics(&cfg))));
    results.push(("balance", guarded(|| c6_balance(&cfg))));
    results.push(("dataset round-trip", guarded(c7_roundtrip)));
    results.push(("predicate properties", guarded(c8_predicates)));
    results.push(("statelessness", guarded(|| c9_stateless(&cfg))));
    results.push(("language-only conversion", guarded(c10_language)));
    results.push(("harness equivalence", guarded(|| c11_transport(&cfg))));
    match &oracle {
        Ok((eps, _)) => results.push(("compositional structure", guarded(|| c12_composition(eps)))),
        Err(e) => results.push(("compositional structure", Err(e.clone()))),
    }
    let mut failed = 0;
    for (k, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
