use std::collections::BTreeSet;
use std::fs;
use std::process::Command;

use skillbench::config::Config;
use skillbench::harness::{self, Endpoint, OraclePolicy, RunOptions, SubprocessPolicy};
use skillbench::predicates::PredicateTree;
use skillbench::recorder::{read_episode, write_episode};
use skillbench::solvers::Oracle;
use skillbench::tasks::{instantiate, Split};
use skillbench::world::WorldState;

const BIN: &str = env!("CARGO_BIN_EXE_skillbench");

const SIX_DIM: &str = r#"while read l; do case "$l" in *hello*|*reset*) echo '{"type":"ready"}';; *) echo '{"type":"act","action":[0,0,0,0,0,0]}';; esac; done"#;

#[test]
fn zero_policy_keeps_world_still() {
    let cfg = Config::default();
    let inst = instantiate("pick", 3, Split::Train).unwrap();
    let mut p = SubprocessPolicy::new(&format!("'{BIN}' serve-zero"), 10_000);
    let opts = RunOptions { record: true, max_steps: 25 };
    let o = harness::run_episode(&inst, &mut p, &cfg, opts).unwrap();
    assert!(o.error.is_none(), "{:?}", o.error);
    assert_eq!(o.length, 25);
    let rec = o.record.unwrap();
    assert!(rec.actions.iter().all(|a| a.iter().all(|&v| v == 0.0)));
    assert!(rec.frames.iter().all(|f| f.iter().all(|img| img == &f[0])));
    assert!(!rec.meta.success);
}

#[test]
fn short_action_is_protocol_error() {
    let cfg = Config::default();
    let inst = instantiate("pick", 0, Split::Train).unwrap();
    let mut p = SubprocessPolicy::new(SIX_DIM, 5_000);
    let o = harness::run_episode(&inst, &mut p, &cfg, RunOptions::new(&cfg)).unwrap();
    assert!(o.error.as_deref().is_some_and(|e| e.contains("6 components")), "{:?}", o.error);
    assert_eq!(o.length, 0);
    assert!(!o.success);
}

#[test]
fn crashing_policy_fails_only_its_episodes() {
    let cfg = Config::default();
    let tasks = vec!["pick".to_string(), "touch".to_string()];
    let crash = Endpoint::Command { cmd: "exit 3".into(), timeout_ms: 2_000 };
    let (m, eps) = harness::evaluate(&crash, &tasks, 0..=2, Split::Train, 3, &cfg).unwrap();
    assert_eq!(eps.len(), 6);
    assert_eq!(m.errors.len(), 6);
    assert_eq!(m.overall.success_rate, 0.0);
    assert_eq!(m.overall.ar, 0.0);

    let (ok, _) = harness::evaluate(&Endpoint::Oracle, &tasks, 0..=2, Split::Train, 3, &cfg).unwrap();
    assert_eq!(ok.overall.success_rate, 100.0);
    assert!((ok.overall.rs * ok.overall.mean_length - ok.overall.ar).abs() < 1e-6);
}

#[test]
fn generation_accounting_and_stats() {
    let cfg = Config::default();
    let tmp = tempfile::tempdir().unwrap();
    let rep = harness::generate(&["pick".into(), "stack".into()], 0..=9, Split::Train, tmp.path(), 4, &cfg).unwrap();
    assert_eq!(rep.attempted, 20);
    assert_eq!(rep.attempted, rep.written + rep.discarded);
    assert_eq!(rep.written, 20);
    for seed in 0..=9 {
        assert!(tmp.path().join("pick").join(format!("traj_{seed}")).join("meta.json").is_file());
    }
    let (n, bad) = harness::inspect(tmp.path()).unwrap();
    assert_eq!((n, bad.len()), (20, 0));

    let st = harness::stats(tmp.path()).unwrap();
    assert_eq!(st.episodes, 20);
    for k in 0..7 {
        let lim = match k {
            0..=2 => cfg.world.max_translation,
            3..=5 => cfg.world.max_rotation,
            _ => 1.0,
        };
        assert!(st.min[k] >= -lim as f32 as f64 && st.max[k] <= lim as f32 as f64, "dim {k}: {} {}", st.min[k], st.max[k]);
    }
    assert!(st.mean_length["stack"] > st.mean_length["pick"]);
    assert_eq!(st.lengths["pick"].values().sum::<usize>(), 10);
}

#[test]
fn zero_episode_stats_are_zero() {
    let cfg = Config::default();
    let tmp = tempfile::tempdir().unwrap();
    let inst = instantiate("touch", 1, Split::Train).unwrap();
    let mut p = SubprocessPolicy::new(&format!("'{BIN}' serve-zero"), 10_000);
    let o = harness::run_episode(&inst, &mut p, &cfg, RunOptions { record: true, max_steps: 5 }).unwrap();
    write_episode(&tmp.path().join("touch/traj_1"), o.record.as_ref().unwrap()).unwrap();
    let st = harness::stats(tmp.path()).unwrap();
    assert_eq!((st.min, st.max, st.mean), ([0.0; 7], [0.0; 7], [0.0; 7]));
}

#[test]
fn annotations_and_keysteps_follow_the_predicate_report() {
    let cfg = Config::default();
    for (task, seed) in [("stack", 4), ("follow_order", 2), ("sort", 5)] {
        let inst = instantiate(task, seed, Split::Train).unwrap();
        let rec = harness::run_episode(&inst, &mut OraclePolicy::new(&cfg), &cfg, RunOptions::recording(&cfg)).unwrap().record.unwrap();

        // replay the oracle, tracking the active node and leaf completions
        let mut w = WorldState::reset(&inst.scene, &cfg.world).unwrap();
        let mut tree = PredicateTree::with_rotation_weight(&inst.predicate, &w, cfg.pose_rotation_weight).unwrap();
        let mut oracle = Oracle::new(&cfg);
        let mut nodes = Vec::new();
        while !tree.success() && !tree.failed() {
            let a = oracle.act(&w, &tree);
            nodes.push(oracle.last_step().unwrap().node);
            let prev = w.clone();
            w.step(&a).unwrap();
            tree.evaluate(&prev, &w).unwrap();
        }
        assert_eq!(nodes.len(), rec.len());
        for i in 1..nodes.len() {
            let node_changed = nodes[i] != nodes[i - 1];
            let text_changed = rec.annotations[i].subtask != rec.annotations[i - 1].subtask;
            assert_eq!(node_changed, text_changed, "{task} step {i}");
        }
        let done: BTreeSet<usize> = tree
            .nodes
            .iter()
            .filter(|n| n.children.is_empty())
            .filter_map(|n| n.done_step.map(|s| s - 1))
            .collect();
        assert_eq!(rec.keysteps.iter().copied().collect::<BTreeSet<_>>(), done, "{task}");
        assert!(rec.annotations.iter().all(|a| a.task == rec.meta.prompt.text));
    }
}

#[test]
fn pick_step_annotation_names_the_object() {
    let cfg = Config::default();
    let inst = instantiate("pick", 0, Split::Train).unwrap();
    let rec = harness::run_episode(&inst, &mut OraclePolicy::new(&cfg), &cfg, RunOptions::recording(&cfg)).unwrap().record.unwrap();
    let first = &rec.annotations[0];
    assert!(first.subtask.starts_with("pick up "), "{first:?}");
    assert!(first.step.starts_with("moving towards "), "{first:?}");
    assert_eq!(first.step["moving towards ".len()..], first.subtask["pick up ".len()..]);
    assert!(rec.annotations.iter().any(|a| a.step == "closing gripper"));
}

#[test]
fn cli_round_trip_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let run = |args: &[&str]| Command::new(BIN).args(args).output().unwrap();

    let g = run(&["gen-data", "--tasks", "pick", "--seeds", "1..2", "--out", out.to_str().unwrap(), "--workers", "2"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    assert!(String::from_utf8_lossy(&g.stdout).contains("attempted 2 written 2 discarded 0"));
    assert!(run(&["inspect", out.to_str().unwrap()]).status.success());

    let ep = out.join("pick/traj_1");
    let rec = read_episode(&ep).unwrap();
    let p = ep.join("actions.cskt");
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    let bad = run(&["inspect", out.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("actions.cskt"));
    write_episode(&ep, &rec).unwrap();

    let list = run(&["list-tasks"]);
    assert_eq!(String::from_utf8_lossy(&list.stdout).lines().count(), 33);

    let e = run(&["eval", "--policy", &format!("cmd:{SIX_DIM}"), "--level", "pick", "--seeds", "0..0"]);
    assert_eq!(e.status.code(), Some(2));
    let j = run(&["eval", "--policy", "oracle", "--level", "L0", "--seeds", "0..1", "--format", "json"]);
    assert!(j.status.success());
    let v: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert_eq!(v["overall"]["success_rate"], 100.0);

    let r = run(&["render", "--task", "novel_noun", "--seed", "3", "--out", tmp.path().join("r").to_str().unwrap()]);
    assert!(r.status.success());
    assert!(tmp.path().join("r/base.ppm").is_file() && tmp.path().join("r/prompt_assets/00.ppm").is_file());
    let s = run(&["solve", "--task", "swap", "--seed", "5", "--record", tmp.path().join("s").to_str().unwrap()]);
    assert!(s.status.success());
    assert!(read_episode(&tmp.path().join("s")).unwrap().meta.success);
}
