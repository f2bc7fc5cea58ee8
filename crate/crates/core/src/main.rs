use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use skillbench::config::Config;
use skillbench::error::Error;
use skillbench::harness::{self, Endpoint, OraclePolicy, RunOptions, DEFAULT_TIMEOUT_MS};
use skillbench::recorder::{self, prompt_asset_names};
use skillbench::render::{prompt_asset_images, render_frame};
use skillbench::tasks::{instantiate, render_prompt, PromptMode, Split, TASKS};
use skillbench::world::WorldState;

#[derive(Parser)]
#[command(name = "skillbench", version, about = "Tabletop manipulation benchmark: tasks, oracle, datasets and policy evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// List the task suite.
    ListTasks,
    /// Generate oracle episodes.
    GenData {
        /// Comma list of task names or levels (L0, L1, L2, all).
        #[arg(long, default_value = "all")]
        tasks: String,
        /// Inclusive seed range a..b.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the oracle on one instance.
    Solve {
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Write the episode to this directory.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Evaluate a policy: oracle, random or cmd:<shell command>.
    Eval {
        #[arg(long, default_value = "oracle")]
        policy: String,
        /// Comma list of task names or levels (L0, L1, L2, all).
        #[arg(long, default_value = "all")]
        level: String,
        #[arg(long, default_value = "0..19")]
        seeds: String,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Per-step reply timeout for command policies.
        #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
        timeout_ms: u64,
    },
    /// Validate every episode directory under DIR.
    Inspect { dir: PathBuf },
    /// Action ranges and episode lengths of a dataset.
    Stats { dir: PathBuf },
    /// Render the initial scene, prompt and prompt images of an instance.
    Render {
        #[arg(long)]
        task: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the oracle over the policy protocol on stdin/stdout.
    #[command(hide = true)]
    ServeOracle,
    /// Serve a policy that always answers with zero actions.
    #[command(hide = true)]
    ServeZero,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = Config::from_env()?;
    match cli.cmd {
        Cmd::ListTasks => {
            for t in TASKS {
                println!("{:<22} {}{}", t.name, t.level.name(), if t.keystep_dependent { "  keystep" } else { "" });
            }
        }
        Cmd::GenData { tasks, seeds, split, out, workers } => {
            let tasks = harness::select_tasks(&tasks)?;
            let rep = harness::generate(&tasks, harness::parse_seeds(&seeds)?, split, &out, workers, &cfg)?;
            println!("attempted {} written {} discarded {}", rep.attempted, rep.written, rep.discarded);
            for (t, s, why) in &rep.failures {
                println!("  discarded {t} seed {s}: {why}");
            }
        }
        Cmd::Solve { task, seed, split, record } => {
            let inst = instantiate(&task, seed, split)?;
            let mut p = OraclePolicy::new(&cfg);
            let opts = if record.is_some() { RunOptions::recording(&cfg) } else { RunOptions::new(&cfg) };
            let o = harness::run_episode(&inst, &mut p, &cfg, opts)?;
            println!(
                "{task} seed {seed}: success {} length {} reward {:.3} solvers {}",
                o.success,
                o.length,
                o.total_reward,
                o.solvers.join(",")
            );
            if let (Some(dir), Some(rec)) = (record, &o.record) {
                recorder::write_episode(&dir, rec)?;
            }
            if !o.success {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Eval { policy, level, seeds, split, format, workers, timeout_ms } => {
            let endpoint = Endpoint::parse(&policy, timeout_ms)?;
            let tasks = harness::select_tasks(&level)?;
            let (m, _) = harness::evaluate(&endpoint, &tasks, harness::parse_seeds(&seeds)?, split, workers, &cfg)?;
            match format {
                Format::Table => print!("{}", m.table()),
                Format::Json => println!("{}", serde_json::to_string_pretty(&m)?),
            }
            for e in &m.errors {
                eprintln!("error: {e}");
            }
            if !m.errors.is_empty() {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Inspect { dir } => {
            let (n, bad) = harness::inspect(&dir)?;
            for (d, e) in &bad {
                println!("{}: {e}", d.display());
            }
            println!("{n} episodes, {} invalid", bad.len());
            if !bad.is_empty() || n == 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Stats { dir } => {
            let s = harness::stats(&dir)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Render { task, seed, split, out } => {
            let inst = instantiate(&task, seed, split)?;
            let w = WorldState::reset(&inst.scene, &cfg.world)?;
            fs::create_dir_all(out.join("prompt_assets")).with_context(|| format!("creating {}", out.display()))?;
            for cam in harness::cameras() {
                write(&out.join(format!("{}.ppm", cam.id.name())), &render_frame(&w, &cam).to_ppm())?;
            }
            let prompt = render_prompt(&inst, PromptMode::Multimodal)?;
            for (name, img) in prompt_asset_names(&prompt).iter().zip(prompt_asset_images(&inst, &cfg.world)?) {
                write(&out.join(name), &img.to_ppm())?;
            }
            write(&out.join("prompt.txt"), format!("{}\n", prompt.text).as_bytes())?;
            println!("{}", prompt.text);
        }
        Cmd::ServeOracle => harness::serve(true, &cfg, io::stdin().lock(), io::stdout().lock())?,
        Cmd::ServeZero => harness::serve(false, &cfg, io::stdin().lock(), io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Integrity { .. } | Error::Parse { .. } | Error::Protocol(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
