//! Command-line entry point: train, evaluate, sweep, export, verify.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nfpo::config::TrainConfig;
use nfpo::runner::{self, EvalOptions};

#[derive(Parser)]
#[command(
    name = "nfpo",
    version,
    about = "Normalizing-flow policies under the PPO clipped objective: training, evaluation, ablation sweeps, checkpoint export and numeric verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint and export trajectories
    Eval(EvalArgs),
    /// Run an ablation sweep over one config axis
    Sweep(SweepArgs),
    /// Export a checkpoint's architecture and parameter summary as JSON
    Export(ExportArgs),
    /// Run the independent numeric oracle suite (64-bit)
    Verify,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set ppo.norm_mode=none (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (must be empty or absent)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file to evaluate
    checkpoint: PathBuf,
    /// Number of evaluation episodes
    #[arg(long)]
    episodes: Option<usize>,
    /// Sampling temperature (0 = deterministic deployment action)
    #[arg(long)]
    temperature: Option<f64>,
    /// Evaluation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides applied on the embedded snapshot (e.g. eval.fixed_start=false)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory for eval outputs (default: print the report only)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Config key to sweep, e.g. ppo.l or ppo.norm_mode
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. 0.1,0.5,1.0
    #[arg(long)]
    values: String,
    /// Comma-separated seeds (default 1)
    #[arg(long, default_value = "1")]
    seed: String,
    /// Sweep root directory
    #[arg(long)]
    out: PathBuf,
    /// Run up to N sweep jobs as independent child processes
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint file to export
    checkpoint: PathBuf,
    /// Output JSON path (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|entry| {
            entry
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .with_context(|| format!("--set {entry:?} is not KEY=VALUE"))
        })
        .collect()
}

fn load_config(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut overrides = parse_sets(sets)?;
    if let Some(seed) = seed {
        overrides.push(("run.seed".into(), seed.to_string()));
    }
    Ok(TrainConfig::load(path, &overrides)?)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.set, args.seed)?;
    let out = runner::train(cfg, Some(&args.out))?;
    let s = &out.summary;
    println!(
        "run complete: {} updates, {} env steps, final return {:?}, instability {}",
        s.updates, s.env_steps, s.final_return, s.instability
    );
    if let Some(event) = &s.event {
        println!("instability event: {event} (run kept as an early stop)");
    }
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = nfpo::checkpoint::Checkpoint::load(&args.checkpoint)?;
    let mut cfg = TrainConfig::from_toml_str(&ckpt.run.config_toml)?;
    if !args.set.is_empty() {
        // Re-apply overrides on top of the embedded snapshot.
        let tmp = NamedTemp::write(&cfg)?;
        cfg = TrainConfig::load(Some(tmp.path()), &parse_sets(&args.set)?)?;
    }
    let opts = EvalOptions {
        episodes: args.episodes.unwrap_or(cfg.eval.episodes),
        temperature: args.temperature.unwrap_or(cfg.eval.temperature),
        fixed_start: cfg.eval.fixed_start,
        seed: args.seed.unwrap_or(cfg.run.seed),
    };
    let store = ckpt.to_store()?;
    let agent =
        nfpo::policy::Agent::bind(ckpt.arch.policy.clone(), &ckpt.arch.critic_hidden, store)?;
    let report = runner::evaluate_agent(&agent, &cfg.env, &opts)?;
    println!(
        "episodes {}  success rate {:.3}  mean return {:.3}  mean length {:.1}",
        report.episodes, report.success_rate, report.mean_return, report.mean_length
    );
    println!(
        "goal counts {:?}  coverage {} (threshold 10)  count entropy {:.4}",
        report.coverage.counts, report.coverage.coverage, report.coverage.count_entropy
    );
    if let Some(out) = &args.out {
        runner::write_trajectories_csv(&out.join("eval/trajectories.csv"), &report)?;
        let json = serde_json::json!({
            "episodes": report.episodes,
            "success_rate": report.success_rate,
            "mean_return": report.mean_return,
            "mean_length": report.mean_length,
            "goal_counts": report.coverage.counts,
            "coverage": report.coverage.coverage,
            "count_entropy": report.coverage.count_entropy,
        });
        std::fs::write(
            out.join("eval/report.json"),
            serde_json::to_string_pretty(&json)?,
        )?;
        println!(
            "trajectories in {}",
            out.join("eval/trajectories.csv").display()
        );
    }
    Ok(())
}

struct NamedTemp {
    path: PathBuf,
}

impl NamedTemp {
    fn write(cfg: &TrainConfig) -> Result<Self> {
        let path = std::env::temp_dir().join(format!(
            "nfpo-cfg-{}-{:x}.toml",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        ));
        std::fs::write(&path, cfg.to_canonical_toml())?;
        Ok(NamedTemp { path })
    }

    fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for NamedTemp {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

struct SweepJob {
    value: String,
    seed: u64,
    dir: PathBuf,
    config_path: PathBuf,
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let values: Vec<String> = args
        .values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if values.is_empty() {
        bail!("--values must contain at least one value");
    }
    let seeds: Vec<u64> = args
        .seed
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<u64>().with_context(|| format!("bad seed {v:?}")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("--seed must contain at least one seed");
    }

    std::fs::create_dir_all(args.out.join("_configs"))?;
    let mut jobs = Vec::new();
    for value in &values {
        for &seed in &seeds {
            let mut overrides = parse_sets(&args.set)?;
            overrides.push((args.axis.clone(), value.clone()));
            overrides.push(("run.seed".into(), seed.to_string()));
            let cfg = TrainConfig::load(args.config.as_deref(), &overrides)
                .with_context(|| format!("axis {}={value}, seed {seed}", args.axis))?;
            let slug: String = value
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '_' })
                .collect();
            let dir = args.out.join(format!("{slug}_s{seed}"));
            let config_path = args
                .out
                .join("_configs")
                .join(format!("{slug}_s{seed}.toml"));
            std::fs::write(&config_path, cfg.to_canonical_toml())?;
            jobs.push(SweepJob {
                value: value.clone(),
                seed,
                dir,
                config_path,
            });
        }
    }

    let mut rows: Vec<(String, u64, Option<f64>, bool)> = Vec::new();
    match args.parallel {
        Some(n) if n > 1 => {
            let exe = std::env::current_exe()?;
            for chunk in jobs.chunks(n) {
                let mut children = Vec::new();
                for job in chunk {
                    let child = Process::new(&exe)
                        .arg("train")
                        .arg("--config")
                        .arg(&job.config_path)
                        .arg("--out")
                        .arg(&job.dir)
                        .stdout(std::process::Stdio::null())
                        .spawn()
                        .with_context(|| format!("spawning job {}", job.dir.display()))?;
                    children.push((job, child));
                }
                for (job, mut child) in children {
                    let status = child.wait()?;
                    if !status.success() {
                        eprintln!(
                            "job {} failed ({status}); sweep continues",
                            job.dir.display()
                        );
                    }
                    rows.push(read_job_result(job));
                }
            }
        }
        _ => {
            for job in &jobs {
                let cfg = TrainConfig::from_toml_str(&std::fs::read_to_string(&job.config_path)?)?;
                if let Err(e) = runner::train(cfg, Some(&job.dir)) {
                    eprintln!("job {} failed: {e}; sweep continues", job.dir.display());
                }
                rows.push(read_job_result(job));
            }
        }
    }

    let mut summary_csv = String::from("value,seed,final_return,instability\n");
    for (value, seed, ret, inst) in &rows {
        summary_csv.push_str(&format!(
            "{value},{seed},{},{inst}\n",
            ret.map_or(String::new(), |r| format!("{r}"))
        ));
    }
    std::fs::write(args.out.join("summary.csv"), &summary_csv)?;

    println!(
        "{:>12} {:>10} {:>10} {:>10}  n",
        "value", "mean", "ci95_lo", "ci95_hi"
    );
    for value in &values {
        let returns: Vec<f64> = rows
            .iter()
            .filter(|(v, _, r, _)| v == value && r.is_some())
            .map(|(_, _, r, _)| r.unwrap())
            .collect();
        if returns.is_empty() {
            println!("{value:>12} {:>10} {:>10} {:>10}  0", "-", "-", "-");
            continue;
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let half = 1.96 * (var / n).sqrt();
        println!(
            "{value:>12} {mean:>10.3} {:>10.3} {:>10.3}  {}",
            mean - half,
            mean + half,
            returns.len()
        );
    }
    println!("sweep outputs in {}", args.out.display());
    Ok(())
}

fn read_job_result(job: &SweepJob) -> (String, u64, Option<f64>, bool) {
    let parsed: Option<serde_json::Value> =
        std::fs::read_to_string(job.dir.join("summary.json"))
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok());
    match parsed {
        Some(v) => (
            job.value.clone(),
            job.seed,
            v.get("final_return").and_then(|r| r.as_f64()),
            v.get("instability")
                .and_then(|b| b.as_bool())
                .unwrap_or(false),
        ),
        None => (job.value.clone(), job.seed, None, false),
    }
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let ckpt = nfpo::checkpoint::Checkpoint::load(&args.checkpoint)?;
    let params: Vec<serde_json::Value> = ckpt
        .tensors
        .iter()
        .map(|(name, t)| {
            let l2: f64 = t
                .data()
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            serde_json::json!({
                "name": name,
                "shape": t.shape(),
                "numel": t.len(),
                "l2": l2,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "format_version": 1,
        "arch": ckpt.arch,
        "run": {
            "update": ckpt.run.update,
            "env_steps": ckpt.run.env_steps,
            "seed": ckpt.run.seed,
            "lr": ckpt.run.lr(),
            "instability": ckpt.run.instability,
        },
        "param_entries": params.len(),
        "params": params,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, text)?;
            println!("exported to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let results = nfpo::verify::run_all()?;
    let mut failures = 0;
    for r in &results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] {:<52} measured {:>12.3e}  tolerance {:>9.1e}  ({})",
            r.name, r.measured, r.tolerance, r.detail
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} verification check(s) failed");
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Export(args) => cmd_export(args),
        Command::Verify => cmd_verify(),
    }
}
