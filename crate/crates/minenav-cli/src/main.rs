//! `minenav`: train, resume, evaluate and render from one binary.
//!
//! Every run is driven by a config file (`minenav config --print-defaults`
//! shows the grammar and the default values) plus a handful of flags.
//! Checkpoints embed the full canonical config, so `resume` and `eval`
//! need nothing but the checkpoint path.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use minenav::config::{parse_config, parse_config_file, process_env_overrides, RunConfig};
use minenav::error::{Error, Result};
use minenav::eval::{
    compute_metrics, export_trajectory_csv, format_metrics_kv, format_metrics_table,
    parse_metrics_log, parse_trajectory_csv, render_curves_svg, render_trajectory_svg,
    run_inference, CurveSeries, EvalOptions,
};
use minenav::trainer::{checkpoint_config_text, Sinks, Stage, Trainer};
use minenav::world::{build_world, EnvVariant};

#[derive(Parser)]
#[command(
    name = "minenav",
    version,
    about = "Tunnel search-and-follow: two-stage training, evaluation and plots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file (defaults apply when omitted)
    Train(TrainArgs),
    /// Continue an interrupted run from its checkpoint
    Resume(ResumeArgs),
    /// Run inference episodes against a checkpoint and report metrics
    Eval(EvalArgs),
    /// Render a trajectory CSV or a metrics log to SVG
    Render(RenderArgs),
    /// Inspect or validate configuration files
    Config(ConfigArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; every omitted key keeps its default
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding train.out_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train both agents from step zero, skipping the stage gate
    #[arg(long)]
    simultaneous_baseline: bool,
    /// Zero both curiosity strengths (ablation arm)
    #[arg(long)]
    no_icm: bool,
    /// Mirror metrics lines to stdout
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ResumeArgs {
    /// Checkpoint written by a previous train run
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory, overriding the one embedded in the checkpoint
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mirror metrics lines to stdout
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint holding the policies and their config
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode count, overriding eval.episodes
    #[arg(long)]
    episodes: Option<usize>,
    /// Re-base the scene on a named layout (original, complex,
    /// short_corridor, short_fork) before evaluating
    #[arg(long)]
    variant: Option<String>,
    /// Worker threads, overriding eval.workers; results are identical to
    /// a single-threaded run
    #[arg(long)]
    workers: Option<usize>,
    /// Evaluation seed; defaults to the run's train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Sample actions instead of taking the policy mode
    #[arg(long)]
    stochastic: bool,
    /// Directory for the metrics summary and saved trajectories
    #[arg(long)]
    out: Option<PathBuf>,
    /// How many episode trajectories to save under --out
    #[arg(long, default_value_t = 0)]
    trajectories: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RenderMode {
    /// Top-down scene with agent paths, from trajectory CSVs
    Trajectory,
    /// Return curves over training steps, from metrics logs
    Curves,
}

#[derive(Args)]
struct RenderArgs {
    /// Input file; repeat to overlay several
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: RenderMode,
    /// Output SVG path
    #[arg(long)]
    out: PathBuf,
    /// Scene layout for trajectory mode
    #[arg(long, default_value = "original")]
    variant: String,
    /// Scene seed for trajectory mode (matters only with obstacle jitter)
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print the full default config in canonical form
    #[arg(long, conflicts_with = "check")]
    print_defaults: bool,
    /// Parse and validate a config file, printing its fingerprint
    #[arg(long)]
    check: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Resume(args) => cmd_resume(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Render(args) => cmd_render(args),
        Command::Config(args) => cmd_config(args),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::File(format!("cannot write {}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::File(format!("cannot read {}: {e}", path.display())))
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::File(format!("cannot create {}: {e}", path.display())))
}

/// Drive a trainer to completion, writing metrics, gate report, periodic
/// and final checkpoints under `out_dir`. Metrics append so a resumed run
/// continues the same file.
fn run_to_completion(trainer: &mut Trainer, out_dir: &Path, verbose: bool) -> Result<()> {
    make_dir(out_dir)?;
    let metrics_path = out_dir.join("metrics.log");
    let metrics_file = fs::File::options()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .map_err(|e| Error::File(format!("cannot open {}: {e}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(metrics_file);
    let mut gate_buf: Vec<u8> = Vec::new();
    let outcome = {
        let mut sinks = Sinks {
            metrics: Some(&mut metrics),
            gate_report: Some(&mut gate_buf),
            checkpoint_dir: Some(out_dir.to_path_buf()),
            verbose,
        };
        trainer.run(&mut sinks)
    };
    metrics.flush().map_err(Error::Io)?;
    if !gate_buf.is_empty() {
        write_file(&out_dir.join("gate_report.txt"), &gate_buf)?;
    }
    // keep the end state either way; a timed-out run is still inspectable
    trainer.save_checkpoint(&out_dir.join("checkpoint_final.mnckpt"))?;
    outcome?;
    println!(
        "done stage={} steps={} updates={} out={}",
        trainer.stage,
        trainer.global_step,
        trainer.updates,
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let overrides = process_env_overrides();
    let mut cfg = match &args.config {
        Some(path) => parse_config_file(path, &overrides)?,
        None => parse_config("", &overrides)?,
    };
    if let Some(seed) = args.seed {
        cfg.settings.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    if args.no_icm {
        cfg.uav.icm.strength = 0.0;
        cfg.ugv.icm.strength = 0.0;
    }
    cfg.validate()?;

    let text = cfg.canonical_text();
    let out_dir = PathBuf::from(&cfg.out_dir);
    make_dir(&out_dir)?;
    write_file(&out_dir.join("config.txt"), text.as_bytes())?;

    let mut trainer = Trainer::new(
        cfg.env.clone(),
        cfg.gate,
        cfg.uav.clone(),
        cfg.ugv.clone(),
        cfg.settings.clone(),
        args.simultaneous_baseline,
        text,
    )?;
    println!(
        "training seed={} instances={} config={}",
        cfg.settings.master_seed,
        cfg.settings.num_instances,
        &trainer.config_hash[..12]
    );
    run_to_completion(&mut trainer, &out_dir, args.verbose)
}

fn cmd_resume(args: ResumeArgs) -> Result<()> {
    let text = checkpoint_config_text(&args.checkpoint)?;
    let cfg = parse_config(&text, &[])?;
    let mut trainer = Trainer::load_checkpoint(
        &args.checkpoint,
        cfg.env.clone(),
        cfg.gate,
        cfg.uav.clone(),
        cfg.ugv.clone(),
        cfg.settings.clone(),
        text,
    )?;
    if trainer.stage == Stage::Done {
        println!("run already complete at step {}", trainer.global_step);
        return Ok(());
    }
    let out_dir = args.out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    println!(
        "resuming stage={} step={} out={}",
        trainer.stage,
        trainer.global_step,
        out_dir.display()
    );
    run_to_completion(&mut trainer, &out_dir, args.verbose)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let text = checkpoint_config_text(&args.checkpoint)?;
    let cfg = parse_config(&text, &[])?;
    let trainer = Trainer::load_checkpoint(
        &args.checkpoint,
        cfg.env.clone(),
        cfg.gate,
        cfg.uav.clone(),
        cfg.ugv.clone(),
        cfg.settings.clone(),
        text,
    )?;

    let mut env_cfg = cfg.env.clone();
    if let Some(name) = &args.variant {
        env_cfg.variant = EnvVariant::by_name(name).ok_or_else(|| {
            Error::Usage(format!(
                "unknown variant {name:?}; expected original, complex, short_corridor or short_fork"
            ))
        })?;
    }
    // full-mission protocol: the drone freezes at the target and the
    // episode only succeeds once the ground vehicle arrives
    env_cfg.uav_arrive_ends_episode = false;

    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    let options = EvalOptions {
        deterministic: !args.stochastic && cfg.eval_deterministic,
        workers: args.workers.unwrap_or(cfg.eval_workers),
    };
    let seed = args.seed.unwrap_or(cfg.settings.master_seed);

    let records = run_inference(&trainer.uav.net, &trainer.ugv.net, &env_cfg, episodes, seed, options)?;
    let metrics = compute_metrics(&records)?;
    print!("{}", format_metrics_table(&metrics));

    if let Some(dir) = &args.out {
        make_dir(dir)?;
        write_file(&dir.join("metrics.txt"), format_metrics_kv(&metrics).as_bytes())?;
        for record in records.iter().take(args.trajectories) {
            let name = format!("traj_{:04}.csv", record.seed % 10_000);
            export_trajectory_csv(record, &dir.join(name))?;
        }
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let svg = match args.mode {
        RenderMode::Trajectory => {
            let mut records = Vec::new();
            for path in &args.input {
                records.push(parse_trajectory_csv(&read_file(path)?)?);
            }
            let variant = EnvVariant::by_name(&args.variant).ok_or_else(|| {
                Error::Usage(format!("unknown variant {:?}", args.variant))
            })?;
            let world = build_world(&variant, args.world_seed)?;
            render_trajectory_svg(&world, &records)
        }
        RenderMode::Curves => {
            let mut series = Vec::new();
            for path in &args.input {
                let text = read_file(path)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                for agent in ["uav", "ugv"] {
                    let points = parse_metrics_log(&text, agent)?;
                    if points.is_empty() {
                        continue;
                    }
                    let label = if args.input.len() == 1 {
                        agent.to_string()
                    } else {
                        format!("{stem} {agent}")
                    };
                    series.push(CurveSeries { label, points });
                }
            }
            if series.is_empty() {
                return Err(Error::Usage("no plottable series in the inputs".into()));
            }
            render_curves_svg(&series)
        }
    };
    write_file(&args.out, svg.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_config(args: ConfigArgs) -> Result<()> {
    if args.print_defaults {
        print!("{}", RunConfig::default().canonical_text());
        return Ok(());
    }
    if let Some(path) = &args.check {
        let cfg = parse_config_file(path, &process_env_overrides())?;
        println!("ok {}", cfg.fingerprint());
        return Ok(());
    }
    Err(Error::Usage("pass --print-defaults or --check <file>".into()))
}
