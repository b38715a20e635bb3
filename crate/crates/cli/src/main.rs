use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tssl::dataset::write_cifar10;
use tssl::experiment::{load_data, pretext_datasets, run_experiment, ExperimentConfig, RunOptions, RunStatus, Stage, Sweep};
use tssl::pretext::resolve_device;
use tssl::report::{emit_curves, emit_table};
use tssl::synthetic::synthetic_cifar;
use tssl::verify::run_invariant_suite;
use tssl::{Error, Result};

/// Transformation-prediction pretext training and downstream evaluation.
#[derive(Parser, Debug)]
#[command(name = "tssl", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the pretext seed sweep with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also use the CIFAR-10 test images as pretext sources.
    #[arg(long, global = true)]
    include_test_split: bool,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true)]
    device: Option<String>,
    /// Number of pretext runs executed in parallel.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export the pretext datasets of the config as PNG files plus a manifest.
    Generate {
        /// Export at most this many samples per transform set.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train the pretext models of the config.
    TrainPretext,
    /// Run the downstream evaluations on already trained pretext models.
    EvalDownstream,
    /// Run pretext training and downstream evaluation for every sweep point.
    Sweep,
    /// Write result tables and accuracy curves for a results directory.
    Report {
        /// Results directory; defaults to the configured output directory.
        results: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Verify,
    /// Write the procedural stand-in corpus in CIFAR-10 binary format.
    Synth {
        #[arg(long, default_value_t = 5000)]
        train_per_class: usize,
        #[arg(long, default_value_t = 1000)]
        test_per_class: usize,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::config("this command needs --config PATH"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.pretext.seed = Sweep::One(seed);
    }
    if g.include_test_split {
        cfg.data.include_test_split = true;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stage(g: &Global, stage: Stage) -> Result<()> {
    let cfg = load_config(g)?;
    let report = run_experiment(
        &cfg,
        &RunOptions {
            stage,
            verbose: !g.quiet,
        },
    )?;
    for (dir, status) in &report.runs {
        let tag = match status {
            RunStatus::Trained => "trained",
            RunStatus::Resumed => "resumed",
            RunStatus::Skipped => "up to date",
        };
        println!("{tag:>10}  {}", dir.display());
    }
    println!(
        "{} trained, {} resumed, {} already complete",
        report.count(RunStatus::Trained),
        report.count(RunStatus::Resumed),
        report.count(RunStatus::Skipped)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let g = &cli.global;
    let (device, note) = resolve_device(g.device.as_deref());
    if let Some(note) = note {
        eprintln!("note: {note}");
    }
    if !g.quiet && !matches!(cli.command, Command::Verify | Command::Report { .. }) {
        eprintln!("device: {device}");
    }
    match &cli.command {
        Command::Generate { limit } => {
            let cfg = load_config(g)?;
            let data = load_data(&cfg.data)?;
            let mut done = HashSet::new();
            for plan in cfg.plan()? {
                let Some(pcfg) = plan.pretext else { continue };
                if !done.insert((pcfg.transform_set, pcfg.build_method, pcfg.seed)) {
                    continue;
                }
                let (ds, _) = pretext_datasets(&cfg.data, &pcfg, &data)?;
                let dir = cfg.output_dir.join("datasets").join(format!("{}_s{}", pcfg.transform_set, pcfg.seed));
                let n = ds.export(&dir, *limit)?;
                println!("{n} samples of {} written to {}", ds.len(), dir.display());
            }
        }
        Command::TrainPretext => run_stage(g, Stage::Pretext)?,
        Command::EvalDownstream => run_stage(g, Stage::Downstream)?,
        Command::Sweep => run_stage(g, Stage::All)?,
        Command::Report { results } => {
            let dir = match (results, &g.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => load_config(g)?.output_dir,
            };
            let out = dir.join("report");
            let tables = emit_table(&dir, &out)?;
            let curves = emit_curves(&dir, &out)?;
            print!("{}", tables.markdown);
            for w in &curves.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} tables and {} figures written to {}",
                tables.tables.len(),
                curves.figures.len(),
                out.display()
            );
        }
        Command::Verify => {
            let outcomes = run_invariant_suite(g.seed.unwrap_or(0));
            for o in &outcomes {
                let tag = if o.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {:<28} {} ({:.2}s)", o.name, o.detail, o.seconds);
            }
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth {
            train_per_class,
            test_per_class,
        } => {
            let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
            let splits = synthetic_cifar(*train_per_class, *test_per_class, g.seed.unwrap_or(0));
            write_cifar10(&dir, &splits)?;
            println!(
                "{} training and {} test images written to {}",
                splits.train.len(),
                splits.test.len(),
                dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
