use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use recpref_annotation::AppState;
use recpref_core::config::{Mode, RunConfig};
use recpref_core::metrics::aggregate_seeds;
use recpref_core::orchestrator::{
    agreement_for_run, eval_checkpoint, run_train, RunContext, RunStatus, StatusBoard, EVAL_METRIC, JOURNAL_FILE, RESOLVED_CONFIG, STATUS_FILE,
};
use recpref_core::preference::{HumanQueue, JudgeKind};

#[derive(Parser, Debug)]
#[command(name = "recpref", version, about = "Preference-based PPO for agile quadrotor flight")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy from a TOML configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the configured training mode.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Evaluate a policy checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Configuration describing the environment; defaults to the
        /// resolved config of the run that wrote the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 10_000)]
        seed: u64,
    },
    /// Serve the annotation API for a run directory.
    ServeAnnotation {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8077")]
        bind: String,
    },
    /// Print the reward-model/human agreement matrix of a run.
    ReportAgreement {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Merge per-seed metric curves into one x,mean,std file.
    AggregateSeeds {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, default_value = EVAL_METRIC)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn train(config: &Path, seed: Option<u64>, output_dir: Option<PathBuf>, mode: Option<Mode>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    cfg.validate()?;

    let mut ctx = RunContext {
        status: Arc::new(StatusBoard::new()),
        ..RunContext::default()
    };
    if cfg.judge == JudgeKind::Human {
        if cfg.mode == Mode::PpoShaped {
            bail!("the human judge needs a preference mode");
        }
        std::fs::create_dir_all(&cfg.output_dir)?;
        let (queue, recovered) = HumanQueue::restore(cfg.preference.n_prefs, cfg.output_dir.join(JOURNAL_FILE))?;
        if recovered > 0 {
            tracing::info!(recovered, "resuming with journaled labels");
        }
        let queue = Arc::new(queue);
        ctx.queue = Some(queue.clone());
        let (addr, _server) = recpref_annotation::spawn(
            &cfg.annotation_bind,
            AppState {
                status: ctx.status.clone(),
                queue: Some(queue),
            },
        )
        .with_context(|| format!("binding {}", cfg.annotation_bind))?;
        tracing::info!("annotation service on http://{addr}/api/v1/");
    }
    let summary = run_train(&cfg, &ctx)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval(checkpoint: &Path, config: Option<PathBuf>, episodes: usize, seed: u64) -> anyhow::Result<()> {
    if !checkpoint.is_file() {
        bail!("checkpoint {} not found", checkpoint.display());
    }
    let config = match config {
        Some(c) => c,
        None => checkpoint
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join(RESOLVED_CONFIG))
            .filter(|p| p.is_file())
            .context("no --config given and no resolved config next to the checkpoint")?,
    };
    let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    let report = eval_checkpoint(checkpoint, &cfg.environment, episodes, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn serve_annotation(run_dir: &Path, bind: &str) -> anyhow::Result<()> {
    let status_path = run_dir.join(STATUS_FILE);
    let snapshot: RunStatus = serde_json::from_slice(&std::fs::read(&status_path).with_context(|| format!("reading {}", status_path.display()))?)?;
    let status = Arc::new(StatusBoard::new());
    // no trainer is attached, so the queue endpoints report an inactive run
    status.update(|s| {
        *s = snapshot;
        s.active = false;
        s.paused = false;
    });
    status.attach(run_dir);
    let (addr, server) = recpref_annotation::spawn(bind, AppState { status, queue: None })?;
    tracing::info!("annotation service on http://{addr}/api/v1/");
    server.join().map_err(|_| anyhow::anyhow!("annotation service panicked"))?;
    Ok(())
}

fn report_agreement(run_dir: &Path, json: bool) -> anyhow::Result<()> {
    let report = agreement_for_run(run_dir)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    let names = ["first", "second", "tie"];
    println!("{:>14} {:>8} {:>8} {:>8}", "model \\ human", names[0], names[1], names[2]);
    for (name, row) in names.iter().zip(report.matrix.counts) {
        println!("{:>14} {:>8} {:>8} {:>8}", name, row[0], row[1], row[2]);
    }
    match report.accuracy {
        Some(a) => println!("accuracy: {:.2}%", 100.0 * a),
        None => println!("accuracy: n/a (no decided answers)"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            output_dir,
            mode,
        } => train(&config, seed, output_dir, mode),
        Command::Eval {
            checkpoint,
            config,
            episodes,
            seed,
        } => eval(&checkpoint, config, episodes, seed),
        Command::ServeAnnotation { run_dir, bind } => serve_annotation(&run_dir, &bind),
        Command::ReportAgreement { run_dir, json } => report_agreement(&run_dir, json),
        Command::AggregateSeeds { run_dirs, metric, out } => {
            let rows = aggregate_seeds(&run_dirs, &metric, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
