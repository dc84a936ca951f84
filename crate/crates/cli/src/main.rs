use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use statebridge::{run_batch, run_live, BatchError, BatchOptions, ExperimentConfig, LiveOptions};
use statebridge_core::metrics::{aggregate_report, render_text};
use statebridge_core::trial::{read_trials, Condition};
use statebridge_server::{shared, Coordinator};
use statebridge_sim::run_agent;

#[derive(Parser)]
#[command(
    name = "statebridge",
    version,
    about = "Run state-externalization experiments against a simulated robot"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    Hidden,
    External,
}

impl From<ConditionArg> for Condition {
    fn from(c: ConditionArg) -> Self {
        match c {
            ConditionArg::Hidden => Condition::Hidden,
            ConditionArg::External => Condition::External,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a counterbalanced batch, or one live session with --live.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        participants: Option<usize>,
        #[arg(long)]
        live: bool,
        #[arg(long, value_enum)]
        condition: Option<ConditionArg>,
        /// Run the server and agent as separate processes.
        #[arg(long)]
        split_process: bool,
        /// Participants run concurrently, each served by its own agent.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// First request of a live session.
        #[arg(long)]
        utterance: Option<String>,
        /// Virtual seconds per wall second; 0 runs unpaced.
        #[arg(long)]
        time_scale: Option<f64>,
    },
    /// Serve the coordination API only.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        listen: Option<SocketAddr>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trial_log: Option<PathBuf>,
    },
    /// Run the simulated agent against a server.
    Agent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        server: String,
        /// Batch seed; derives the simulator seed the same way `run` does.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_tasks: Option<usize>,
    },
    /// Build the report from a trial log.
    Report {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("STATEBRIDGE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

#[tokio::main]
async fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<statebridge::ConfigError>().is_some()
                || matches!(e.downcast_ref::<BatchError>(), Some(BatchError::Config(_)));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            participants,
            live,
            condition,
            split_process,
            parallel,
            utterance,
            time_scale,
        } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(scale) = time_scale {
                config.sim.time_scale = scale;
                config.validate()?;
            }
            if live {
                if let Some(seed) = seed {
                    config.experiment.seed = seed;
                    config.sim.rng_seed = seed;
                }
                let opts = LiveOptions {
                    condition: condition.map_or(Condition::External, Condition::from),
                    utterance,
                };
                run_live(&config, &opts).await?;
                return Ok(ExitCode::SUCCESS);
            }
            let out = out.context("--out is required for batch runs")?;
            let opts = BatchOptions {
                seed,
                participants,
                out: Some(out.clone()),
                condition: condition.map(Condition::from),
                parallel,
                split_process: if split_process {
                    Some(std::env::current_exe()?)
                } else {
                    None
                },
            };
            let result = run_batch(&config, &opts).await?;
            if let Some(report) = &result.report {
                print!("{}", render_text(report));
            }
            println!(
                "{} trials, seed {}, {:.2}s wall; artifacts in {}",
                result.trials.len(),
                result.seed,
                result.wall.as_secs_f64(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve {
            config,
            listen,
            seed,
            trial_log,
        } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                config.experiment.seed = seed;
            }
            let coordinator = Coordinator::new(config.server_config(trial_log))?;
            let addr = listen.unwrap_or(config.server.listen);
            let listener = tokio::net::TcpListener::bind(addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            println!("listening on http://{}", listener.local_addr()?);
            std::io::stdout().flush()?;
            statebridge_server::serve(listener, shared(coordinator)).await?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Agent {
            config,
            server,
            seed,
            max_tasks,
        } => {
            let config = ExperimentConfig::load(&config)?;
            let sim = match seed {
                Some(seed) => config.batch_sim(seed),
                None => config.sim.clone(),
            };
            let outcomes = run_agent(&server, &sim, max_tasks).await?;
            tracing::info!("agent finished {} task(s)", outcomes.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { trials, out } => {
            let records = read_trials(&trials)?;
            let report = aggregate_report(&records)?;
            let text = render_text(&report);
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
                std::fs::write(out.join("report.txt"), &text)?;
            }
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
