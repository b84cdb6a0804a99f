use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::info;

use multidrive::config::{load_communications, load_config, ConfigError, SimulationConfig};
use multidrive::harness::{
    emit_plot_data, metrics_from_dir, read_summary, read_trace, run_batch, run_udp_driver, trace_file_name, AgentSpec, BatchOptions,
    HarnessError, PlotKind, ScriptedDriver, ScriptedKind, SUMMARY_FILE,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Headless multi-agent driving simulator and batch harness.
#[derive(Debug, Parser)]
#[command(name = "multidrive", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a batch of episodes and write traces plus summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// center_follow, weave, full_throttle, or external to wait for UDP clients.
        #[arg(long, default_value = "center_follow")]
        agent: String,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// Pace control steps at wall-clock speed.
        #[arg(long)]
        realtime: bool,
        /// Communication links, replacing any in the config file.
        #[arg(long)]
        comms: Option<PathBuf>,
        /// First session port.
        #[arg(long, env = "MULTIDRIVE_BASE_PORT")]
        base_port: Option<u16>,
        /// Seconds external clients get to identify.
        #[arg(long, default_value_t = 30.0)]
        connect_timeout: f64,
    },
    /// Recompute batch metrics from the trace files of a run directory.
    Metrics {
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Write a plot-ready CSV table from a run directory.
    Plot {
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
        /// episode_reward, speed_profile or trajectory_xy.
        #[arg(long)]
        kind: String,
        /// Trace to read for the per-step kinds.
        #[arg(long, default_value_t = 1)]
        episode: u64,
        /// Output file; standard output when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Drive one learning car over UDP with a scripted driver.
    Drive {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "center_follow")]
        agent: String,
        /// km/h
        #[arg(long, default_value_t = 50.0)]
        target_speed: f64,
        /// Send primitive actions on [-1, 1] for every channel.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        normalized: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn prepare_config(path: &Path, comms: Option<&Path>, base_port: Option<u16>) -> Result<SimulationConfig, Failure> {
    let mut cfg = load_config(path)?;
    if let Some(p) = comms {
        cfg.communications = load_communications(p)?;
    }
    if let Some(port) = base_port {
        cfg.server.torcs_server_port = port;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            episodes,
            seed,
            agent,
            out_dir,
            realtime,
            comms,
            base_port,
            connect_timeout,
        } => {
            let agent: AgentSpec = agent.parse()?;
            let cfg = prepare_config(&config, comms.as_deref(), base_port)?;
            let opts = BatchOptions {
                episodes,
                seed,
                agent,
                out_dir,
                realtime,
                connect_timeout: Duration::from_secs_f64(connect_timeout.max(0.0)),
            };
            info!("running {episodes} episodes of {} with seed {seed}", config.display());
            let summary = run_batch(&cfg, &config.display().to_string(), &opts)?;
            print_json(&summary.metrics)
        }
        Command::Metrics { out_dir } => {
            let metrics = metrics_from_dir(&out_dir)?;
            print_json(&metrics)
        }
        Command::Plot {
            out_dir,
            kind,
            episode,
            output,
        } => {
            let kind: PlotKind = kind.parse()?;
            let (summary, rows) = match kind {
                PlotKind::EpisodeReward => (Some(read_summary(&out_dir.join(SUMMARY_FILE))?), Vec::new()),
                _ => (None, read_trace(&out_dir.join(trace_file_name(episode)))?),
            };
            match output {
                Some(path) => emit_plot_data(kind, summary.as_ref(), &rows, BufWriter::new(File::create(path)?))?,
                None => emit_plot_data(kind, summary.as_ref(), &rows, io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Drive {
            host,
            port,
            agent,
            target_speed,
            normalized,
        } => {
            let kind: ScriptedKind = agent.parse()?;
            let addr: SocketAddr = (host.as_str(), port)
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| Failure::Config(format!("cannot resolve {host}")))?;
            let stop = AtomicBool::new(false);
            let frames = run_udp_driver(addr, Box::new(ScriptedDriver::new(kind, target_speed, normalized)), &stop)?;
            info!("received {frames} frames");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {
            let _ = io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
