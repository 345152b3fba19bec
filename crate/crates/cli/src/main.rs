use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tdoa_core::eval::{
    bias_from_truth, compute_error_summary, default_ablation_subsets, format_ablation, format_bias, format_summary,
    locate_all, parse_subsets, run_ablation,
};
use tdoa_core::io::{
    load_config, parse_fixes, parse_observations, parse_scenario, parse_truth, write_config, write_fixes,
    write_observations, write_truth, FixRecord,
};
use tdoa_core::server::{Server, WindowStore};
use tdoa_core::sim::simulate;
use tdoa_core::window::DEFAULT_WINDOW_SECONDS;
use tdoa_core::{window_observations, SolverParams, TestbedConfig, Variant};

#[derive(Parser)]
#[command(name = "tdoa", version, about = "Acoustic TDoA positioning: simulate, locate, evaluate, serve")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the scenario seed (simulate).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Tumbling window length in seconds.
    #[arg(long, global = true, default_value_t = DEFAULT_WINDOW_SECONDS)]
    window_seconds: f64,
    /// Overrides the configured speed of sound, m/s.
    #[arg(long, global = true)]
    speed_of_sound: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write observations.txt, truth.txt and testbed.toml.
    Simulate {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compute one fix per window.
    Locate {
        observations: PathBuf,
        config: PathBuf,
        /// all-raw, all-robust, consec-raw or consec-robust.
        #[arg(long, default_value = "all-robust")]
        variant: Variant,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Summarize fix errors and per-location bias against ground truth.
    Eval {
        fixes: PathBuf,
        truth: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-locate with progressively fewer anchors.
    Ablate {
        observations: PathBuf,
        config: PathBuf,
        /// One subset per line; defaults to the 4..8 anchor ladder.
        #[arg(long)]
        subsets: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "all-robust")]
        variant: Variant,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run the TCP location server.
    Serve {
        config: PathBuf,
        #[arg(long, env = "TDOA_PORT", default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Drop observations older than this many seconds.
        #[arg(long)]
        retention: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_speed(tb: TestbedConfig, c: Option<f64>) -> Result<TestbedConfig> {
    match c {
        None => Ok(tb),
        Some(c) => Ok(TestbedConfig::new(tb.anchors, tb.bounds, c, tb.dimension)?),
    }
}

fn load_testbed(path: &Path, common: &Common) -> Result<(TestbedConfig, SolverParams)> {
    let (tb, params) = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    Ok((with_speed(tb, common.speed_of_sound)?, params))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    if !(common.window_seconds > 0.0 && common.window_seconds.is_finite()) {
        bail!("--window-seconds must be positive");
    }
    match &cli.command {
        Command::Simulate { scenario, out } => {
            let mut sc = parse_scenario(&read(scenario)?).with_context(|| format!("loading {}", scenario.display()))?;
            if let Some(seed) = common.seed {
                sc.seed = seed;
            }
            sc.testbed = with_speed(sc.testbed, common.speed_of_sound)?;
            let (obs, truth) = simulate(&sc)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("observations.txt"), write_observations(&obs))?;
            fs::write(out.join("truth.txt"), write_truth(&truth))?;
            fs::write(out.join("testbed.toml"), write_config(&sc.testbed, None))?;
            log::info!("{} observations, {} emissions", obs.len(), truth.emissions.len());
        }
        Command::Locate { observations, config, variant, out } => {
            let (tb, params) = load_testbed(config, common)?;
            let params = params.with_variant(*variant);
            let obs = parse_observations(&read(observations)?)
                .with_context(|| format!("parsing {}", observations.display()))?;
            let windows = window_observations(&obs, common.window_seconds);
            let fixes: Vec<FixRecord> = locate_all(&windows, &tb, &params)
                .iter()
                .map(|f| FixRecord::from_fix(f, tb.dimension))
                .collect();
            log::info!("{} windows, {} fixes", windows.len(), fixes.len());
            emit(out.as_deref(), &write_fixes(&fixes))?;
        }
        Command::Eval { fixes, truth, out } => {
            let fixes = parse_fixes(&read(fixes)?).with_context(|| format!("parsing {}", fixes.display()))?;
            let truth = parse_truth(&read(truth)?).with_context(|| format!("parsing {}", truth.display()))?;
            let summary = compute_error_summary(&fixes, &truth)?;
            let bias = bias_from_truth(&fixes, &truth)?;
            emit(out.as_deref(), &(format_summary(&summary) + &format_bias(&bias)))?;
        }
        Command::Ablate { observations, config, subsets, truth, variant, out } => {
            let (tb, params) = load_testbed(config, common)?;
            let params = params.with_variant(*variant);
            let obs = parse_observations(&read(observations)?)
                .with_context(|| format!("parsing {}", observations.display()))?;
            let truth = parse_truth(&read(truth)?).with_context(|| format!("parsing {}", truth.display()))?;
            let subsets = match subsets {
                Some(p) => parse_subsets(&read(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => default_ablation_subsets(),
            };
            if subsets.is_empty() {
                bail!("no anchor subsets given");
            }
            let windows = window_observations(&obs, common.window_seconds);
            let rows = run_ablation(&windows, &tb, &params, &subsets, &truth)?;
            emit(out.as_deref(), &format_ablation(&rows))?;
        }
        Command::Serve { config, port, host, retention } => {
            let (tb, params) = load_testbed(config, common)?;
            let mut store = WindowStore::new(tb, params, common.window_seconds);
            if let Some(r) = retention {
                store = store.with_retention(*r);
            }
            let server = Server::bind((host.as_str(), *port), store)
                .with_context(|| format!("binding {host}:{port}"))?;
            let stop = server.shutdown_handle();
            ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)).context("installing signal handler")?;
            eprintln!("listening on {}", server.local_addr()?);
            server.run()?;
        }
    }
    Ok(())
}
