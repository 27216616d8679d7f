use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use edspid_core::clock::{DigestTrace, TraceSink, WriterTrace};
use edspid_core::regbank::{self, parse_dump, parse_word, RegisterRole};
use edspid_core::sim::bench_latency;
use edspid_core::trajectory::{self, load_trajectory, TrajectoryError};
use edspid_core::{JointId, SimConfig, Simulator, Tick};

use crate::driver::{DriverConfig, SimDriver};
use crate::hub::TelemetryHub;
use crate::service::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "edspid", version, about = "Spiking PID robot controller simulator")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "EDSPID_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Free-running simulation.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Trajectory execution.
    #[command(subcommand)]
    Traj(TrajCommand),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// HTTP and WebSocket service.
    Serve(ServeArgs),
    /// Register image inspection and editing.
    #[command(subcommand)]
    Regs(RegsCommand),
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Runs the simulator and prints the final state as JSON.
    Run(SimRunArgs),
}

#[derive(Debug, Args)]
pub struct SimRunArgs {
    /// Simulated duration in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub duration_ms: u64,
    /// Reference to apply at the start, as JOINT=COUNTS. Repeatable.
    #[arg(long = "set", value_name = "JOINT=COUNTS")]
    pub set: Vec<String>,
    /// Home all joints first.
    #[arg(long)]
    pub home: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes the event trace to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TrajCommand {
    /// Homes, runs a trajectory file and writes the telemetry CSV.
    Run(TrajRunArgs),
}

#[derive(Debug, Args)]
pub struct TrajRunArgs {
    pub file: PathBuf,
    /// axi, spi or spi-worst-case.
    #[arg(long, default_value = "axi")]
    pub transport: String,
    #[arg(long, default_value = "telemetry.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes the event trace to this file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Command latency of two transports.
    Latency(BenchArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value = "axi")]
    pub fast: String,
    #[arg(long, default_value = "spi")]
    pub slow: String,
    /// Prints the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Require this bearer token on every request.
    #[arg(long, env = "EDSPID_TOKEN")]
    pub token: Option<String>,
    /// Simulated seconds per wall second; 0 runs as fast as possible.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// Telemetry period in ms (sets TELEMETRY_DIV).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub telemetry_ms: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum RegsCommand {
    /// Prints every register.
    Dump {
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Writes one register and saves the image.
    Write {
        index: usize,
        /// Decimal or 0x-prefixed hex.
        value: String,
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

fn load_config(cli_path: Option<&Path>) -> Result<SimConfig> {
    match cli_path {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn parse_assignment(text: &str) -> Result<(JointId, u16)> {
    let (j, v) = text
        .split_once('=')
        .with_context(|| format!("expected JOINT=COUNTS, got {text:?}"))?;
    let joint = JointId::new(j.trim().parse().with_context(|| format!("bad joint {j:?}"))?)?;
    let counts = v.trim().parse().with_context(|| format!("bad counts {v:?}"))?;
    Ok((joint, counts))
}

/// Trace output: always a digest, optionally a file as well.
struct TraceTap {
    digest: Arc<Mutex<DigestTrace>>,
    file: Option<Arc<Mutex<WriterTrace<BufWriter<fs::File>>>>>,
}

struct Tee(Vec<Box<dyn TraceSink>>);

impl TraceSink for Tee {
    fn record(
        &mut self,
        tick: Tick,
        sequence: u64,
        target: &dyn std::fmt::Display,
        action: &dyn std::fmt::Display,
    ) {
        for sink in &mut self.0 {
            sink.record(tick, sequence, target, action);
        }
    }
}

impl TraceTap {
    fn attach(sim: &mut Simulator, path: Option<&Path>) -> Result<Self> {
        let digest = Arc::new(Mutex::new(DigestTrace::new()));
        let mut sinks: Vec<Box<dyn TraceSink>> = vec![Box::new(digest.clone())];
        let file = match path {
            Some(p) => {
                let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
                let w = Arc::new(Mutex::new(WriterTrace::new(BufWriter::new(f))));
                sinks.push(Box::new(w.clone()));
                Some(w)
            }
            None => None,
        };
        sim.set_trace(Some(Box::new(Tee(sinks))));
        Ok(Self { digest, file })
    }

    /// Detaches from `sim`; returns `(hex digest, lines)`.
    fn finish(self, sim: &mut Simulator) -> Result<(String, u64)> {
        drop(sim.take_trace());
        if let Some(w) = self.file {
            let w = Arc::try_unwrap(w)
                .map_err(|_| anyhow::anyhow!("trace writer still shared"))?
                .into_inner()
                .unwrap_or_else(|p| p.into_inner());
            w.finish().context("writing trace")?;
        }
        let d = self.digest.lock().unwrap_or_else(|p| p.into_inner());
        Ok((d.hex_digest(), d.lines()))
    }
}

pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Sim(SimCommand::Run(args)) => sim_run(config, args, out),
        Command::Traj(TrajCommand::Run(args)) => traj_run(config, args, out, err),
        Command::Bench(BenchCommand::Latency(args)) => bench(config, args, out),
        Command::Serve(args) => serve(config, args, out),
        Command::Regs(cmd) => regs(config, cmd, out),
    }
}

fn sim_run(mut config: SimConfig, args: SimRunArgs, out: &mut dyn Write) -> Result<()> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let refs = args
        .set
        .iter()
        .map(|s| parse_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    let mut sim = Simulator::new(config)?;
    let tap = TraceTap::attach(&mut sim, args.trace.as_deref())?;
    if args.home {
        sim.home_all()?;
    }
    for (joint, counts) in refs {
        sim.set_reference(joint, counts)?;
    }
    sim.run_for(Tick::from_millis(args.duration_ms).0)?;
    let (digest, lines) = tap.finish(&mut sim)?;
    let mut snapshot = serde_json::to_value(sim.snapshot())?;
    snapshot["events"] = lines.into();
    snapshot["trace_sha256"] = digest.into();
    writeln!(out, "{}", serde_json::to_string_pretty(&snapshot)?)?;
    Ok(())
}

fn traj_run(
    mut config: SimConfig,
    args: TrajRunArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let transport = config.transports.by_name(&args.transport)?.clone();
    let loaded = load_trajectory(&args.file, &config.joint_map)?;
    for w in &loaded.warnings {
        writeln!(err, "warning: {w}")?;
    }
    let mut sim = Simulator::new(config)?;
    let tap = TraceTap::attach(&mut sim, args.trace.as_deref())?;
    sim.home_all()?;
    let result = trajectory::execute(&mut sim, &loaded.trajectory, &transport, &args.out);
    let (digest, lines) = tap.finish(&mut sim)?;
    match result {
        Ok(path) => {
            let rows = fs::read_to_string(&path)?.lines().count().saturating_sub(1);
            writeln!(out, "wrote {rows} telemetry rows to {}", path.display())?;
            writeln!(out, "trace-sha256 {digest} ({lines} events)")?;
            Ok(())
        }
        Err(e @ TrajectoryError::SimulationFault { .. }) => {
            writeln!(out, "trace-sha256 {digest} ({lines} events)")?;
            bail!("{e}; partial recording written to {}", args.out.display())
        }
        Err(e) => Err(e.into()),
    }
}

fn bench(config: SimConfig, args: BenchArgs, out: &mut dyn Write) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let fast = config.transports.by_name(&args.fast)?.clone();
    let slow = config.transports.by_name(&args.slow)?.clone();
    let report = bench_latency(&config, &fast, &slow, args.n)?;
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
        return Ok(());
    }
    for s in [&report.fast, &report.slow] {
        writeln!(
            out,
            "{}: mean {:.3} ms, min {:.3} ms, max {:.3} ms over {} commands",
            s.transport,
            s.mean_s * 1e3,
            s.min_s * 1e3,
            s.max_s * 1e3,
            s.samples
        )?;
    }
    writeln!(out, "improvement: {:.2}%", report.improvement_percent)?;
    Ok(())
}

fn serve(config: SimConfig, args: ServeArgs, out: &mut dyn Write) -> Result<()> {
    if !(args.speed.is_finite() && args.speed >= 0.0) {
        bail!("--speed must be a non-negative number");
    }
    let addr: SocketAddr = format!("{}:{}", args.bind, args.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", args.bind, args.port))?;
    let mut sim = Simulator::new(config)?;
    if let Some(ms) = args.telemetry_ms {
        sim.write_word(regbank::TELEMETRY_DIV, ms)?;
    }
    let hub = TelemetryHub::new();
    let (driver, handle) = SimDriver::new(
        sim,
        hub.clone(),
        DriverConfig {
            speed: args.speed,
            ..DriverConfig::default()
        },
    );
    let thread = driver.spawn();
    let state = AppState {
        sim: handle,
        hub,
        token: args.token,
    };
    let rt = tokio::runtime::Runtime::new()?;
    let served: Result<()> = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    });
    thread.stop()?;
    served
}

fn load_image(sim: &mut Simulator, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (index, value) in parse_dump(&text)? {
        let role = RegisterRole::of(index)?;
        if role.writable() && index != regbank::GLOBAL_CTRL {
            sim.write_word(index, value)?;
        }
    }
    Ok(())
}

fn regs(config: SimConfig, cmd: RegsCommand, out: &mut dyn Write) -> Result<()> {
    let mut sim = Simulator::new(config)?;
    match cmd {
        RegsCommand::Dump { image } => {
            if let Some(p) = &image {
                load_image(&mut sim, p)?;
            }
            write!(out, "{}", sim.bank().dump())?;
        }
        RegsCommand::Write {
            index,
            value,
            image,
        } => {
            if let Some(p) = image.as_deref().filter(|p| p.exists()) {
                load_image(&mut sim, p)?;
            }
            let value = parse_word(&value).with_context(|| format!("bad value {value:?}"))?;
            sim.write_word(index, value)?;
            let dump = sim.bank().dump();
            match &image {
                Some(p) => {
                    fs::write(p, &dump).with_context(|| format!("writing {}", p.display()))?
                }
                None => write!(out, "{dump}")?,
            }
        }
    }
    Ok(())
}
