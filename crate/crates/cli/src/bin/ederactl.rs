use std::fs;
use std::io::{self, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use edera_core::bench::{bench_startup, compare_startup, BenchClock};
use edera_core::daemon::{Daemon, DaemonConfig};
use edera_core::devices::AttachMode;
use edera_core::hv::HostConfig;
use edera_core::net::NetProxy;
use edera_core::rpc::{Client, Request, Response};
use edera_core::scenario;
use edera_core::store::SyncMode;
use edera_core::zone::{ZoneId, ZoneRecord};

/// Administer zones on an ederad host.
#[derive(Debug, Parser)]
#[command(name = "ederactl", version)]
struct Cli {
    /// Address of the ederad control socket.
    #[arg(long, global = true, env = "EDERA_DAEMON", default_value = "127.0.0.1:7878")]
    daemon: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    #[command(subcommand)]
    Zone(ZoneCmd),
    #[command(subcommand)]
    Pod(PodCmd),
    #[command(subcommand)]
    Device(DeviceCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Print the metrics exposition.
    Metrics,
}

#[derive(Debug, Subcommand)]
enum ZoneCmd {
    /// Create a zone and print its id.
    Create {
        #[arg(long)]
        kernel: String,
        #[arg(long, default_value_t = 0)]
        memory: u64,
        /// Defaults to 1, or 0 for warm zones.
        #[arg(long)]
        vcpus: Option<u32>,
        /// Create an idle zone with no resources.
        #[arg(long)]
        warm: bool,
    },
    List,
    Destroy {
        id: ZoneId,
    },
    Activate {
        id: ZoneId,
        #[arg(long, default_value_t = 1)]
        cpus: u32,
        #[arg(long)]
        memory: u64,
    },
    Quarantine {
        id: ZoneId,
    },
    Release {
        id: ZoneId,
    },
    /// Run a command inside a zone.
    Exec {
        id: ZoneId,
        #[arg(last = true, required = true)]
        argv: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
enum PodCmd {
    Apply {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    Delete {
        name: String,
        #[arg(short, long, default_value = "default")]
        namespace: String,
    },
    List,
}

#[derive(Debug, Subcommand)]
enum DeviceCmd {
    /// Attach a device behind a new driver zone.
    Attach {
        device: String,
        /// Split the device into this many slices instead of passing it through.
        #[arg(long)]
        partitions: Option<u32>,
        #[arg(long, default_value_t = 64)]
        driver_memory: u64,
    },
    Bind {
        device: String,
        #[arg(long)]
        slice: u32,
        #[arg(long)]
        zone: ZoneId,
    },
    Unbind {
        device: String,
        #[arg(long)]
        slice: u32,
    },
    /// Crash the device's driver zone.
    Fault { device: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Clock {
    Wall,
    Logical,
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Zone startup latency on a private simulated host.
    Startup {
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
        runs: u64,
        /// Time activation of pre-created warm zones.
        #[arg(long, conflicts_with = "compare")]
        warm: bool,
        /// Run cold and warm interleaved and report both.
        #[arg(long)]
        compare: bool,
        #[arg(long, value_enum, default_value_t = Clock::Wall)]
        clock: Clock,
        #[arg(long, default_value_t = 0)]
        guest_boot_ms: u64,
    },
}

#[derive(Debug, Subcommand)]
enum ScenarioCmd {
    /// Run an escape-analog scenario: pagetable-write, fd-namespace, driver-fault or all.
    Run { name: String },
}

fn call(addr: &str, request: Request) -> anyhow::Result<Response> {
    let stream = TcpStream::connect(addr).with_context(|| format!("daemon unavailable at {addr}"))?;
    let response = Client::new(stream).call(&request)?;
    match response {
        Response::Error(e) => Err(anyhow!(e)),
        other => Ok(other),
    }
}

fn unexpected(r: Response) -> anyhow::Error {
    anyhow!("unexpected response: {r:?}")
}

fn print_zones(out: &mut impl Write, zones: &[ZoneRecord]) -> io::Result<()> {
    writeln!(
        out,
        "{:<36}  {:<14}  {:>10}  {:>5}  {:<8}  WORKLOAD",
        "ID", "STATE", "MEMORY_MIB", "VCPUS", "ROLE"
    )?;
    for z in zones {
        let workload = z.workload.as_ref().map(|w| w.to_string()).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<36}  {:<14}  {:>10}  {:>5}  {:<8}  {workload}",
            z.id.to_string(),
            z.state.label(),
            z.spec.memory_mib,
            z.spec.vcpus,
            format!("{:?}", z.spec.role).to_lowercase(),
        )?;
    }
    Ok(())
}

fn zone(addr: &str, cmd: ZoneCmd, out: &mut impl Write) -> anyhow::Result<()> {
    let request = match cmd {
        ZoneCmd::Create {
            kernel,
            memory,
            vcpus,
            warm,
        } => Request::ZoneCreate {
            kernel,
            memory_mib: memory,
            vcpus: vcpus.unwrap_or(if warm { 0 } else { 1 }),
            warm,
        },
        ZoneCmd::List => Request::ZoneList,
        ZoneCmd::Destroy { id } => Request::ZoneDestroy { id },
        ZoneCmd::Activate { id, cpus, memory } => Request::ZoneActivate {
            id,
            cpus,
            memory_mib: memory,
        },
        ZoneCmd::Quarantine { id } => Request::ZoneQuarantine { id },
        ZoneCmd::Release { id } => Request::ZoneRelease { id },
        ZoneCmd::Exec { id, argv } => Request::ZoneExec { id, argv },
    };
    let is_create = matches!(request, Request::ZoneCreate { .. });
    match call(addr, request)? {
        Response::Zone(z) if is_create => writeln!(out, "{}", z.id)?,
        Response::Zone(z) => writeln!(out, "{} {}", z.id, z.state.label())?,
        Response::Zones(zones) => print_zones(out, &zones)?,
        Response::Ack => {}
        Response::Exec {
            stdout,
            stderr,
            exit_code,
        } => {
            out.write_all(&stdout)?;
            io::stderr().write_all(&stderr)?;
            if exit_code != 0 {
                bail!("command exited with status {exit_code}");
            }
        }
        other => return Err(unexpected(other)),
    }
    Ok(())
}

fn pod(addr: &str, cmd: PodCmd, out: &mut impl Write) -> anyhow::Result<()> {
    let request = match cmd {
        PodCmd::Apply { file } => Request::PodApply {
            manifest: fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?,
        },
        PodCmd::Delete { name, namespace } => Request::PodDelete { namespace, name },
        PodCmd::List => Request::PodList,
    };
    match call(addr, request)? {
        Response::PodApplied {
            namespace,
            name,
            managed,
        } => writeln!(out, "{namespace}/{name} applied (managed={managed})")?,
        Response::Ack => {}
        Response::Pods(pods) => {
            writeln!(out, "{:<40}  {:<7}  {:<36}  STATE", "POD", "MANAGED", "ZONE")?;
            for p in pods {
                writeln!(
                    out,
                    "{:<40}  {:<7}  {:<36}  {}",
                    format!("{}/{}", p.namespace, p.name),
                    p.managed,
                    p.zone.map(|z| z.to_string()).unwrap_or_else(|| "-".into()),
                    p.state.map(|s| s.label()).unwrap_or("-"),
                )?;
            }
        }
        other => return Err(unexpected(other)),
    }
    Ok(())
}

fn device(addr: &str, cmd: DeviceCmd, out: &mut impl Write) -> anyhow::Result<()> {
    let request = match cmd {
        DeviceCmd::Attach {
            device,
            partitions,
            driver_memory,
        } => Request::DeviceAttach {
            device,
            mode: match partitions {
                Some(slices) => AttachMode::Partitioned { slices },
                None => AttachMode::Passthrough,
            },
            driver_memory_mib: driver_memory,
        },
        DeviceCmd::Bind { device, slice, zone } => Request::DeviceBind { device, slice, zone },
        DeviceCmd::Unbind { device, slice } => Request::DeviceUnbind { device, slice },
        DeviceCmd::Fault { device } => Request::DeviceFault { device },
    };
    match call(addr, request)? {
        Response::Device(d) => {
            writeln!(
                out,
                "{} driver={} slices={}",
                d.device_id,
                d.driver_zone,
                d.slices.len()
            )?;
        }
        Response::Fault {
            device,
            driver_zone,
            failed_requests,
        } => writeln!(
            out,
            "{device}: driver zone {driver_zone} faulted, {failed_requests} pending requests failed"
        )?,
        Response::Ack => {}
        other => return Err(unexpected(other)),
    }
    Ok(())
}

fn bench(cmd: BenchCmd, out: &mut impl Write) -> anyhow::Result<()> {
    let BenchCmd::Startup {
        runs,
        warm,
        compare,
        clock,
        guest_boot_ms,
    } = cmd;
    let dir = tempfile::tempdir()?;
    let mut config = DaemonConfig::new(HostConfig::with_memory_mib(8, 16 * 1024), dir.path().join("bench.log"));
    config.sync = SyncMode::FlushOnly;
    config.guest_boot_ms = guest_boot_ms;
    let mut daemon = Daemon::open(config, NetProxy::new())?;
    let clock = match clock {
        Clock::Wall => BenchClock::Wall,
        Clock::Logical => BenchClock::Logical,
    };
    let runs = runs as usize;
    if compare {
        let c = compare_startup(&mut daemon, runs, clock)?;
        write!(out, "{}\n{}", c.cold, c.warm)?;
        writeln!(out, "warm/cold mean ratio: {:.3}", c.ratio())?;
    } else {
        write!(out, "{}", bench_startup(&mut daemon, runs, warm, clock)?)?;
    }
    Ok(())
}

fn scenarios(cmd: ScenarioCmd, out: &mut impl Write) -> anyhow::Result<()> {
    let ScenarioCmd::Run { name } = cmd;
    let outcomes = scenario::run_named(&name)?;
    for o in &outcomes {
        writeln!(out, "{o}")?;
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    writeln!(out, "{passed}/{} passed", outcomes.len())?;
    if passed != outcomes.len() {
        bail!("{} scenario(s) failed", outcomes.len() - passed);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Zone(cmd) => zone(&cli.daemon, cmd, &mut out),
        Command::Pod(cmd) => pod(&cli.daemon, cmd, &mut out),
        Command::Device(cmd) => device(&cli.daemon, cmd, &mut out),
        Command::Bench(cmd) => bench(cmd, &mut out),
        Command::Scenario(cmd) => scenarios(cmd, &mut out),
        Command::Metrics => match call(&cli.daemon, Request::Metrics)? {
            Response::Metrics(text) => Ok(out.write_all(text.as_bytes())?),
            other => Err(unexpected(other)),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ederactl: {e:#}");
            ExitCode::from(1)
        }
    }
}
