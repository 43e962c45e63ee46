use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::Parser;
use edera_core::daemon::DaemonConfig;
use edera_core::hv::HostConfig;
use edera_core::node::Node;
use edera_core::rpc;
use log::{info, warn};

/// Host daemon: runs the simulated hypervisor and the zone control plane.
#[derive(Debug, Parser)]
#[command(name = "ederad", version)]
struct Args {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    host_cpus: u32,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    host_memory_mib: u64,
    /// Zone store log file.
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    #[arg(long, default_value_t = 500)]
    heartbeat_interval_ms: u64,
    /// Logical delay between domain creation and the guest's first tick.
    #[arg(long, default_value_t = 0)]
    guest_boot_ms: u64,
}

fn lock(node: &Mutex<Node>) -> MutexGuard<'_, Node> {
    node.lock().unwrap_or_else(|e| e.into_inner())
}

fn serve_client(node: Arc<Mutex<Node>>, mut stream: TcpStream) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let result = rpc::serve(&mut stream, |req| lock(&node).handle(req));
    if let Err(e) = result {
        warn!("{peer}: {e}");
    }
}

fn run(args: Args) -> anyhow::Result<()> {
    let mut config = DaemonConfig::new(
        HostConfig::with_memory_mib(args.host_cpus, args.host_memory_mib),
        &args.store,
    );
    config.heartbeat_interval_ms = args.heartbeat_interval_ms;
    config.heartbeat_timeout_ms = 3 * args.heartbeat_interval_ms;
    config.guest_boot_ms = args.guest_boot_ms;
    let node = Node::open(config).with_context(|| format!("opening store {}", args.store.display()))?;
    let recovery = node.daemon.recovery();
    info!(
        "store {}: {} records recovered, {} bytes discarded",
        args.store.display(),
        recovery.records,
        recovery.discarded_bytes
    );
    let node = Arc::new(Mutex::new(node));

    let listener = TcpListener::bind(&args.listen).with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;

    let ticker = node.clone();
    thread::spawn(move || {
        let start = Instant::now();
        loop {
            thread::sleep(Duration::from_millis(20));
            let now = start.elapsed().as_millis() as u64;
            lock(&ticker).tick(now);
        }
    });

    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let node = node.clone();
                thread::spawn(move || serve_client(node, stream));
            }
            Err(e) => warn!("accept: {e}"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ederad: {e:#}");
            ExitCode::from(1)
        }
    }
}
