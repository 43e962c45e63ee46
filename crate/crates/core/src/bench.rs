//! Startup-latency harness.
//!
//! Cold runs time zone creation through the first heartbeat. Warm runs
//! pre-create an idle, resource-free zone outside the timed region and time
//! activation through the next heartbeat.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::daemon::{Daemon, DaemonError};
use crate::zone::{ZoneId, ZoneSpec, ZoneState};

pub const BENCH_KERNEL: &str = "ghcr.io/edera-dev/linux-kernel:latest";
pub const BENCH_MEMORY_MIB: u64 = 600;
pub const BENCH_VCPUS: u32 = 1;
const LOGICAL_STEP_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub system: &'static str,
    pub startup_ms: f64,
}

/// Published container startup times, in ascending order. Carried as
/// reference data; never compared against local measurements.
pub const PUBLISHED_STARTUP_MS: [ReferenceRow; 6] = [
    ReferenceRow {
        system: "Docker",
        startup_ms: 177.4,
    },
    ReferenceRow {
        system: "Docker (bare metal)",
        startup_ms: 203.8,
    },
    ReferenceRow {
        system: "gVisor",
        startup_ms: 281.8,
    },
    ReferenceRow {
        system: "Edera-PV",
        startup_ms: 765.8,
    },
    ReferenceRow {
        system: "Edera-PVH",
        startup_ms: 968.6,
    },
    ReferenceRow {
        system: "Kata Containers",
        startup_ms: 1934.2,
    },
];

pub const REFERENCE_LABEL: &str = "published reference (not measured here)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchClock {
    /// Host monotonic clock.
    Wall,
    /// The daemon's logical milliseconds.
    Logical,
}

impl BenchClock {
    pub fn label(self) -> &'static str {
        match self {
            BenchClock::Wall => "wall-clock",
            BenchClock::Logical => "logical",
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("at least 2 runs are needed for a standard error, got {0}")]
    TooFewRuns(usize),
    #[error("daemon unavailable")]
    DaemonUnavailable,
    #[error(transparent)]
    Daemon(#[from] DaemonError),
    #[error("zone {0} never sent a heartbeat")]
    NoHeartbeat(ZoneId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub clock: BenchClock,
    pub runs: usize,
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub stderr_ms: f64,
}

impl BenchReport {
    pub fn from_samples(scenario: &str, clock: BenchClock, samples_ms: Vec<f64>) -> Result<Self, BenchError> {
        let (mean_ms, stderr_ms) = mean_stderr(&samples_ms).ok_or(BenchError::TooFewRuns(samples_ms.len()))?;
        Ok(BenchReport {
            scenario: scenario.to_string(),
            clock,
            runs: samples_ms.len(),
            samples_ms,
            mean_ms,
            stderr_ms,
        })
    }

    pub fn reference(&self) -> &'static [ReferenceRow] {
        &PUBLISHED_STARTUP_MS
    }
}

/// Mean and standard error (sample standard deviation over sqrt(n)).
pub fn mean_stderr(samples: &[f64]) -> Option<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some((mean, var.sqrt() / (n as f64).sqrt()))
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        writeln!(f, "clock: {}", self.clock.label())?;
        writeln!(f, "runs: {}", self.runs)?;
        let samples: Vec<String> = self.samples_ms.iter().map(|s| format!("{s:.3}")).collect();
        writeln!(f, "samples_ms: {}", samples.join(" "))?;
        writeln!(f, "mean_ms: {:.3} +/- {:.3} (stderr)", self.mean_ms, self.stderr_ms)?;
        writeln!(f, "{REFERENCE_LABEL}, startup ms:")?;
        for row in self.reference() {
            writeln!(f, "  {:<20} {:>7.1}", row.system, row.startup_ms)?;
        }
        Ok(())
    }
}

fn bench_spec() -> ZoneSpec {
    ZoneSpec::workload(BENCH_KERNEL, BENCH_MEMORY_MIB, BENCH_VCPUS)
}

struct Timer {
    clock: BenchClock,
    wall: Instant,
    logical: u64,
}

impl Timer {
    fn start(clock: BenchClock, daemon: &Daemon) -> Self {
        Timer {
            clock,
            wall: Instant::now(),
            logical: daemon.now(),
        }
    }

    fn elapsed_ms(&self, daemon: &Daemon) -> f64 {
        match self.clock {
            BenchClock::Wall => self.wall.elapsed().as_secs_f64() * 1000.0,
            BenchClock::Logical => (daemon.now() - self.logical) as f64,
        }
    }
}

/// Pumps the daemon until `zone` has sent more than `seen` heartbeats.
/// Logical time only moves when a pump at the current instant yields
/// nothing.
fn await_heartbeat(daemon: &mut Daemon, zone: ZoneId, seen: u64) -> Result<(), BenchError> {
    for _ in 0..LOGICAL_STEP_LIMIT {
        daemon.pump();
        if daemon.heartbeat_count(zone) > seen {
            return Ok(());
        }
        if !daemon.zone(zone).is_some_and(|z| z.state.is_live()) {
            break;
        }
        let next = daemon.now() + 1;
        daemon.advance_to(next);
        if daemon.heartbeat_count(zone) > seen {
            return Ok(());
        }
    }
    Err(BenchError::NoHeartbeat(zone))
}

fn cold_once(daemon: &mut Daemon, clock: BenchClock) -> Result<f64, BenchError> {
    let timer = Timer::start(clock, daemon);
    let zone = daemon.create_zone(bench_spec(), false)?.id;
    await_heartbeat(daemon, zone, 0)?;
    let ms = timer.elapsed_ms(daemon);
    debug_assert_eq!(daemon.zone(zone).map(|z| z.state), Some(ZoneState::Active));
    daemon.destroy_zone(zone)?;
    Ok(ms)
}

fn warm_once(daemon: &mut Daemon, clock: BenchClock) -> Result<f64, BenchError> {
    let zone = daemon.create_zone(ZoneSpec::workload(BENCH_KERNEL, 0, 0), true)?.id;
    await_heartbeat(daemon, zone, 0)?;
    let seen = daemon.heartbeat_count(zone);

    let timer = Timer::start(clock, daemon);
    daemon.activate_zone(zone, BENCH_VCPUS, BENCH_MEMORY_MIB)?;
    await_heartbeat(daemon, zone, seen)?;
    let ms = timer.elapsed_ms(daemon);
    daemon.destroy_zone(zone)?;
    Ok(ms)
}

pub fn bench_startup(
    daemon: &mut Daemon,
    runs: usize,
    warm: bool,
    clock: BenchClock,
) -> Result<BenchReport, BenchError> {
    if runs < 2 {
        return Err(BenchError::TooFewRuns(runs));
    }
    if !daemon.probe() {
        return Err(BenchError::DaemonUnavailable);
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        samples.push(if warm {
            warm_once(daemon, clock)?
        } else {
            cold_once(daemon, clock)?
        });
    }
    let scenario = if warm { "startup-warm" } else { "startup-cold" };
    BenchReport::from_samples(scenario, clock, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupComparison {
    pub cold: BenchReport,
    pub warm: BenchReport,
}

impl StartupComparison {
    pub fn ratio(&self) -> f64 {
        self.warm.mean_ms / self.cold.mean_ms
    }
}

/// Cold and warm runs interleaved on one daemon so both see the same host
/// conditions.
pub fn compare_startup(daemon: &mut Daemon, runs: usize, clock: BenchClock) -> Result<StartupComparison, BenchError> {
    if runs < 2 {
        return Err(BenchError::TooFewRuns(runs));
    }
    if !daemon.probe() {
        return Err(BenchError::DaemonUnavailable);
    }
    let mut cold = Vec::with_capacity(runs);
    let mut warm = Vec::with_capacity(runs);
    for _ in 0..runs {
        cold.push(cold_once(daemon, clock)?);
        warm.push(warm_once(daemon, clock)?);
    }
    Ok(StartupComparison {
        cold: BenchReport::from_samples("startup-cold", clock, cold)?,
        warm: BenchReport::from_samples("startup-warm", clock, warm)?,
    })
}
