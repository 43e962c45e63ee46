//! Service supervision with restart backoff, and the metrics exposition.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::daemon::Daemon;
use crate::net::{Counters, NetProxy};
use crate::zone::ZoneState;

pub const BACKOFF_BASE_MS: u64 = 250;
pub const BACKOFF_CAP_MS: u64 = 8000;

/// A supervised service exposes a liveness probe and a restart hook.
pub trait Supervised {
    fn name(&self) -> &str;
    fn probe(&self) -> bool;
    /// Returns whether the restart succeeded.
    fn restart(&mut self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HealthStatus {
    Healthy,
    /// Restarted during this sweep; confirmed at the next one.
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceHealth {
    pub service: String,
    pub status: HealthStatus,
    pub restarts: u64,
    pub last_check: u64,
}

#[derive(Debug, Clone, Default)]
struct Tracker {
    restarts: u64,
    status: Option<HealthStatus>,
    last_check: u64,
    /// Restarts in the current failure streak.
    streak: u32,
    last_restart: Option<u64>,
}

/// Delay required after the previous restart before restart number
/// `streak` (0-based) of a failure streak may run.
pub fn backoff_delay(streak: u32) -> u64 {
    if streak == 0 {
        return 0;
    }
    let exp = (streak - 1).min(16);
    (BACKOFF_BASE_MS << exp).min(BACKOFF_CAP_MS)
}

#[derive(Debug, Default)]
pub struct Orchestrator {
    services: BTreeMap<String, Tracker>,
}

impl Orchestrator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Probes each service and restarts the failed ones whose backoff has
    /// elapsed.
    pub fn health_sweep(&mut self, now: u64, services: &mut [&mut dyn Supervised]) -> Vec<ServiceHealth> {
        let mut out = Vec::with_capacity(services.len());
        for svc in services.iter_mut() {
            let t = self.services.entry(svc.name().to_string()).or_default();
            t.last_check = now;
            let status = if svc.probe() {
                t.streak = 0;
                t.last_restart = None;
                HealthStatus::Healthy
            } else {
                let due = t.last_restart.is_none_or(|at| now >= at + backoff_delay(t.streak));
                if due {
                    t.restarts += 1;
                    t.streak += 1;
                    t.last_restart = Some(now);
                    if svc.restart() && svc.probe() {
                        HealthStatus::Degraded
                    } else {
                        HealthStatus::Failed
                    }
                } else {
                    HealthStatus::Failed
                }
            };
            t.status = Some(status);
            out.push(ServiceHealth {
                service: svc.name().to_string(),
                status,
                restarts: t.restarts,
                last_check: now,
            });
        }
        out
    }

    pub fn health(&self) -> Vec<ServiceHealth> {
        self.services
            .iter()
            .filter_map(|(name, t)| {
                Some(ServiceHealth {
                    service: name.clone(),
                    status: t.status?,
                    restarts: t.restarts,
                    last_check: t.last_check,
                })
            })
            .collect()
    }

    pub fn restarts(&self, service: &str) -> u64 {
        self.services.get(service).map_or(0, |t| t.restarts)
    }
}

type Labels = Vec<(String, String)>;

/// Collects metric samples and renders them sorted by name, then labels.
#[derive(Debug, Default)]
pub struct MetricSet {
    samples: Vec<(String, Labels, u64)>,
}

impl MetricSet {
    pub fn push(&mut self, name: &str, labels: &[(&str, &str)], value: u64) {
        self.samples.push((
            name.to_string(),
            labels.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            value,
        ));
    }

    pub fn render(mut self) -> String {
        self.samples.sort();
        let mut out = String::new();
        for (name, labels, value) in self.samples {
            out.push_str(&name);
            if !labels.is_empty() {
                out.push('{');
                for (i, (k, v)) in labels.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "{k}=\"{v}\"");
                }
                out.push('}');
            }
            let _ = writeln!(out, " {value}");
        }
        out
    }
}

fn push_counters(m: &mut MetricSet, prefix: &str, labels: &[(&str, &str)], c: &Counters) {
    let fields = [
        ("packets_seen_total", c.packets_seen),
        ("packets_delivered_total", c.packets_delivered),
        ("packets_dropped_total", c.packets_dropped),
        ("bytes_seen_total", c.bytes_seen),
        ("bytes_delivered_total", c.bytes_delivered),
        ("bytes_dropped_total", c.bytes_dropped),
        ("stream_bytes_total", c.stream_bytes),
    ];
    for (suffix, value) in fields {
        m.push(&format!("{prefix}_{suffix}"), labels, value);
    }
}

pub fn render_metrics(daemon: &Daemon, proxy: &NetProxy, health: &[ServiceHealth]) -> String {
    let mut m = MetricSet::default();
    for (state, count) in daemon.zone_counts() {
        m.push("edera_zones", &[("state", state.label())], count);
    }
    debug_assert_eq!(ZoneState::ALL.len(), daemon.zone_counts().len());

    let ledger = daemon.ledger();
    m.push("edera_host_pages_total", &[], ledger.total_pages);
    m.push("edera_host_free_pages", &[], ledger.free_pages);
    m.push("edera_host_cpus_total", &[], ledger.cpu_grants.len() as u64);
    m.push("edera_host_free_cpus", &[], ledger.free_cpus() as u64);

    let traffic = proxy.snapshot_counters();
    push_counters(&mut m, "edera_net", &[], &traffic.total);
    for (zone, c) in &traffic.per_zone {
        let zone = zone.to_string();
        push_counters(&mut m, "edera_net_zone", &[("zone", &zone)], c);
    }

    for h in health {
        m.push("edera_service_restarts_total", &[("service", &h.service)], h.restarts);
        m.push(
            "edera_service_up",
            &[("service", &h.service)],
            u64::from(h.status != HealthStatus::Failed),
        );
    }
    m.render()
}
