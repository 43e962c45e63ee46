//! Escape-analog scenarios. Each one builds a private simulated host,
//! attempts a class of container escape, and checks that the attempt stays
//! inside the zone that made it.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::daemon::{Daemon, DaemonConfig, DaemonError};
use crate::devices::AttachMode;
use crate::hv::{DomainId, HostConfig, HvEvent};
use crate::msg::{DeviceOp, DeviceStatus, MonitorKind};
use crate::net::NetProxy;
use crate::store::SyncMode;
use crate::zone::{ZoneId, ZoneRole, ZoneSpec, ZoneState};

pub const SCENARIOS: [&str; 3] = ["pagetable-write", "fd-namespace", "driver-fault"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario {0:?}")]
    Unknown(String),
    #[error("scenario failed: {0}")]
    Failed(String),
    #[error("setup failed: {0}")]
    Setup(String),
}

impl From<DaemonError> for ScenarioError {
    fn from(e: DaemonError) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

impl From<std::io::Error> for ScenarioError {
    fn from(e: std::io::Error) -> Self {
        ScenarioError::Setup(e.to_string())
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(ScenarioError::Failed(format!($($msg)+)));
        }
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for ScenarioOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} ({} ms)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_millis()
        )
    }
}

struct Host {
    daemon: Daemon,
    _dir: tempfile::TempDir,
}

impl Host {
    fn new() -> Result<Self, ScenarioError> {
        let dir = tempfile::tempdir()?;
        let mut cfg = DaemonConfig::new(HostConfig::with_memory_mib(8, 8192), dir.path().join("zones.log"));
        cfg.sync = SyncMode::FlushOnly;
        cfg.kernel_stage_bytes = 64 * 1024;
        let daemon = Daemon::open(cfg, NetProxy::new())?;
        Ok(Host { daemon, _dir: dir })
    }

    fn active_zone(&mut self, memory_mib: u64) -> Result<ZoneId, ScenarioError> {
        let id = self
            .daemon
            .create_zone(
                ZoneSpec::workload("ghcr.io/edera-dev/linux-kernel:latest", memory_mib, 1),
                false,
            )?
            .id;
        self.daemon.pump();
        match self.daemon.zone(id).map(|z| z.state) {
            Some(ZoneState::Active) => Ok(id),
            other => Err(ScenarioError::Setup(format!("zone {id} did not boot: {other:?}"))),
        }
    }

    fn states(&self) -> BTreeMap<ZoneId, ZoneState> {
        self.daemon.list_zones().into_iter().map(|z| (z.id, z.state)).collect()
    }
}

/// A guest tries to write page-table pages: its own, a neighbour's, and an
/// unowned hypervisor page. Every write must fault and nothing may change.
pub fn pagetable_write() -> Result<String, ScenarioError> {
    let mut host = Host::new()?;
    let attacker = host.active_zone(16)?;
    let victim = host.active_zone(16)?;
    host.daemon.write_zone_memory(victim, 0, b"victim secret")?;

    let domain_of = |d: &Daemon, z: ZoneId| DomainId(d.zone(z).and_then(|r| r.domain).expect("live zone"));
    let attacker_dom = domain_of(&host.daemon, attacker);
    let victim_dom = domain_of(&host.daemon, victim);
    let hv = host.daemon.hypervisor();
    let own_page = hv.domain_frames(attacker_dom).map_err(DaemonError::from)?[0];
    let victim_page = hv.domain_frames(victim_dom).map_err(DaemonError::from)?[0];
    let hv_page = (0..hv.config().page_count)
        .find(|p| hv.page_owner(*p).is_none())
        .unwrap_or(0);

    let digest = hv.ledger_digest();
    let states = host.states();
    let victim_mem = host.daemon.read_zone_memory(victim, 0, 4096)?;
    let owners: Vec<_> = [own_page, victim_page, hv_page]
        .iter()
        .map(|p| host.daemon.hypervisor().page_owner(*p))
        .collect();

    let targets = [own_page, victim_page, hv_page];
    for page in targets {
        let fault = host.daemon.guest_write_pagetable(attacker, page)?;
        ensure!(
            fault.domain == attacker_dom && fault.page == page,
            "fault for page {page} names the wrong domain or page"
        );
    }
    host.daemon.pump();

    let hv = host.daemon.hypervisor();
    ensure!(
        hv.ledger_digest() == digest,
        "ledger digest changed after faulting writes"
    );
    hv.check_invariants().map_err(ScenarioError::Failed)?;
    let denied = hv
        .events()
        .iter()
        .filter(|e| matches!(e, HvEvent::PagetableWriteDenied { domain, .. } if *domain == attacker_dom))
        .count();
    ensure!(
        denied == targets.len(),
        "expected {} denied writes, hypervisor logged {denied}",
        targets.len()
    );
    let owners_after: Vec<_> = targets.iter().map(|p| hv.page_owner(*p)).collect();
    ensure!(owners == owners_after, "page ownership changed");
    ensure!(
        host.daemon.read_zone_memory(victim, 0, 4096)? == victim_mem,
        "victim memory changed"
    );
    ensure!(host.states() == states, "zone states changed");
    let observed = host
        .daemon
        .monitor_events(attacker)
        .iter()
        .filter(|e| e.kind == MonitorKind::PagetableFaultObserved)
        .count();
    ensure!(
        observed == targets.len(),
        "monitor saw {observed} faults, expected {}",
        targets.len()
    );
    Ok(format!(
        "{} writes faulted, ledger {} unchanged",
        targets.len(),
        &digest[..12]
    ))
}

/// A zone holding a leaked store handle tries to reach keys outside its own
/// subtree.
pub fn fd_namespace() -> Result<String, ScenarioError> {
    let mut host = Host::new()?;
    let zone_a = host.active_zone(16)?;
    let zone_b = host.active_zone(16)?;
    host.daemon.kv_put("daemon/config", b"root-only")?;
    let b_handle = host.daemon.zone_store_handle(zone_b)?;
    let b_secret = format!("zone/{zone_b}/secret");
    host.daemon.handle_put(&b_handle, &b_secret, b"b-only")?;

    let leaked = host.daemon.zone_store_handle(zone_a)?;
    let a_key = format!("zone/{zone_a}/scratch");
    host.daemon.handle_put(&leaked, &a_key, b"a-data")?;
    ensure!(
        host.daemon.handle_get(&leaked, &a_key)? == b"a-data",
        "zone cannot read its own subtree"
    );

    let snapshot: BTreeMap<String, Vec<u8>> = host
        .daemon
        .kv_list("")
        .into_iter()
        .map(|k| {
            let v = host.daemon.kv_get(&k).unwrap_or_default();
            (k, v)
        })
        .collect();

    let forbidden = [
        b_secret.clone(),
        zone_b.store_key(),
        "daemon/config".to_string(),
        format!("zone/{zone_a}-suffix"),
        "zone/".to_string(),
        String::new(),
    ];
    let mut denied = 0;
    for key in &forbidden {
        ensure!(
            matches!(host.daemon.handle_get(&leaked, key), Err(DaemonError::AccessDenied(_))),
            "read of {key:?} was not denied"
        );
        ensure!(
            matches!(
                host.daemon.handle_put(&leaked, key, b"pwned"),
                Err(DaemonError::AccessDenied(_))
            ),
            "write of {key:?} was not denied"
        );
        denied += 2;
    }
    ensure!(
        matches!(
            host.daemon.handle_put(&leaked, &zone_a.store_key(), b"pwned"),
            Err(DaemonError::AccessDenied(_))
        ),
        "zone could rewrite its own control record"
    );
    denied += 1;
    let visible = host.daemon.handle_list(&leaked, "");
    ensure!(
        visible
            .iter()
            .all(|k| k == &zone_a.store_key() || k.starts_with(&format!("zone/{zone_a}/"))),
        "listing exposed foreign keys: {visible:?}"
    );
    for (k, v) in &snapshot {
        ensure!(host.daemon.kv_get(k).ok().as_ref() == Some(v), "key {k} changed");
    }

    host.daemon.destroy_zone(zone_a)?;
    ensure!(
        host.daemon.handle_get(&leaked, &a_key).is_err(),
        "handle still works after its zone was destroyed"
    );
    Ok(format!("{denied} cross-namespace accesses denied"))
}

/// A partitioned device's driver zone crashes. Only the driver zone may
/// change state, and the device must come back on a fresh driver zone.
pub fn driver_fault() -> Result<String, ScenarioError> {
    let mut host = Host::new()?;
    let apps: Vec<ZoneId> = (0..3).map(|_| host.active_zone(16)).collect::<Result<_, _>>()?;
    let driver_spec = ZoneSpec {
        role: ZoneRole::Driver,
        ..ZoneSpec::workload("ghcr.io/edera-dev/linux-kernel:latest", 32, 1)
    };
    let attachment = host
        .daemon
        .attach_device("gpu0", AttachMode::Partitioned { slices: 2 }, driver_spec.clone())?;
    let driver = attachment.driver_zone;
    host.daemon.pump();
    host.daemon.bind_slice("gpu0", 0, apps[0])?;
    host.daemon.bind_slice("gpu0", 1, apps[1])?;
    let wrote = host.daemon.device_request(
        apps[0],
        "gpu0",
        0,
        DeviceOp::Write {
            offset: 0,
            data: b"tensor".to_vec(),
        },
    )?;
    ensure!(wrote.status == DeviceStatus::Ok, "device write failed before the fault");

    let before = host.states();
    let digest_of = |d: &Daemon, zones: &[ZoneId]| -> Vec<Option<crate::hv::DomainInfo>> {
        zones
            .iter()
            .map(|z| {
                d.zone(*z)
                    .and_then(|r| r.domain)
                    .and_then(|dom| d.hypervisor().domain(DomainId(dom)))
            })
            .collect()
    };
    let app_domains = digest_of(&host.daemon, &apps);

    host.daemon.inject_driver_fault("gpu0")?;
    ensure!(
        matches!(
            host.daemon
                .device_request(apps[0], "gpu0", 0, DeviceOp::Read { offset: 0, len: 6 }),
            Err(DaemonError::DriverUnavailable(_))
        ),
        "request to a faulted driver did not fail with DriverUnavailable"
    );
    let now = host.daemon.now();
    host.daemon.supervise(now);

    let after = host.states();
    let changed: Vec<ZoneId> = before
        .iter()
        .filter(|(id, state)| after.get(id) != Some(state))
        .map(|(id, _)| *id)
        .collect();
    ensure!(
        changed == vec![driver],
        "zones other than the driver changed state: {changed:?}"
    );
    ensure!(
        after.get(&driver) == Some(&ZoneState::Deprovisioned),
        "driver zone is {:?}, not deprovisioned",
        after.get(&driver)
    );
    ensure!(
        digest_of(&host.daemon, &apps) == app_domains,
        "app zone domains changed"
    );
    host.daemon
        .hypervisor()
        .check_invariants()
        .map_err(ScenarioError::Failed)?;
    let echo = host
        .daemon
        .exec_in_zone(apps[0], &["echo".into(), "alive".into()], &[])?;
    ensure!(
        echo.stdout == b"alive\n",
        "client zone stopped answering after the fault"
    );

    let again = host
        .daemon
        .attach_device("gpu0", AttachMode::Partitioned { slices: 2 }, driver_spec)?;
    ensure!(again.driver_zone != driver, "re-attach reused the dead driver zone");
    host.daemon.pump();
    let read = host
        .daemon
        .device_request(apps[0], "gpu0", 0, DeviceOp::Read { offset: 0, len: 6 })?;
    ensure!(read.status == DeviceStatus::Ok, "device did not resume after re-attach");
    ensure!(read.data == vec![0; 6], "device memory survived the driver restart");
    Ok(format!(
        "driver {driver} retired, {} app zones untouched, device resumed",
        apps.len()
    ))
}

pub fn run(name: &str) -> Result<String, ScenarioError> {
    match name {
        "pagetable-write" => pagetable_write(),
        "fd-namespace" => fd_namespace(),
        "driver-fault" => driver_fault(),
        other => Err(ScenarioError::Unknown(other.to_string())),
    }
}

fn outcome(name: &str) -> ScenarioOutcome {
    let start = Instant::now();
    let result = run(name);
    ScenarioOutcome {
        name: name.to_string(),
        passed: result.is_ok(),
        detail: match result {
            Ok(detail) => detail,
            Err(e) => e.to_string(),
        },
        elapsed: start.elapsed(),
    }
}

/// Runs one scenario by name, or every scenario for `"all"`.
pub fn run_named(name: &str) -> Result<Vec<ScenarioOutcome>, ScenarioError> {
    if name == "all" {
        return Ok(SCENARIOS.iter().map(|n| outcome(n)).collect());
    }
    if !SCENARIOS.contains(&name) {
        return Err(ScenarioError::Unknown(name.to_string()));
    }
    Ok(vec![outcome(name)])
}
