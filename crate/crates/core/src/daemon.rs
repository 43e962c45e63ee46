//! The zone daemon: owns the simulated hypervisor, the zone store, every
//! zone's IDM channel and init agent, and device attachments.
//!
//! All mutations go through `&mut Daemon`, which gives the single-writer
//! discipline the control plane relies on. Time is logical milliseconds,
//! advanced by the caller with [`Daemon::advance_to`].

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use log::{debug, info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AgentConfig, CommandTable, InitAgent, DEFAULT_HEARTBEAT_INTERVAL_MS};
use crate::devices::{AttachMode, AttachmentSummary, DeviceAttachment, DEFAULT_SLICE_BYTES};
use crate::hv::{
    CpuPolicy, DomainId, HostConfig, HvError, Hypervisor, PermissionFault, ResourceLedger, DEFAULT_WEIGHT,
};
use crate::idm::{channel, ChannelEndpoint, ChannelError, Frame, MsgType, DEFAULT_INFLIGHT_BUDGET};
use crate::msg::{
    DeviceOp, DeviceReply, DeviceRequest, ExecOutput, ExecRequest, ExitEvent, Heartbeat, LogLine, MonitorEvent,
    MonitorKind, OutputFd, Payload,
};
use crate::net::NetProxy;
use crate::store::{KvStore, Recovery, StoreError, SyncMode};
use crate::zone::{
    transition, IdGenerator, IllegalTransition, LifecycleEvent, SpecError, WorkloadBinding, ZoneId, ZoneRecord,
    ZoneRole, ZoneSpec, ZoneState,
};

pub const ZONE_PREFIX: &str = "zone/";
const MONITOR_LOG_CAP: usize = 1024;
const UNTRUSTED_LOG_CAP: usize = 4096;
const EXEC_PUMP_LIMIT: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub host: HostConfig,
    pub store_path: PathBuf,
    pub sync: SyncMode,
    pub heartbeat_interval_ms: u64,
    pub heartbeat_timeout_ms: u64,
    /// Logical time between domain creation and the guest's first tick.
    pub guest_boot_ms: u64,
    pub inflight_budget: usize,
    /// Bytes of kernel image staged into guest memory at zone creation.
    pub kernel_stage_bytes: usize,
    pub slice_bytes: usize,
    /// Seed for deterministic zone ids; random when absent.
    pub id_seed: Option<u64>,
}

impl DaemonConfig {
    pub fn new(host: HostConfig, store_path: impl Into<PathBuf>) -> Self {
        DaemonConfig {
            host,
            store_path: store_path.into(),
            sync: SyncMode::Always,
            heartbeat_interval_ms: DEFAULT_HEARTBEAT_INTERVAL_MS,
            heartbeat_timeout_ms: 3 * DEFAULT_HEARTBEAT_INTERVAL_MS,
            guest_boot_ms: 0,
            inflight_budget: DEFAULT_INFLIGHT_BUDGET,
            kernel_stage_bytes: 4 * 1024 * 1024,
            slice_bytes: DEFAULT_SLICE_BYTES,
            id_seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), DaemonError> {
        if self.heartbeat_interval_ms < crate::agent::MIN_HEARTBEAT_INTERVAL_MS {
            return Err(DaemonError::BadConfig("heartbeat interval below 10 ms"));
        }
        if self.heartbeat_timeout_ms < 2 * self.heartbeat_interval_ms {
            return Err(DaemonError::BadConfig("heartbeat timeout must cover two intervals"));
        }
        if self.inflight_budget == 0 {
            return Err(DaemonError::BadConfig("inflight budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error(transparent)]
    Hv(#[from] HvError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    IllegalTransition(#[from] IllegalTransition),
    #[error(transparent)]
    InvalidSpec(#[from] SpecError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("no such zone {0}")]
    NoSuchZone(ZoneId),
    #[error("device {0} is busy")]
    DeviceBusy(String),
    #[error("no such device {0}")]
    NoSuchDevice(String),
    #[error("device {device} has no slice {slice}")]
    NoSuchSlice { device: String, slice: u32 },
    #[error("driver for device {0} is unavailable")]
    DriverUnavailable(String),
    #[error("zone {0} is not active")]
    ZoneNotActive(ZoneId),
    #[error("access denied: {0}")]
    AccessDenied(String),
    #[error("zone {0} did not answer")]
    ZoneUnresponsive(ZoneId),
    #[error("request too large for one frame")]
    RequestTooLarge,
    #[error("corrupt record under {0}")]
    CorruptRecord(String),
    #[error("invalid daemon configuration: {0}")]
    BadConfig(&'static str),
    #[error("daemon is down")]
    Down,
}

impl DaemonError {
    pub fn is_resource_shortage(&self) -> bool {
        matches!(
            self,
            DaemonError::Hv(HvError::InsufficientMemory { .. } | HvError::InsufficientCpus { .. })
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub zone: ZoneId,
    pub from: ZoneState,
    pub to: ZoneState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecResult {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub exit_code: i32,
    /// Number of ExecOutput frames received.
    pub output_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UntrustedLog {
    pub zone: ZoneId,
    pub at: u64,
    pub level: u8,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultReport {
    pub device_id: String,
    pub driver_zone: ZoneId,
    pub failed_requests: usize,
}

/// Capability a zone holds for its own slice of the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoneStoreHandle {
    zone: ZoneId,
}

impl ZoneStoreHandle {
    pub fn zone(&self) -> ZoneId {
        self.zone
    }

    fn record_key(&self) -> String {
        self.zone.store_key()
    }

    fn subtree(&self) -> String {
        format!("{}/", self.zone.store_key())
    }
}

/// Serialized zone state used by migration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneImage {
    pub record: ZoneRecord,
    pub weight: u32,
    /// Non-zero guest pages as (guest frame, contents).
    pub pages: Vec<(u64, Vec<u8>)>,
}

#[derive(Debug)]
struct ZoneRuntime {
    endpoint: ChannelEndpoint,
    agent: InitAgent,
    boot_warm: bool,
    heartbeats: u64,
}

#[derive(Debug, Default)]
struct StreamCollector {
    result: ExecResult,
    done: bool,
}

#[derive(Debug)]
pub struct Daemon {
    config: DaemonConfig,
    hv: Hypervisor,
    store: KvStore,
    proxy: Arc<NetProxy>,
    records: BTreeMap<ZoneId, ZoneRecord>,
    runtimes: BTreeMap<ZoneId, ZoneRuntime>,
    devices: BTreeMap<String, DeviceAttachment>,
    ids: IdGenerator,
    now: u64,
    next_stream: u32,
    exec_streams: HashMap<(ZoneId, u32), StreamCollector>,
    device_replies: HashMap<(ZoneId, u32), DeviceReply>,
    monitor: HashMap<ZoneId, Vec<MonitorEvent>>,
    untrusted_logs: Vec<UntrustedLog>,
    mutations: u64,
    down: bool,
    recovery: Recovery,
}

impl Daemon {
    pub fn open(config: DaemonConfig, proxy: Arc<NetProxy>) -> Result<Self, DaemonError> {
        config.validate()?;
        let hv = Hypervisor::new(config.host)?;
        let (store, recovery) = KvStore::open_with(&config.store_path, config.sync)?;
        let ids = match config.id_seed {
            Some(seed) => IdGenerator::seeded(seed),
            None => IdGenerator::Random,
        };
        let mut daemon = Daemon {
            config,
            hv,
            store,
            proxy,
            records: BTreeMap::new(),
            runtimes: BTreeMap::new(),
            devices: BTreeMap::new(),
            ids,
            now: 0,
            next_stream: 1,
            exec_streams: HashMap::new(),
            device_replies: HashMap::new(),
            monitor: HashMap::new(),
            untrusted_logs: Vec::new(),
            mutations: 0,
            down: false,
            recovery,
        };
        daemon.load_records()?;
        Ok(daemon)
    }

    /// Loads records from the store. Domains do not survive a restart, so
    /// every live record is retired to a tombstone.
    fn load_records(&mut self) -> Result<(), DaemonError> {
        for key in self.store.list(ZONE_PREFIX) {
            if key[ZONE_PREFIX.len()..].contains('/') {
                continue;
            }
            let raw = self.store.get(&key)?;
            let mut record: ZoneRecord =
                serde_json::from_slice(raw).map_err(|_| DaemonError::CorruptRecord(key.clone()))?;
            if record.state.is_live() {
                info!("zone {} did not survive restart; retiring", record.id);
                record.state = ZoneState::Deprovisioned;
                record.domain = None;
                record.granted_cpus.clear();
                record.granted_pages = 0;
                self.store
                    .put(&key, &serde_json::to_vec(&record).expect("record serializes"))?;
            }
            self.records.insert(record.id, record);
        }
        Ok(())
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.config
    }

    pub fn recovery(&self) -> Recovery {
        self.recovery
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn hypervisor(&self) -> &Hypervisor {
        &self.hv
    }

    pub fn ledger(&self) -> ResourceLedger {
        self.hv.ledger()
    }

    pub fn proxy(&self) -> &Arc<NetProxy> {
        &self.proxy
    }

    /// Count of mutating requests this daemon has served.
    pub fn mutations(&self) -> u64 {
        self.mutations
    }

    pub fn zone(&self, id: ZoneId) -> Option<&ZoneRecord> {
        self.records.get(&id)
    }

    /// Every record, tombstones included, ordered by id.
    pub fn list_zones(&self) -> Vec<ZoneRecord> {
        self.records.values().cloned().collect()
    }

    pub fn live_zones(&self) -> impl Iterator<Item = &ZoneRecord> {
        self.records.values().filter(|r| r.state.is_live())
    }

    pub fn zone_counts(&self) -> BTreeMap<ZoneState, u64> {
        let mut counts: BTreeMap<ZoneState, u64> = ZoneState::ALL.iter().map(|s| (*s, 0)).collect();
        for r in self.records.values() {
            *counts.get_mut(&r.state).unwrap() += 1;
        }
        counts
    }

    pub fn monitor_events(&self, id: ZoneId) -> &[MonitorEvent] {
        self.monitor.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Logs forwarded by zones. Never parsed for control decisions.
    pub fn untrusted_logs(&self) -> &[UntrustedLog] {
        &self.untrusted_logs
    }

    /// Heartbeats received from a zone since it was created.
    pub fn heartbeat_count(&self, id: ZoneId) -> u64 {
        self.runtimes.get(&id).map_or(0, |rt| rt.heartbeats)
    }

    pub fn agent_mut(&mut self, id: ZoneId) -> Option<&mut InitAgent> {
        self.runtimes.get_mut(&id).map(|rt| &mut rt.agent)
    }

    pub fn disable_agent(&mut self, id: ZoneId) -> Result<(), DaemonError> {
        self.agent_mut(id).ok_or(DaemonError::NoSuchZone(id))?.disable();
        Ok(())
    }

    pub fn set_commands(&mut self, id: ZoneId, commands: CommandTable) -> Result<(), DaemonError> {
        *self.agent_mut(id).ok_or(DaemonError::NoSuchZone(id))?.commands_mut() = commands;
        Ok(())
    }

    // --- liveness ---------------------------------------------------------

    pub fn probe(&self) -> bool {
        !self.down
    }

    pub fn crash(&mut self) {
        self.down = true;
    }

    pub fn restart(&mut self) {
        self.down = false;
    }

    fn ensure_up(&self) -> Result<(), DaemonError> {
        if self.down {
            return Err(DaemonError::Down);
        }
        Ok(())
    }

    // --- store ------------------------------------------------------------

    pub fn kv_put(&mut self, key: &str, value: &[u8]) -> Result<(), DaemonError> {
        self.ensure_up()?;
        self.store.put(key, value)?;
        Ok(())
    }

    pub fn kv_get(&self, key: &str) -> Result<Vec<u8>, DaemonError> {
        Ok(self.store.get(key)?.to_vec())
    }

    pub fn kv_list(&self, prefix: &str) -> Vec<String> {
        self.store.list(prefix)
    }

    pub fn compact_store(&mut self) -> Result<(), DaemonError> {
        self.store.compact()?;
        Ok(())
    }

    fn persist(&mut self, record: ZoneRecord) -> Result<(), DaemonError> {
        let value = serde_json::to_vec(&record).expect("record serializes");
        self.store.put(&record.id.store_key(), &value)?;
        self.records.insert(record.id, record);
        Ok(())
    }

    pub fn zone_store_handle(&self, id: ZoneId) -> Result<ZoneStoreHandle, DaemonError> {
        match self.records.get(&id) {
            Some(r) if r.state.is_live() => Ok(ZoneStoreHandle { zone: id }),
            _ => Err(DaemonError::NoSuchZone(id)),
        }
    }

    fn check_handle(&self, handle: &ZoneStoreHandle, key: &str, write: bool) -> Result<(), DaemonError> {
        if !self.records.get(&handle.zone).is_some_and(|r| r.state.is_live()) {
            return Err(DaemonError::AccessDenied(format!(
                "handle for {} is revoked",
                handle.zone
            )));
        }
        let in_subtree = key.starts_with(&handle.subtree()) && key.len() > handle.subtree().len();
        let own_record = key == handle.record_key();
        if in_subtree || (own_record && !write) {
            Ok(())
        } else {
            Err(DaemonError::AccessDenied(format!(
                "zone {} may not {} {key}",
                handle.zone,
                if write { "write" } else { "read" }
            )))
        }
    }

    pub fn handle_get(&self, handle: &ZoneStoreHandle, key: &str) -> Result<Vec<u8>, DaemonError> {
        self.check_handle(handle, key, false)?;
        self.kv_get(key)
    }

    pub fn handle_put(&mut self, handle: &ZoneStoreHandle, key: &str, value: &[u8]) -> Result<(), DaemonError> {
        self.check_handle(handle, key, true)?;
        self.kv_put(key, value)
    }

    /// Keys visible to the handle under `prefix`.
    pub fn handle_list(&self, handle: &ZoneStoreHandle, prefix: &str) -> Vec<String> {
        self.kv_list(prefix)
            .into_iter()
            .filter(|k| self.check_handle(handle, k, false).is_ok())
            .collect()
    }

    // --- lifecycle --------------------------------------------------------

    fn fresh_id(&mut self) -> ZoneId {
        loop {
            let id = self.ids.next_id();
            if !self.records.contains_key(&id) {
                return id;
            }
        }
    }

    /// Synthetic kernel image for `reference`, deterministic per name.
    fn stage_kernel(&self, reference: &str) -> Vec<u8> {
        let seed: [u8; 32] = Sha256::digest(reference.as_bytes()).into();
        let mut image = vec![0u8; self.config.kernel_stage_bytes];
        ChaCha20Rng::from_seed(seed).fill_bytes(&mut image);
        image
    }

    pub fn create_zone(&mut self, spec: ZoneSpec, warm: bool) -> Result<ZoneRecord, DaemonError> {
        self.create_zone_for(spec, warm, None)
    }

    pub fn create_zone_for(
        &mut self,
        spec: ZoneSpec,
        warm: bool,
        workload: Option<WorkloadBinding>,
    ) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        spec.validate(warm)?;
        let handle = self.hv.create_domain(&spec, DEFAULT_WEIGHT, CpuPolicy::Shared)?;
        let domain = handle.domain_id;

        let image = self.stage_kernel(&spec.kernel_image);
        let guest_bytes = self.hv.domain(domain).map_or(0, |d| d.pages) * self.config.host.page_bytes() as u64;
        let load = image.len().min(guest_bytes as usize);
        if load > 0 {
            self.hv.write_guest(domain, 0, &image[..load])?;
        }

        let id = self.fresh_id();
        let record = ZoneRecord {
            id,
            spec,
            state: ZoneState::Provisioning,
            domain: Some(domain.0),
            granted_cpus: Default::default(),
            granted_pages: self.hv.domain(domain).map_or(0, |d| d.pages),
            last_heartbeat: None,
            workload,
            created_at: self.now,
        };
        if let Err(e) = self.persist(record.clone()) {
            self.hv.destroy_domain(domain)?;
            return Err(e);
        }

        let (daemon_end, zone_end) = channel(self.config.inflight_budget);
        let agent_config = AgentConfig {
            zone_id: id,
            heartbeat_interval_ms: self.config.heartbeat_interval_ms,
        };
        let agent = InitAgent::new(agent_config, zone_end, self.now + self.config.guest_boot_ms)
            .map_err(|_| DaemonError::BadConfig("heartbeat interval"))?;
        self.runtimes.insert(
            id,
            ZoneRuntime {
                endpoint: daemon_end,
                agent,
                boot_warm: warm,
                heartbeats: 0,
            },
        );
        self.mutations += 1;
        debug!("created zone {id} on {domain}");
        Ok(record)
    }

    fn apply_event(&mut self, id: ZoneId, event: LifecycleEvent) -> Result<StateChange, DaemonError> {
        let mut record = self.records.get(&id).cloned().ok_or(DaemonError::NoSuchZone(id))?;
        let from = record.state;
        record.state = transition(from, event)?;
        let to = record.state;
        match to {
            ZoneState::Active => {
                record.last_heartbeat = Some(self.now);
                self.proxy.register_zone(id);
            }
            ZoneState::Quarantined => self.proxy.set_quarantined(id, true),
            _ => {}
        }
        if from == ZoneState::Quarantined && to == ZoneState::Active {
            self.proxy.set_quarantined(id, false);
        }
        self.persist(record)?;
        Ok(StateChange { zone: id, from, to })
    }

    pub fn activate_zone(&mut self, id: ZoneId, cpus: u32, memory_mib: u64) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        let record = self.records.get(&id).cloned().ok_or(DaemonError::NoSuchZone(id))?;
        transition(record.state, LifecycleEvent::Activate)?;
        let domain = DomainId(record.domain.expect("live zone has a domain"));
        if cpus > self.hv.config().cpu_count {
            return Err(HvError::InsufficientCpus {
                requested: cpus,
                available: self.hv.config().cpu_count,
            }
            .into());
        }
        if memory_mib > 0 {
            self.hv.grow_memory(domain, memory_mib)?;
        }
        self.hv.set_vcpus(domain, cpus)?;

        let mut record = record;
        record.spec.memory_mib += memory_mib;
        record.spec.vcpus = cpus;
        record.granted_pages = self.hv.domain(domain).map_or(0, |d| d.pages);
        self.records.insert(id, record);
        self.apply_event(id, LifecycleEvent::Activate)?;
        // Ask the agent for a prompt heartbeat so activation is confirmed
        // without waiting a full interval.
        if let Some(rt) = self.runtimes.get(&id) {
            let ping = Heartbeat::default().to_frame(0).expect("empty heartbeat");
            if let Err(e) = rt.endpoint.send(&ping) {
                warn!("zone {id}: activation ping not sent: {e}");
            }
        }
        self.mutations += 1;
        Ok(self.records[&id].clone())
    }

    pub fn quarantine_zone(&mut self, id: ZoneId) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        self.apply_event(id, LifecycleEvent::Quarantine)?;
        self.mutations += 1;
        Ok(self.records[&id].clone())
    }

    pub fn release_zone(&mut self, id: ZoneId) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        self.apply_event(id, LifecycleEvent::Release)?;
        self.mutations += 1;
        Ok(self.records[&id].clone())
    }

    pub fn destroy_zone(&mut self, id: ZoneId) -> Result<(), DaemonError> {
        self.ensure_up()?;
        match self.records.get(&id) {
            Some(r) if r.state.is_live() => {}
            _ => return Err(DaemonError::NoSuchZone(id)),
        }
        self.deprovision(id)?;
        self.mutations += 1;
        Ok(())
    }

    fn deprovision(&mut self, id: ZoneId) -> Result<StateChange, DaemonError> {
        let mut record = self.records.get(&id).cloned().ok_or(DaemonError::NoSuchZone(id))?;
        let from = record.state;
        let to = transition(from, LifecycleEvent::Destroy)?;
        if let Some(d) = record.domain.take() {
            self.hv.destroy_domain(DomainId(d))?;
        }
        if let Some(rt) = self.runtimes.remove(&id) {
            rt.endpoint.close();
        }
        for attachment in self.devices.values_mut() {
            for slice in attachment.slices_of(id) {
                attachment.memory.wipe(slice);
                attachment.slices.insert(slice, None);
            }
        }
        self.proxy.remove_zone(id);
        record.state = to;
        record.granted_cpus.clear();
        record.granted_pages = 0;
        self.persist(record)?;
        info!("zone {id} deprovisioned (was {from})");
        Ok(StateChange { zone: id, from, to })
    }

    pub fn pin_zone_cpu(&mut self, id: ZoneId, cpu: u32) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        let mut record = self.live_record(id)?;
        self.hv.pin_cpu(DomainId(record.domain.unwrap()), cpu)?;
        record.granted_cpus.insert(cpu);
        self.persist(record.clone())?;
        self.mutations += 1;
        Ok(record)
    }

    pub fn unpin_zone_cpu(&mut self, id: ZoneId, cpu: u32) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        let mut record = self.live_record(id)?;
        self.hv.unpin_cpu(DomainId(record.domain.unwrap()), cpu)?;
        record.granted_cpus.remove(&cpu);
        self.persist(record.clone())?;
        self.mutations += 1;
        Ok(record)
    }

    /// Grows a running zone's memory without touching its state.
    pub fn grow_zone_memory(&mut self, id: ZoneId, additional_mib: u64) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        let mut record = self.live_record(id)?;
        if !matches!(record.state, ZoneState::Active | ZoneState::Quarantined) {
            return Err(DaemonError::ZoneNotActive(id));
        }
        record.granted_pages = self.hv.grow_memory(DomainId(record.domain.unwrap()), additional_mib)?;
        record.spec.memory_mib += additional_mib;
        self.persist(record.clone())?;
        self.mutations += 1;
        Ok(record)
    }

    fn live_record(&self, id: ZoneId) -> Result<ZoneRecord, DaemonError> {
        match self.records.get(&id) {
            Some(r) if r.state.is_live() => Ok(r.clone()),
            _ => Err(DaemonError::NoSuchZone(id)),
        }
    }

    /// Moves a zone onto a fresh domain: its record and non-zero memory are
    /// serialized, restored onto a new domain, and the old domain released.
    /// On failure the zone stays where it was.
    pub fn migrate_zone(&mut self, id: ZoneId) -> Result<ZoneRecord, DaemonError> {
        self.ensure_up()?;
        let image = self.export_zone(id)?;
        let old = DomainId(image.record.domain.unwrap());
        let handle = self
            .hv
            .create_domain(&image.record.spec, image.weight, CpuPolicy::Shared)?;
        let new = handle.domain_id;
        let page_bytes = self.config.host.page_bytes() as u64;
        for (frame, data) in &image.pages {
            if let Err(e) = self.hv.write_guest(new, frame * page_bytes, data) {
                self.hv.destroy_domain(new)?;
                return Err(e.into());
            }
        }
        self.hv.destroy_domain(old)?;
        for cpu in &image.record.granted_cpus {
            self.hv.pin_cpu(new, *cpu)?;
        }
        let mut record = image.record;
        record.domain = Some(new.0);
        record.granted_pages = self.hv.domain(new).map_or(0, |d| d.pages);
        self.persist(record.clone())?;
        self.mutations += 1;
        Ok(record)
    }

    pub fn export_zone(&self, id: ZoneId) -> Result<ZoneImage, DaemonError> {
        let record = self.live_record(id)?;
        let domain = DomainId(record.domain.unwrap());
        let info = self.hv.domain(domain).ok_or(HvError::NoSuchDomain(domain))?;
        let page_bytes = self.config.host.page_bytes();
        let mut pages = Vec::new();
        for frame in 0..info.pages {
            let data = self.hv.read_guest(domain, frame * page_bytes as u64, page_bytes)?;
            if data.iter().any(|&b| b != 0) {
                pages.push((frame, data));
            }
        }
        Ok(ZoneImage {
            record,
            weight: info.weight,
            pages,
        })
    }

    pub fn write_zone_memory(&mut self, id: ZoneId, addr: u64, data: &[u8]) -> Result<(), DaemonError> {
        let record = self.live_record(id)?;
        self.hv.write_guest(DomainId(record.domain.unwrap()), addr, data)?;
        Ok(())
    }

    pub fn read_zone_memory(&self, id: ZoneId, addr: u64, len: usize) -> Result<Vec<u8>, DaemonError> {
        let record = self.live_record(id)?;
        Ok(self.hv.read_guest(DomainId(record.domain.unwrap()), addr, len)?)
    }

    /// A guest in `id` tries to write a page-table page. The hypervisor
    /// refuses; the zone's own monitor reports the fault.
    pub fn guest_write_pagetable(&mut self, id: ZoneId, page: u64) -> Result<PermissionFault, DaemonError> {
        let record = self.live_record(id)?;
        let fault = self.hv.guest_write_pagetable(DomainId(record.domain.unwrap()), page);
        if let Some(rt) = self.runtimes.get_mut(&id) {
            rt.agent.observe(MonitorEvent::new(
                MonitorKind::PagetableFaultObserved,
                format!("write to page {page} denied"),
                self.now,
            ));
        }
        Ok(fault)
    }

    // --- time, IDM, supervision --------------------------------------------

    /// Advances logical time, runs every agent, handles their frames, and
    /// supervises heartbeats. Returns the resulting state changes.
    pub fn advance_to(&mut self, now: u64) -> Vec<StateChange> {
        self.now = self.now.max(now);
        if self.down {
            return Vec::new();
        }
        let mut changes = self.pump();
        changes.extend(self.supervise(self.now));
        changes
    }

    /// Runs each agent once at the current time and drains its frames.
    pub fn pump(&mut self) -> Vec<StateChange> {
        let ids: Vec<ZoneId> = self.runtimes.keys().copied().collect();
        let mut changes = Vec::new();
        for id in ids {
            changes.extend(self.pump_zone(id));
        }
        changes
    }

    fn pump_zone(&mut self, id: ZoneId) -> Vec<StateChange> {
        let now = self.now;
        let Some(rt) = self.runtimes.get_mut(&id) else {
            return Vec::new();
        };
        if let Err(e) = rt.agent.tick(now) {
            debug!("zone {id}: agent tick failed: {e}");
        }
        let mut frames = Vec::new();
        while let Ok(Some(inbound)) = rt.endpoint.recv() {
            match inbound {
                Ok(frame) => frames.push(frame),
                Err(e) => warn!("zone {id}: undecodable frame: {e}"),
            }
        }
        let mut changes = Vec::new();
        for frame in frames {
            if let Some(change) = self.handle_frame(id, frame) {
                changes.push(change);
            }
        }
        changes
    }

    fn handle_frame(&mut self, id: ZoneId, frame: Frame) -> Option<StateChange> {
        let now = self.now;
        match frame.msg_type {
            MsgType::Heartbeat => {
                let boot_warm = match self.runtimes.get_mut(&id) {
                    Some(rt) => {
                        rt.heartbeats += 1;
                        rt.boot_warm
                    }
                    None => false,
                };
                let record = self.records.get_mut(&id)?;
                record.last_heartbeat = Some(now);
                if record.state == ZoneState::Provisioning {
                    let event = if boot_warm {
                        LifecycleEvent::BootCompleteWarm
                    } else {
                        LifecycleEvent::BootCompleteActive
                    };
                    match self.apply_event(id, event) {
                        Ok(change) => return Some(change),
                        Err(e) => warn!("zone {id}: boot transition failed: {e}"),
                    }
                }
            }
            MsgType::Event => match MonitorEvent::decode(&frame.payload) {
                Ok(event) => {
                    let log = self.monitor.entry(id).or_default();
                    if log.len() >= MONITOR_LOG_CAP {
                        log.remove(0);
                    }
                    log.push(event);
                }
                Err(e) => warn!("zone {id}: bad event: {e}"),
            },
            MsgType::Log => {
                if let Ok(line) = LogLine::decode(&frame.payload) {
                    if self.untrusted_logs.len() >= UNTRUSTED_LOG_CAP {
                        self.untrusted_logs.remove(0);
                    }
                    self.untrusted_logs.push(UntrustedLog {
                        zone: id,
                        at: now,
                        level: line.level,
                        text: line.text,
                    });
                }
            }
            MsgType::ExecOutput => {
                if let (Ok(out), Some(c)) = (
                    ExecOutput::decode(&frame.payload),
                    self.exec_streams.get_mut(&(id, frame.stream_id)),
                ) {
                    c.result.output_frames += 1;
                    match out.fd {
                        OutputFd::Stdout => c.result.stdout.extend(out.data),
                        OutputFd::Stderr => c.result.stderr.extend(out.data),
                    }
                }
            }
            MsgType::ExitEvent => {
                if let (Ok(exit), Some(c)) = (
                    ExitEvent::decode(&frame.payload),
                    self.exec_streams.get_mut(&(id, frame.stream_id)),
                ) {
                    c.result.exit_code = exit.code;
                    c.done = true;
                }
            }
            MsgType::DeviceReply => {
                if let Ok(reply) = DeviceReply::decode(&frame.payload) {
                    self.device_replies.insert((id, frame.stream_id), reply);
                }
            }
            MsgType::DeviceRequest => {
                // Client-originated request: route through the driver zone
                // and answer on the client's channel.
                let reply = match DeviceRequest::decode(&frame.payload) {
                    Ok(req) => self.device_request(id, &req.device_id, req.slice, req.op),
                    Err(_) => Err(DaemonError::RequestTooLarge),
                };
                let reply = reply.unwrap_or(DeviceReply {
                    status: crate::msg::DeviceStatus::NoSuchSlice,
                    data: Vec::new(),
                });
                if let (Some(rt), Ok(f)) = (self.runtimes.get(&id), reply.to_frame(frame.stream_id)) {
                    let _ = rt.endpoint.send(&f);
                }
            }
            MsgType::ExecRequest => warn!("zone {id} sent an exec request; ignored"),
        }
        None
    }

    /// Retires zones whose heartbeats stopped. Idempotent for a given `now`.
    pub fn supervise(&mut self, now: u64) -> Vec<StateChange> {
        self.now = self.now.max(now);
        let timeout = self.config.heartbeat_timeout_ms;
        let boot_deadline = self.config.guest_boot_ms + timeout;
        let mut changes = Vec::new();
        let candidates: Vec<(ZoneId, ZoneState, u64, u64)> = self
            .records
            .values()
            .filter(|r| r.state.is_live())
            .map(|r| (r.id, r.state, r.last_heartbeat.unwrap_or(r.created_at), r.created_at))
            .collect();
        for (id, state, last, created) in candidates {
            let retire = match state {
                ZoneState::Active | ZoneState::Quarantined if now.saturating_sub(last) > timeout => {
                    match self.apply_event(id, LifecycleEvent::HeartbeatTimeout) {
                        Ok(change) => {
                            warn!("zone {id} not responding");
                            changes.push(change);
                            true
                        }
                        Err(e) => {
                            warn!("zone {id}: {e}");
                            false
                        }
                    }
                }
                ZoneState::NotResponding => true,
                ZoneState::Provisioning => now.saturating_sub(created) > boot_deadline,
                _ => false,
            };
            if retire {
                match self.deprovision(id) {
                    Ok(change) => changes.push(change),
                    Err(e) => warn!("zone {id}: deprovision failed: {e}"),
                }
            }
        }
        changes
    }

    /// Runs a command in a zone and collects its output. Logical time does
    /// not advance.
    pub fn exec_in_zone(&mut self, id: ZoneId, argv: &[String], stdin: &[u8]) -> Result<ExecResult, DaemonError> {
        self.ensure_up()?;
        let record = self.live_record(id)?;
        if !matches!(record.state, ZoneState::Active | ZoneState::Quarantined) {
            return Err(DaemonError::ZoneNotActive(id));
        }
        let stream = self.next_stream;
        self.next_stream = self.next_stream.wrapping_add(1).max(1);
        let request = ExecRequest {
            argv: argv.to_vec(),
            stdin: stdin.to_vec(),
        };
        let frame = request.to_frame(stream).map_err(|_| DaemonError::RequestTooLarge)?;
        if frame.payload.len() > crate::idm::MAX_PAYLOAD {
            return Err(DaemonError::RequestTooLarge);
        }
        self.runtimes
            .get(&id)
            .ok_or(DaemonError::NoSuchZone(id))?
            .endpoint
            .send(&frame)?;
        self.exec_streams.insert((id, stream), StreamCollector::default());
        for _ in 0..EXEC_PUMP_LIMIT {
            self.pump_zone(id);
            if self.exec_streams.get(&(id, stream)).is_some_and(|c| c.done) {
                let collected = self.exec_streams.remove(&(id, stream)).unwrap();
                return Ok(collected.result);
            }
            if !self.runtimes.get(&id).is_some_and(|rt| rt.agent.is_enabled()) {
                break;
            }
        }
        self.exec_streams.remove(&(id, stream));
        Err(DaemonError::ZoneUnresponsive(id))
    }

    // --- devices ----------------------------------------------------------

    pub fn devices(&self) -> Vec<AttachmentSummary> {
        self.devices.values().map(DeviceAttachment::summary).collect()
    }

    pub fn device(&self, device_id: &str) -> Option<&DeviceAttachment> {
        self.devices.get(device_id)
    }

    fn driver_active(&self, attachment: &DeviceAttachment) -> bool {
        self.records
            .get(&attachment.driver_zone)
            .is_some_and(|r| r.state == ZoneState::Active)
    }

    /// Attaches a device behind a new driver zone. A device whose previous
    /// driver died can be attached again; its bindings carry over and its
    /// memory is wiped.
    pub fn attach_device(
        &mut self,
        device_id: &str,
        mode: AttachMode,
        driver_spec: ZoneSpec,
    ) -> Result<AttachmentSummary, DaemonError> {
        self.ensure_up()?;
        if mode.slice_count() == 0 {
            return Err(DaemonError::NoSuchSlice {
                device: device_id.to_string(),
                slice: 0,
            });
        }
        let previous = self.devices.get(device_id).cloned();
        if let Some(prev) = &previous {
            if self.records.get(&prev.driver_zone).is_some_and(|r| r.state.is_live()) {
                return Err(DaemonError::DeviceBusy(device_id.to_string()));
            }
        }
        let spec = ZoneSpec {
            role: ZoneRole::Driver,
            ..driver_spec
        };
        let driver = self.create_zone(spec, false)?;
        let mut attachment = match previous {
            Some(mut prev) if prev.mode == mode => {
                prev.memory.wipe_all();
                prev.driver_zone = driver.id;
                prev
            }
            _ => DeviceAttachment::new(device_id.to_string(), mode, driver.id, self.config.slice_bytes),
        };
        attachment.driver_zone = driver.id;
        let backend = attachment.memory.clone();
        if let Some(rt) = self.runtimes.get_mut(&driver.id) {
            rt.agent.set_device_backend(backend);
        }
        let summary = attachment.summary();
        self.devices.insert(device_id.to_string(), attachment);
        self.pump_zone(driver.id);
        Ok(summary)
    }

    pub fn bind_slice(&mut self, device_id: &str, slice: u32, client: ZoneId) -> Result<(), DaemonError> {
        self.ensure_up()?;
        match self.records.get(&client) {
            Some(r) if r.state == ZoneState::Active => {}
            Some(_) => return Err(DaemonError::ZoneNotActive(client)),
            None => return Err(DaemonError::NoSuchZone(client)),
        }
        let attachment = self
            .devices
            .get_mut(device_id)
            .ok_or_else(|| DaemonError::NoSuchDevice(device_id.to_string()))?;
        match attachment.slices.get(&slice) {
            None => Err(DaemonError::NoSuchSlice {
                device: device_id.to_string(),
                slice,
            }),
            Some(Some(_)) => Err(DaemonError::DeviceBusy(device_id.to_string())),
            Some(None) => {
                attachment.slices.insert(slice, Some(client));
                self.mutations += 1;
                Ok(())
            }
        }
    }

    /// Frees a slice. Its memory is zeroed before it can be bound again.
    pub fn unbind_slice(&mut self, device_id: &str, slice: u32) -> Result<(), DaemonError> {
        self.ensure_up()?;
        let attachment = self
            .devices
            .get_mut(device_id)
            .ok_or_else(|| DaemonError::NoSuchDevice(device_id.to_string()))?;
        if !attachment.slices.contains_key(&slice) {
            return Err(DaemonError::NoSuchSlice {
                device: device_id.to_string(),
                slice,
            });
        }
        attachment.memory.wipe(slice);
        attachment.slices.insert(slice, None);
        self.mutations += 1;
        Ok(())
    }

    /// Sends a device operation from `client` through the driver zone.
    pub fn device_request(
        &mut self,
        client: ZoneId,
        device_id: &str,
        slice: u32,
        op: DeviceOp,
    ) -> Result<DeviceReply, DaemonError> {
        let attachment = self
            .devices
            .get(device_id)
            .ok_or_else(|| DaemonError::NoSuchDevice(device_id.to_string()))?;
        if !attachment.slices.contains_key(&slice) {
            return Err(DaemonError::NoSuchSlice {
                device: device_id.to_string(),
                slice,
            });
        }
        if attachment.client_of(slice) != Some(client) {
            return Err(DaemonError::AccessDenied(format!(
                "zone {client} is not bound to {device_id} slice {slice}"
            )));
        }
        if !self.driver_active(attachment) {
            return Err(DaemonError::DriverUnavailable(device_id.to_string()));
        }
        let driver = attachment.driver_zone;
        let stream = self.next_stream;
        self.next_stream = self.next_stream.wrapping_add(1).max(1);
        let request = DeviceRequest {
            device_id: device_id.to_string(),
            slice,
            op,
        };
        let frame = request.to_frame(stream).map_err(|_| DaemonError::RequestTooLarge)?;
        self.runtimes
            .get(&driver)
            .ok_or_else(|| DaemonError::DriverUnavailable(device_id.to_string()))?
            .endpoint
            .send(&frame)?;
        for _ in 0..4 {
            self.pump_zone(driver);
            if let Some(reply) = self.device_replies.remove(&(driver, stream)) {
                return Ok(reply);
            }
        }
        Err(DaemonError::DriverUnavailable(device_id.to_string()))
    }

    /// Crashes a device's driver zone. Only that zone changes state; the
    /// next supervise pass deprovisions it.
    pub fn inject_driver_fault(&mut self, device_id: &str) -> Result<FaultReport, DaemonError> {
        let attachment = self
            .devices
            .get(device_id)
            .ok_or_else(|| DaemonError::NoSuchDevice(device_id.to_string()))?;
        let driver = attachment.driver_zone;
        let mut failed_requests = 0;
        if let Some(rt) = self.runtimes.get_mut(&driver) {
            rt.agent.disable();
            // Requests queued for the dead driver never get an answer.
            while let Ok(Some(_)) = rt.endpoint.recv_bytes() {}
            failed_requests = rt.endpoint.unacknowledged();
        }
        self.device_replies.retain(|(zone, _), _| *zone != driver);
        if self
            .records
            .get(&driver)
            .is_some_and(|r| matches!(r.state, ZoneState::Active | ZoneState::Quarantined))
        {
            self.apply_event(driver, LifecycleEvent::Fault)?;
        }
        Ok(FaultReport {
            device_id: device_id.to_string(),
            driver_zone: driver,
            failed_requests,
        })
    }
}
