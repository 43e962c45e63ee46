//! Deterministic simulated type-1 hypervisor.
//!
//! Tracks domains, exclusive CPU pins, and ownership of every hardware
//! memory page. Guests never mutate page ownership; only the privileged
//! administrative API does. Page contents are stored sparsely: a page with
//! no backing buffer reads as zero, and releasing a page drops its buffer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::zone::ZoneSpec;

pub const DEFAULT_PAGE_SIZE_KIB: u32 = 4;
pub const DEFAULT_WEIGHT: u32 = 256;
pub const ROOT_DOMAIN: DomainId = DomainId(0);

const FREE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "d{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostConfig {
    pub cpu_count: u32,
    pub page_count: u64,
    pub page_size_kib: u32,
}

impl HostConfig {
    pub fn new(cpu_count: u32, page_count: u64) -> Self {
        HostConfig {
            cpu_count,
            page_count,
            page_size_kib: DEFAULT_PAGE_SIZE_KIB,
        }
    }

    pub fn with_memory_mib(cpu_count: u32, memory_mib: u64) -> Self {
        let mut config = HostConfig::new(cpu_count, 0);
        config.page_count = config.pages_for_mib(memory_mib);
        config
    }

    /// Pages needed to back `mib` MiB, rounding up.
    pub fn pages_for_mib(&self, mib: u64) -> u64 {
        (mib * 1024).div_ceil(self.page_size_kib as u64)
    }

    pub fn page_bytes(&self) -> usize {
        self.page_size_kib as usize * 1024
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainHandle {
    pub domain_id: DomainId,
    pub weight: u32,
}

/// How a new domain's vCPUs are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CpuPolicy {
    /// vCPUs share the proportional-share pool.
    #[default]
    Shared,
    /// Pin one free CPU per vCPU at creation.
    Exclusive,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HvError {
    #[error("insufficient memory: requested {requested} pages, {free} free")]
    InsufficientMemory { requested: u64, free: u64 },
    #[error("insufficient cpus: requested {requested}, {available} available")]
    InsufficientCpus { requested: u32, available: u32 },
    #[error("no such domain {0}")]
    NoSuchDomain(DomainId),
    #[error("the root domain cannot be destroyed")]
    RootUndestroyable,
    #[error("cpu {cpu} is pinned to {owner}")]
    CpuBusy { cpu: u32, owner: DomainId },
    #[error("cpu index {0} out of range")]
    BadCpuIndex(u32),
    #[error("cpu {0} is not pinned to this domain")]
    NotPinnedHere(u32),
    #[error("memory growth must be positive")]
    ZeroGrowth,
    #[error("no runnable domains")]
    NoRunnableDomains,
    #[error("scheduling weight must be positive")]
    BadWeight,
    #[error("scheduling window must be positive")]
    EmptyWindow,
    #[error("operation requires the root domain")]
    NotPrivileged,
    #[error("page {0} out of range")]
    BadPage(u64),
    #[error("guest address range outside the domain's memory")]
    GuestRange,
    #[error("invalid host configuration: {0}")]
    BadHostConfig(&'static str),
}

/// Result of a guest attempting to write a page-table page. Guests see page
/// tables read-only, so this is the only possible outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionFault {
    pub domain: DomainId,
    pub page: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum HvEvent {
    PagetableWriteDenied {
        domain: DomainId,
        page: u64,
        owner: Option<DomainId>,
    },
    PageRemapped {
        page: u64,
        from: Option<DomainId>,
        to: DomainId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Released {
    pub pages: u64,
    pub cpus: Vec<u32>,
}

/// Snapshot of host-wide resource accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLedger {
    pub cpu_grants: Vec<Option<DomainId>>,
    pub page_grants: BTreeMap<DomainId, u64>,
    pub free_pages: u64,
    pub total_pages: u64,
}

impl ResourceLedger {
    pub fn granted_pages(&self) -> u64 {
        self.page_grants.values().sum()
    }

    pub fn free_cpus(&self) -> u32 {
        self.cpu_grants.iter().filter(|g| g.is_none()).count() as u32
    }
}

/// Per-domain tick counts over one scheduling window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedTrace {
    pub window: u64,
    pub cpu_count: u32,
    pub ticks: BTreeMap<DomainId, u64>,
    pub idle: u64,
}

impl SchedTrace {
    pub fn ticks_for(&self, d: DomainId) -> u64 {
        self.ticks.get(&d).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.ticks.values().sum()
    }

    /// Canonical byte form, used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.ticks.len() * 12);
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(&self.cpu_count.to_be_bytes());
        for (d, t) in &self.ticks {
            out.extend_from_slice(&d.0.to_be_bytes());
            out.extend_from_slice(&t.to_be_bytes());
        }
        out.extend_from_slice(&self.idle.to_be_bytes());
        out
    }
}

#[derive(Debug, Clone)]
struct Domain {
    weight: u32,
    vcpus: u32,
    /// Guest frame number -> hardware page.
    frames: Vec<u64>,
    pinned: BTreeSet<u32>,
}

/// Read-only view of a live domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainInfo {
    pub id: DomainId,
    pub weight: u32,
    pub vcpus: u32,
    pub pages: u64,
    pub pinned: BTreeSet<u32>,
}

#[derive(Debug)]
pub struct Hypervisor {
    config: HostConfig,
    domains: BTreeMap<DomainId, Domain>,
    next_domain: u32,
    cpu_pins: Vec<Option<DomainId>>,
    page_owner: Vec<u32>,
    /// Free hardware pages, popped from the back (lowest index first).
    free_list: Vec<u64>,
    page_data: HashMap<u64, Box<[u8]>>,
    events: Vec<HvEvent>,
}

impl Hypervisor {
    pub fn new(config: HostConfig) -> Result<Self, HvError> {
        if config.cpu_count == 0 {
            return Err(HvError::BadHostConfig("cpu_count must be at least 1"));
        }
        if config.page_count == 0 {
            return Err(HvError::BadHostConfig("page_count must be at least 1"));
        }
        if config.page_size_kib == 0 {
            return Err(HvError::BadHostConfig("page_size_kib must be positive"));
        }
        if config.page_count >= FREE as u64 {
            return Err(HvError::BadHostConfig("page_count too large"));
        }
        let mut domains = BTreeMap::new();
        domains.insert(
            ROOT_DOMAIN,
            Domain {
                weight: DEFAULT_WEIGHT,
                vcpus: 0,
                frames: Vec::new(),
                pinned: BTreeSet::new(),
            },
        );
        Ok(Hypervisor {
            config,
            domains,
            next_domain: 1,
            cpu_pins: vec![None; config.cpu_count as usize],
            page_owner: vec![FREE; config.page_count as usize],
            free_list: (0..config.page_count).rev().collect(),
            page_data: HashMap::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn root(&self) -> DomainHandle {
        DomainHandle {
            domain_id: ROOT_DOMAIN,
            weight: self.domains[&ROOT_DOMAIN].weight,
        }
    }

    pub fn create_domain(&mut self, spec: &ZoneSpec, weight: u32, policy: CpuPolicy) -> Result<DomainHandle, HvError> {
        if weight == 0 {
            return Err(HvError::BadWeight);
        }
        let pages = self.config.pages_for_mib(spec.memory_mib);
        if pages > self.free_pages() {
            return Err(HvError::InsufficientMemory {
                requested: pages,
                free: self.free_pages(),
            });
        }
        let pins: Vec<u32> = match policy {
            CpuPolicy::Shared => {
                if spec.vcpus > self.config.cpu_count {
                    return Err(HvError::InsufficientCpus {
                        requested: spec.vcpus,
                        available: self.config.cpu_count,
                    });
                }
                Vec::new()
            }
            CpuPolicy::Exclusive => {
                let free: Vec<u32> = self.unpinned_cpus().take(spec.vcpus as usize).collect();
                if free.len() < spec.vcpus as usize {
                    return Err(HvError::InsufficientCpus {
                        requested: spec.vcpus,
                        available: self.unpinned_cpus().count() as u32,
                    });
                }
                free
            }
        };

        let id = self.allocate_domain_id();
        let frames = self.take_pages(id, pages);
        for &cpu in &pins {
            self.cpu_pins[cpu as usize] = Some(id);
        }
        self.domains.insert(
            id,
            Domain {
                weight,
                vcpus: spec.vcpus,
                frames,
                pinned: pins.into_iter().collect(),
            },
        );
        Ok(DomainHandle { domain_id: id, weight })
    }

    fn allocate_domain_id(&mut self) -> DomainId {
        // Ids are never reused while the hypervisor lives.
        let id = DomainId(self.next_domain);
        self.next_domain += 1;
        id
    }

    fn unpinned_cpus(&self) -> impl Iterator<Item = u32> + '_ {
        self.cpu_pins
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_none())
            .map(|(i, _)| i as u32)
    }

    fn take_pages(&mut self, owner: DomainId, count: u64) -> Vec<u64> {
        let mut frames = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let page = self.free_list.pop().expect("capacity checked by caller");
            self.page_owner[page as usize] = owner.0;
            frames.push(page);
        }
        frames
    }

    fn release_page(&mut self, page: u64) {
        self.page_data.remove(&page);
        self.page_owner[page as usize] = FREE;
        self.free_list.push(page);
    }

    pub fn destroy_domain(&mut self, id: DomainId) -> Result<Released, HvError> {
        if id == ROOT_DOMAIN {
            return Err(HvError::RootUndestroyable);
        }
        let domain = self.domains.remove(&id).ok_or(HvError::NoSuchDomain(id))?;
        for &page in &domain.frames {
            self.release_page(page);
        }
        for &cpu in &domain.pinned {
            self.cpu_pins[cpu as usize] = None;
        }
        Ok(Released {
            pages: domain.frames.len() as u64,
            cpus: domain.pinned.into_iter().collect(),
        })
    }

    pub fn pin_cpu(&mut self, id: DomainId, cpu: u32) -> Result<(), HvError> {
        if cpu >= self.config.cpu_count {
            return Err(HvError::BadCpuIndex(cpu));
        }
        if !self.domains.contains_key(&id) {
            return Err(HvError::NoSuchDomain(id));
        }
        match self.cpu_pins[cpu as usize] {
            Some(owner) if owner == id => Ok(()),
            Some(owner) => Err(HvError::CpuBusy { cpu, owner }),
            None => {
                self.cpu_pins[cpu as usize] = Some(id);
                self.domains.get_mut(&id).unwrap().pinned.insert(cpu);
                Ok(())
            }
        }
    }

    pub fn unpin_cpu(&mut self, id: DomainId, cpu: u32) -> Result<(), HvError> {
        if self.cpu_pins.get(cpu as usize).copied().flatten() != Some(id) {
            return Err(HvError::NotPinnedHere(cpu));
        }
        self.cpu_pins[cpu as usize] = None;
        if let Some(d) = self.domains.get_mut(&id) {
            d.pinned.remove(&cpu);
        }
        Ok(())
    }

    /// Grants `additional_mib` more memory. All-or-nothing.
    pub fn grow_memory(&mut self, id: DomainId, additional_mib: u64) -> Result<u64, HvError> {
        if additional_mib == 0 {
            return Err(HvError::ZeroGrowth);
        }
        if !self.domains.contains_key(&id) {
            return Err(HvError::NoSuchDomain(id));
        }
        let pages = self.config.pages_for_mib(additional_mib);
        if pages > self.free_pages() {
            return Err(HvError::InsufficientMemory {
                requested: pages,
                free: self.free_pages(),
            });
        }
        let new_frames = self.take_pages(id, pages);
        let domain = self.domains.get_mut(&id).unwrap();
        domain.frames.extend(new_frames);
        Ok(domain.frames.len() as u64)
    }

    /// Sets the number of vCPUs; a domain with zero vCPUs is idle.
    pub fn set_vcpus(&mut self, id: DomainId, vcpus: u32) -> Result<(), HvError> {
        if vcpus > self.config.cpu_count {
            return Err(HvError::InsufficientCpus {
                requested: vcpus,
                available: self.config.cpu_count,
            });
        }
        let domain = self.domains.get_mut(&id).ok_or(HvError::NoSuchDomain(id))?;
        domain.vcpus = vcpus;
        Ok(())
    }

    pub fn set_weight(&mut self, id: DomainId, weight: u32) -> Result<(), HvError> {
        if weight == 0 {
            return Err(HvError::BadWeight);
        }
        let domain = self.domains.get_mut(&id).ok_or(HvError::NoSuchDomain(id))?;
        domain.weight = weight;
        Ok(())
    }

    /// A guest write to any page-table page. Always faults and never touches
    /// the ledger; the attempt is recorded as an event.
    pub fn guest_write_pagetable(&mut self, id: DomainId, page: u64) -> PermissionFault {
        let owner = self
            .page_owner
            .get(page as usize)
            .copied()
            .filter(|&o| o != FREE)
            .map(DomainId);
        self.events.push(HvEvent::PagetableWriteDenied {
            domain: id,
            page,
            owner,
        });
        PermissionFault { domain: id, page }
    }

    /// Privileged remap of one hardware page to `to`. Only the root domain
    /// may call this. The page is zeroed on the way.
    pub fn admin_remap(&mut self, caller: DomainId, page: u64, to: DomainId) -> Result<(), HvError> {
        if caller != ROOT_DOMAIN {
            return Err(HvError::NotPrivileged);
        }
        if page >= self.config.page_count {
            return Err(HvError::BadPage(page));
        }
        if !self.domains.contains_key(&to) {
            return Err(HvError::NoSuchDomain(to));
        }
        let prev = self.page_owner[page as usize];
        let from = (prev != FREE).then_some(DomainId(prev));
        if from == Some(to) {
            return Ok(());
        }
        match from {
            Some(old) => {
                let frames = &mut self.domains.get_mut(&old).unwrap().frames;
                frames.retain(|&p| p != page);
            }
            None => self.free_list.retain(|&p| p != page),
        }
        self.page_data.remove(&page);
        self.page_owner[page as usize] = to.0;
        self.domains.get_mut(&to).unwrap().frames.push(page);
        self.events.push(HvEvent::PageRemapped { page, from, to });
        Ok(())
    }

    /// Writes into the domain's guest-physical memory.
    pub fn write_guest(&mut self, id: DomainId, addr: u64, data: &[u8]) -> Result<(), HvError> {
        let page_bytes = self.config.page_bytes() as u64;
        let domain = self.domains.get(&id).ok_or(HvError::NoSuchDomain(id))?;
        let end = addr.checked_add(data.len() as u64).ok_or(HvError::GuestRange)?;
        if end > domain.frames.len() as u64 * page_bytes {
            return Err(HvError::GuestRange);
        }
        let mut cursor = addr;
        let mut rest = data;
        while !rest.is_empty() {
            let frame = (cursor / page_bytes) as usize;
            let offset = (cursor % page_bytes) as usize;
            let n = rest.len().min(page_bytes as usize - offset);
            let hw = domain.frames[frame];
            let buf = self
                .page_data
                .entry(hw)
                .or_insert_with(|| vec![0u8; page_bytes as usize].into_boxed_slice());
            buf[offset..offset + n].copy_from_slice(&rest[..n]);
            rest = &rest[n..];
            cursor += n as u64;
        }
        Ok(())
    }

    pub fn read_guest(&self, id: DomainId, addr: u64, len: usize) -> Result<Vec<u8>, HvError> {
        let page_bytes = self.config.page_bytes() as u64;
        let domain = self.domains.get(&id).ok_or(HvError::NoSuchDomain(id))?;
        let end = addr.checked_add(len as u64).ok_or(HvError::GuestRange)?;
        if end > domain.frames.len() as u64 * page_bytes {
            return Err(HvError::GuestRange);
        }
        let mut out = Vec::with_capacity(len);
        let mut cursor = addr;
        while cursor < end {
            let frame = (cursor / page_bytes) as usize;
            let offset = (cursor % page_bytes) as usize;
            let n = ((end - cursor) as usize).min(page_bytes as usize - offset);
            match self.page_data.get(&domain.frames[frame]) {
                Some(buf) => out.extend_from_slice(&buf[offset..offset + n]),
                None => out.resize(out.len() + n, 0),
            }
            cursor += n as u64;
        }
        Ok(out)
    }

    /// Hardware pages backing a domain, in guest-frame order.
    pub fn domain_frames(&self, id: DomainId) -> Result<&[u64], HvError> {
        self.domains
            .get(&id)
            .map(|d| d.frames.as_slice())
            .ok_or(HvError::NoSuchDomain(id))
    }

    pub fn page_owner(&self, page: u64) -> Option<DomainId> {
        self.page_owner
            .get(page as usize)
            .copied()
            .filter(|&o| o != FREE)
            .map(DomainId)
    }

    pub fn domain(&self, id: DomainId) -> Option<DomainInfo> {
        self.domains.get(&id).map(|d| DomainInfo {
            id,
            weight: d.weight,
            vcpus: d.vcpus,
            pages: d.frames.len() as u64,
            pinned: d.pinned.clone(),
        })
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.domains.keys().copied()
    }

    pub fn free_pages(&self) -> u64 {
        self.free_list.len() as u64
    }

    pub fn free_cpus(&self) -> u32 {
        self.unpinned_cpus().count() as u32
    }

    pub fn events(&self) -> &[HvEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> Vec<HvEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn ledger(&self) -> ResourceLedger {
        ResourceLedger {
            cpu_grants: self.cpu_pins.clone(),
            page_grants: self
                .domains
                .iter()
                .map(|(id, d)| (*id, d.frames.len() as u64))
                .collect(),
            free_pages: self.free_pages(),
            total_pages: self.config.page_count,
        }
    }

    /// SHA-256 over CPU pins, per-domain grants, and every page-table entry.
    pub fn ledger_digest(&self) -> String {
        let mut h = Sha256::new();
        for pin in &self.cpu_pins {
            h.update(pin.map_or(FREE, |d| d.0).to_be_bytes());
        }
        for (id, d) in &self.domains {
            h.update(id.0.to_be_bytes());
            h.update((d.frames.len() as u64).to_be_bytes());
            for f in &d.frames {
                h.update(f.to_be_bytes());
            }
        }
        for owner in &self.page_owner {
            h.update(owner.to_be_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Recomputes every ledger invariant from scratch.
    pub fn check_invariants(&self) -> Result<(), String> {
        let granted: u64 = self.domains.values().map(|d| d.frames.len() as u64).sum();
        if granted + self.free_pages() != self.config.page_count {
            return Err(format!(
                "page conservation: granted {granted} + free {} != {}",
                self.free_pages(),
                self.config.page_count
            ));
        }
        let mut seen = vec![false; self.config.page_count as usize];
        for (id, d) in &self.domains {
            for &p in &d.frames {
                if std::mem::replace(&mut seen[p as usize], true) {
                    return Err(format!("page {p} owned twice"));
                }
                if self.page_owner[p as usize] != id.0 {
                    return Err(format!("page {p} owner mismatch"));
                }
            }
            for &cpu in &d.pinned {
                if self.cpu_pins[cpu as usize] != Some(*id) {
                    return Err(format!("cpu {cpu} pin mismatch for {id}"));
                }
            }
        }
        for &p in &self.free_list {
            if std::mem::replace(&mut seen[p as usize], true) {
                return Err(format!("free page {p} also owned"));
            }
            if self.page_owner[p as usize] != FREE {
                return Err(format!("free page {p} has an owner"));
            }
        }
        for (cpu, pin) in self.cpu_pins.iter().enumerate() {
            if let Some(d) = pin {
                let ok = self
                    .domains
                    .get(d)
                    .is_some_and(|dom| dom.pinned.contains(&(cpu as u32)));
                if !ok {
                    return Err(format!("cpu {cpu} pinned to missing/unaware {d}"));
                }
            }
        }
        Ok(())
    }

    /// Runs the proportional-share scheduler for `window_ticks` ticks.
    ///
    /// Every tick visits CPUs in index order. A pinned CPU runs its owner
    /// (or idles if the owner has no vCPUs). Shared CPUs draw from one smooth
    /// weighted round-robin over all runnable domains: each slot, every
    /// runnable domain earns its weight in credit, the richest runs (ties to
    /// the lowest id) and pays back the total weight. Credits start at zero
    /// on every call, so the trace depends only on the current configuration.
    pub fn run_scheduler(&self, window_ticks: u64) -> Result<SchedTrace, HvError> {
        if window_ticks == 0 {
            return Err(HvError::EmptyWindow);
        }
        let runnable: Vec<(DomainId, i64)> = self
            .domains
            .iter()
            .filter(|(id, d)| **id != ROOT_DOMAIN && d.vcpus > 0)
            .map(|(id, d)| (*id, d.weight as i64))
            .collect();
        if runnable.is_empty() {
            return Err(HvError::NoRunnableDomains);
        }
        let total_weight: i64 = runnable.iter().map(|(_, w)| w).sum();
        let mut credits = vec![0i64; runnable.len()];
        let mut counts = vec![0u64; runnable.len()];
        let mut idle = 0u64;

        let slot_of = |d: DomainId| runnable.binary_search_by_key(&d, |(id, _)| *id).ok();
        let pinned_slot: Vec<Option<Option<usize>>> = self.cpu_pins.iter().map(|pin| pin.map(slot_of)).collect();

        for _ in 0..window_ticks {
            for pin in &pinned_slot {
                match pin {
                    Some(Some(i)) => counts[*i] += 1,
                    Some(None) => idle += 1,
                    None => {
                        let mut best = 0;
                        for (i, (_, w)) in runnable.iter().enumerate() {
                            credits[i] += w;
                            if credits[i] > credits[best] {
                                best = i;
                            }
                        }
                        credits[best] -= total_weight;
                        counts[best] += 1;
                    }
                }
            }
        }

        Ok(SchedTrace {
            window: window_ticks,
            cpu_count: self.config.cpu_count,
            ticks: runnable.iter().map(|(id, _)| *id).zip(counts).collect(),
            idle,
        })
    }
}
