//! Zone domain types and the lifecycle state machine.
//!
//! Every service in the control plane shares these types. The state machine
//! is a pure function over `(ZoneState, LifecycleEvent)`; persistence and
//! scheduling live elsewhere.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

/// Identity of a zone, assigned once at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ZoneId(Uuid);

impl ZoneId {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        ZoneId(Uuid::from_bytes(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        self.0.as_bytes()
    }

    /// Store key of this zone's record.
    pub fn store_key(&self) -> String {
        format!("zone/{self}")
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.as_hyphenated())
    }
}

impl FromStr for ZoneId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(ZoneId)
    }
}

/// Source of fresh zone identifiers.
///
/// `Random` draws from the OS-seeded thread RNG. `Seeded` is a deterministic
/// stream for tests and reproducible simulations.
#[derive(Debug, Default)]
pub enum IdGenerator {
    #[default]
    Random,
    Seeded(Box<ChaCha20Rng>),
}

impl IdGenerator {
    pub fn seeded(seed: u64) -> Self {
        IdGenerator::Seeded(Box::new(ChaCha20Rng::seed_from_u64(seed)))
    }

    pub fn next_id(&mut self) -> ZoneId {
        let mut bytes = [0u8; 16];
        match self {
            IdGenerator::Random => rand::thread_rng().fill_bytes(&mut bytes),
            IdGenerator::Seeded(rng) => rng.fill_bytes(&mut bytes),
        }
        ZoneId(uuid::Builder::from_random_bytes(bytes).into_uuid())
    }
}

/// Fresh random zone identifier.
pub fn new_zone_id() -> ZoneId {
    IdGenerator::Random.next_id()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZoneRole {
    Workload,
    Driver,
    Root,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneSpec {
    pub kernel_image: String,
    pub memory_mib: u64,
    pub vcpus: u32,
    pub role: ZoneRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("kernel image must not be empty")]
    EmptyKernelImage,
    #[error("a zone with no memory and no vcpus must be created warm")]
    ZeroResources,
    #[error("warm zones are created without resources")]
    WarmWithResources,
}

impl ZoneSpec {
    pub fn workload(kernel_image: impl Into<String>, memory_mib: u64, vcpus: u32) -> Self {
        ZoneSpec {
            kernel_image: kernel_image.into(),
            memory_mib,
            vcpus,
            role: ZoneRole::Workload,
        }
    }

    pub fn validate(&self, warm: bool) -> Result<(), SpecError> {
        if self.kernel_image.trim().is_empty() {
            return Err(SpecError::EmptyKernelImage);
        }
        let zero = self.memory_mib == 0 && self.vcpus == 0;
        match (warm, zero) {
            (false, true) => Err(SpecError::ZeroResources),
            (true, false) => Err(SpecError::WarmWithResources),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ZoneState {
    Provisioning,
    Warm,
    Active,
    Quarantined,
    NotResponding,
    Deprovisioned,
}

impl ZoneState {
    pub const ALL: [ZoneState; 6] = [
        ZoneState::Provisioning,
        ZoneState::Warm,
        ZoneState::Active,
        ZoneState::Quarantined,
        ZoneState::NotResponding,
        ZoneState::Deprovisioned,
    ];

    /// Lowercase label used in CLI output and metrics.
    pub fn label(&self) -> &'static str {
        match self {
            ZoneState::Provisioning => "provisioning",
            ZoneState::Warm => "warm",
            ZoneState::Active => "active",
            ZoneState::Quarantined => "quarantined",
            ZoneState::NotResponding => "not_responding",
            ZoneState::Deprovisioned => "deprovisioned",
        }
    }

    pub fn is_live(&self) -> bool {
        *self != ZoneState::Deprovisioned
    }
}

impl fmt::Display for ZoneState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LifecycleEvent {
    /// First heartbeat of a zone created warm.
    BootCompleteWarm,
    /// First heartbeat of a zone created with resources.
    BootCompleteActive,
    Activate,
    Quarantine,
    Release,
    HeartbeatTimeout,
    /// The zone's kernel or driver crashed and the daemon observed it directly.
    Fault,
    Destroy,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 8] = [
        LifecycleEvent::BootCompleteWarm,
        LifecycleEvent::BootCompleteActive,
        LifecycleEvent::Activate,
        LifecycleEvent::Quarantine,
        LifecycleEvent::Release,
        LifecycleEvent::HeartbeatTimeout,
        LifecycleEvent::Fault,
        LifecycleEvent::Destroy,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {event:?} in state {state}")]
pub struct IllegalTransition {
    pub state: ZoneState,
    pub event: LifecycleEvent,
}

/// Successor of `current` under `event`.
pub fn transition(current: ZoneState, event: LifecycleEvent) -> Result<ZoneState, IllegalTransition> {
    use LifecycleEvent as E;
    use ZoneState as S;

    let next = match (current, event) {
        (S::Provisioning, E::BootCompleteWarm) => S::Warm,
        (S::Provisioning, E::BootCompleteActive) => S::Active,
        (S::Provisioning, E::Destroy) => S::Deprovisioned,

        (S::Warm, E::Activate) => S::Active,
        (S::Warm, E::Destroy) => S::Deprovisioned,

        (S::Active, E::Quarantine) => S::Quarantined,
        (S::Active, E::HeartbeatTimeout | E::Fault) => S::NotResponding,
        (S::Active, E::Destroy) => S::Deprovisioned,

        (S::Quarantined, E::Release) => S::Active,
        (S::Quarantined, E::HeartbeatTimeout | E::Fault) => S::NotResponding,
        (S::Quarantined, E::Destroy) => S::Deprovisioned,

        (S::NotResponding, E::Destroy) => S::Deprovisioned,

        (state, event) => return Err(IllegalTransition { state, event }),
    };
    Ok(next)
}

/// Pod (or other workload) bound to a zone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkloadBinding {
    pub namespace: String,
    pub name: String,
}

impl fmt::Display for WorkloadBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.namespace, self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneRecord {
    pub id: ZoneId,
    pub spec: ZoneSpec,
    pub state: ZoneState,
    pub domain: Option<u32>,
    pub granted_cpus: BTreeSet<u32>,
    pub granted_pages: u64,
    /// Logical milliseconds of the last heartbeat seen by the daemon.
    pub last_heartbeat: Option<u64>,
    pub workload: Option<WorkloadBinding>,
    pub created_at: u64,
}

impl ZoneRecord {
    /// Holds when the record satisfies the per-state resource invariants.
    pub fn is_consistent(&self) -> bool {
        match self.state {
            ZoneState::Deprovisioned => {
                self.domain.is_none() && self.granted_cpus.is_empty() && self.granted_pages == 0
            }
            _ => self.domain.is_some(),
        }
    }
}
