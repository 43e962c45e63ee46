//! Pod front door: parses the pod manifest subset, keeps the desired pod
//! set, and reconciles it against the zones the daemon is running.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::daemon::{Daemon, DaemonError};
use crate::zone::{WorkloadBinding, ZoneId, ZoneRecord, ZoneRole, ZoneSpec, ZoneState};

pub const RUNTIME_CLASS: &str = "edera";
pub const KERNEL_ANNOTATION: &str = "dev.edera/kernel";
pub const MEMORY_ANNOTATION: &str = "dev.edera/memory";
pub const DEFAULT_KERNEL_IMAGE: &str = "ghcr.io/edera-dev/linux-kernel:latest";
pub const DEFAULT_MEMORY_MIB: u64 = 512;
pub const DEFAULT_VCPUS: u32 = 1;
pub const RECONCILE_PERIOD_MS: u64 = 1000;

#[derive(Debug, Error)]
pub enum CriError {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("bad value {value:?} for annotation {annotation}")]
    BadAnnotationValue { annotation: String, value: String },
    #[error("pod {0} is not managed by this runtime")]
    Unmanaged(WorkloadBinding),
    #[error("daemon unavailable")]
    DaemonUnavailable(ReconcileDiff),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub name: String,
    pub image: String,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodDesiredState {
    pub name: String,
    pub namespace: String,
    pub kernel_image: String,
    pub memory_mib: u64,
    pub runtime_class: String,
    pub containers: Vec<ContainerSpec>,
}

impl PodDesiredState {
    pub fn managed(&self) -> bool {
        self.runtime_class == RUNTIME_CLASS
    }

    pub fn key(&self) -> WorkloadBinding {
        WorkloadBinding {
            namespace: self.namespace.clone(),
            name: self.name.clone(),
        }
    }

    pub fn zone_spec(&self) -> ZoneSpec {
        ZoneSpec {
            kernel_image: self.kernel_image.clone(),
            memory_mib: self.memory_mib,
            vcpus: DEFAULT_VCPUS,
            role: ZoneRole::Workload,
        }
    }

    fn satisfied_by(&self, zone: &ZoneRecord) -> bool {
        let want = self.zone_spec();
        zone.spec.kernel_image == want.kernel_image
            && zone.spec.memory_mib == want.memory_mib
            && zone.spec.vcpus == want.vcpus
            && matches!(
                zone.state,
                ZoneState::Provisioning | ZoneState::Active | ZoneState::Quarantined
            )
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawManifest {
    kind: Option<String>,
    metadata: Option<RawMetadata>,
    spec: Option<RawPodSpec>,
}

#[derive(Deserialize)]
struct RawMetadata {
    name: Option<String>,
    namespace: Option<String>,
    #[serde(default)]
    annotations: BTreeMap<String, serde_yaml::Value>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawPodSpec {
    runtime_class_name: Option<String>,
    #[serde(default)]
    containers: Vec<RawContainer>,
}

#[derive(Deserialize)]
struct RawContainer {
    name: String,
    #[serde(default)]
    image: String,
    #[serde(default)]
    env: Vec<RawEnv>,
}

#[derive(Deserialize)]
struct RawEnv {
    name: String,
    #[serde(default)]
    value: String,
}

fn scalar(annotation: &str, value: &serde_yaml::Value) -> Result<String, CriError> {
    match value {
        serde_yaml::Value::String(s) => Ok(s.trim().to_string()),
        serde_yaml::Value::Number(n) => Ok(n.to_string()),
        other => Err(CriError::BadAnnotationValue {
            annotation: annotation.to_string(),
            value: format!("{other:?}"),
        }),
    }
}

pub fn parse_manifest(document: &str) -> Result<PodDesiredState, CriError> {
    let raw: RawManifest = serde_yaml::from_str(document).map_err(|e| CriError::MalformedManifest(e.to_string()))?;
    match raw.kind.as_deref() {
        Some("Pod") => {}
        Some(other) => return Err(CriError::MalformedManifest(format!("kind {other} is not Pod"))),
        None => return Err(CriError::MalformedManifest("missing kind".into())),
    }
    let metadata = raw
        .metadata
        .ok_or_else(|| CriError::MalformedManifest("missing metadata".into()))?;
    let name = metadata
        .name
        .filter(|n| !n.is_empty())
        .ok_or_else(|| CriError::MalformedManifest("missing metadata.name".into()))?;
    let spec = raw
        .spec
        .ok_or_else(|| CriError::MalformedManifest("missing spec".into()))?;

    let kernel_image = match metadata.annotations.get(KERNEL_ANNOTATION) {
        Some(v) => {
            let image = scalar(KERNEL_ANNOTATION, v)?;
            if image.is_empty() {
                return Err(CriError::BadAnnotationValue {
                    annotation: KERNEL_ANNOTATION.into(),
                    value: image,
                });
            }
            image
        }
        None => DEFAULT_KERNEL_IMAGE.to_string(),
    };
    let memory_mib = match metadata.annotations.get(MEMORY_ANNOTATION) {
        Some(v) => {
            let text = scalar(MEMORY_ANNOTATION, v)?;
            match text.parse::<u64>() {
                Ok(mib) if mib > 0 => mib,
                _ => {
                    return Err(CriError::BadAnnotationValue {
                        annotation: MEMORY_ANNOTATION.into(),
                        value: text,
                    })
                }
            }
        }
        None => DEFAULT_MEMORY_MIB,
    };

    Ok(PodDesiredState {
        name,
        namespace: metadata.namespace.unwrap_or_else(|| "default".into()),
        kernel_image,
        memory_mib,
        runtime_class: spec.runtime_class_name.unwrap_or_default(),
        containers: spec
            .containers
            .into_iter()
            .map(|c| ContainerSpec {
                name: c.name,
                image: c.image,
                env: c.env.into_iter().map(|e| (e.name, e.value)).collect(),
            })
            .collect(),
    })
}

/// What reconcile needs from the daemon.
pub trait ZoneBackend {
    fn available(&self) -> bool;
    /// Live zones.
    fn zones(&self) -> Vec<ZoneRecord>;
    fn create(&mut self, spec: ZoneSpec, binding: WorkloadBinding) -> Result<ZoneId, DaemonError>;
    fn destroy(&mut self, id: ZoneId) -> Result<(), DaemonError>;
}

impl ZoneBackend for Daemon {
    fn available(&self) -> bool {
        self.probe()
    }

    fn zones(&self) -> Vec<ZoneRecord> {
        self.live_zones().cloned().collect()
    }

    fn create(&mut self, spec: ZoneSpec, binding: WorkloadBinding) -> Result<ZoneId, DaemonError> {
        let record = self.create_zone_for(spec, false, Some(binding))?;
        // Let the agent's first heartbeat land so the zone is Active on return.
        self.pump();
        Ok(record.id)
    }

    fn destroy(&mut self, id: ZoneId) -> Result<(), DaemonError> {
        self.destroy_zone(id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileDiff {
    pub to_create: Vec<PodDesiredState>,
    pub to_destroy: Vec<ZoneId>,
    pub unchanged: usize,
    /// Items whose actuation failed; they reappear in the next diff.
    pub failed: Vec<String>,
}

impl ReconcileDiff {
    pub fn is_empty(&self) -> bool {
        self.to_create.is_empty() && self.to_destroy.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub pod: WorkloadBinding,
    pub zone: ZoneId,
    pub state: ZoneState,
}

#[derive(Debug, Default)]
pub struct CriShim {
    desired: BTreeMap<WorkloadBinding, PodDesiredState>,
    last_reconcile: Option<u64>,
}

impl CriShim {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records intent only. Zones change at the next reconcile.
    pub fn apply(&mut self, pod: PodDesiredState) {
        self.desired.insert(pod.key(), pod);
    }

    pub fn delete(&mut self, namespace: &str, name: &str) -> Option<PodDesiredState> {
        self.desired.remove(&WorkloadBinding {
            namespace: namespace.to_string(),
            name: name.to_string(),
        })
    }

    pub fn desired(&self) -> impl Iterator<Item = &PodDesiredState> {
        self.desired.values()
    }

    pub fn desired_count(&self) -> usize {
        self.desired.len()
    }

    pub fn diff(&self, zones: &[ZoneRecord]) -> ReconcileDiff {
        let mut by_pod: BTreeMap<&WorkloadBinding, Vec<&ZoneRecord>> = BTreeMap::new();
        for z in zones {
            if z.spec.role != ZoneRole::Workload || !z.state.is_live() {
                continue;
            }
            if let Some(b) = &z.workload {
                by_pod.entry(b).or_default().push(z);
            }
        }

        let mut diff = ReconcileDiff::default();
        let mut keep: BTreeSet<ZoneId> = BTreeSet::new();
        for pod in self.desired.values().filter(|p| p.managed()) {
            let key = pod.key();
            let candidate = by_pod
                .get(&key)
                .and_then(|zs| zs.iter().filter(|z| pod.satisfied_by(z)).map(|z| z.id).min());
            match candidate {
                Some(id) => {
                    keep.insert(id);
                    diff.unchanged += 1;
                }
                None => diff.to_create.push(pod.clone()),
            }
        }
        for zs in by_pod.values() {
            for z in zs {
                if !keep.contains(&z.id) {
                    diff.to_destroy.push(z.id);
                }
            }
        }
        diff.to_destroy.sort();
        diff
    }

    /// Brings the backend's workload zones in line with the desired pods.
    /// Destroys run before creates so replaced zones free their resources.
    pub fn reconcile(&mut self, backend: &mut dyn ZoneBackend) -> Result<ReconcileDiff, CriError> {
        let mut diff = self.diff(&backend.zones());
        if !backend.available() {
            return Err(CriError::DaemonUnavailable(diff));
        }
        for id in &diff.to_destroy {
            if let Err(e) = backend.destroy(*id) {
                warn!("reconcile: destroy {id} failed: {e}");
                diff.failed.push(format!("destroy {id}: {e}"));
            }
        }
        for pod in &diff.to_create {
            match backend.create(pod.zone_spec(), pod.key()) {
                Ok(id) => debug!("reconcile: {} -> zone {id}", pod.key()),
                Err(e) => {
                    warn!("reconcile: create {} failed: {e}", pod.key());
                    diff.failed.push(format!("create {}: {e}", pod.key()));
                }
            }
        }
        Ok(diff)
    }

    /// Periodic trigger. Reconciles when a period has passed since the
    /// last run.
    pub fn tick(&mut self, now: u64, backend: &mut dyn ZoneBackend) -> Option<Result<ReconcileDiff, CriError>> {
        if self.last_reconcile.is_some_and(|last| now < last + RECONCILE_PERIOD_MS) {
            return None;
        }
        self.last_reconcile = Some(now);
        Some(self.reconcile(backend))
    }

    pub fn list_bindings(&self, backend: &dyn ZoneBackend) -> Vec<Binding> {
        let mut out: Vec<Binding> = backend
            .zones()
            .into_iter()
            .filter(|z| z.spec.role == ZoneRole::Workload)
            .filter_map(|z| {
                let pod = z.workload.clone()?;
                if self.desired.get(&pod).is_some_and(|p| !p.managed()) {
                    return None;
                }
                Some(Binding {
                    pod,
                    zone: z.id,
                    state: z.state,
                })
            })
            .collect();
        out.sort_by(|a, b| (&a.pod, a.zone).cmp(&(&b.pod, b.zone)));
        out
    }
}
