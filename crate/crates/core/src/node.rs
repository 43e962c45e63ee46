//! One host's control plane: the zone daemon, network proxy, pod shim and
//! orchestrator, driven by a single command loop.

use std::sync::Arc;

use log::warn;

use crate::cri::{parse_manifest, CriShim};
use crate::daemon::{Daemon, DaemonConfig, DaemonError};
use crate::net::NetProxy;
use crate::orchestrator::{render_metrics, Orchestrator, ServiceHealth, Supervised};
use crate::rpc::{PodRow, Request, Response};
use crate::zone::{ZoneRole, ZoneSpec};

pub const HEALTH_SWEEP_PERIOD_MS: u64 = 250;

impl Supervised for Daemon {
    fn name(&self) -> &str {
        "zone-daemon"
    }

    fn probe(&self) -> bool {
        Daemon::probe(self)
    }

    fn restart(&mut self) -> bool {
        Daemon::restart(self);
        true
    }
}

#[derive(Debug)]
pub struct ProxyService(pub Arc<NetProxy>);

impl Supervised for ProxyService {
    fn name(&self) -> &str {
        "net-proxy"
    }

    fn probe(&self) -> bool {
        self.0.probe()
    }

    fn restart(&mut self) -> bool {
        self.0.restart();
        true
    }
}

impl Supervised for CriShim {
    fn name(&self) -> &str {
        "cri-shim"
    }

    fn probe(&self) -> bool {
        true
    }

    fn restart(&mut self) -> bool {
        true
    }
}

#[derive(Debug)]
pub struct Node {
    pub daemon: Daemon,
    pub proxy: ProxyService,
    pub cri: CriShim,
    pub orchestrator: Orchestrator,
    last_sweep: Option<u64>,
}

impl Node {
    pub fn open(config: DaemonConfig) -> Result<Self, DaemonError> {
        let proxy = NetProxy::new();
        let daemon = Daemon::open(config, proxy.clone())?;
        Ok(Node {
            daemon,
            proxy: ProxyService(proxy),
            cri: CriShim::new(),
            orchestrator: Orchestrator::new(),
            last_sweep: None,
        })
    }

    pub fn sweep(&mut self, now: u64) -> Vec<ServiceHealth> {
        self.last_sweep = Some(now);
        self.orchestrator
            .health_sweep(now, &mut [&mut self.daemon, &mut self.proxy, &mut self.cri])
    }

    /// Advances logical time: agents, supervision, periodic reconcile and
    /// health sweeps.
    pub fn tick(&mut self, now: u64) {
        if self.last_sweep.is_none_or(|last| now >= last + HEALTH_SWEEP_PERIOD_MS) {
            self.sweep(now);
        }
        self.daemon.advance_to(now);
        if let Some(Err(e)) = self.cri.tick(now, &mut self.daemon) {
            warn!("periodic reconcile: {e}");
        }
    }

    pub fn metrics(&self) -> String {
        render_metrics(&self.daemon, &self.proxy.0, &self.orchestrator.health())
    }

    pub fn pods(&self) -> Vec<PodRow> {
        let bindings = self.cri.list_bindings(&self.daemon);
        self.cri
            .desired()
            .map(|p| {
                let key = p.key();
                let bound = bindings.iter().find(|b| b.pod == key);
                PodRow {
                    namespace: p.namespace.clone(),
                    name: p.name.clone(),
                    managed: p.managed(),
                    zone: bound.map(|b| b.zone),
                    state: bound.map(|b| b.state),
                }
            })
            .collect()
    }

    pub fn handle(&mut self, request: Request) -> Response {
        match self.dispatch(request) {
            Ok(r) => r,
            Err(e) => Response::Error(e),
        }
    }

    fn dispatch(&mut self, request: Request) -> Result<Response, String> {
        let d = &mut self.daemon;
        let err = |e: DaemonError| e.to_string();
        Ok(match request {
            Request::ZoneCreate {
                kernel,
                memory_mib,
                vcpus,
                warm,
            } => {
                let spec = ZoneSpec::workload(&kernel, memory_mib, vcpus);
                let id = d.create_zone(spec, warm).map_err(err)?.id;
                d.pump();
                Response::Zone(d.zone(id).cloned().ok_or("zone vanished")?)
            }
            Request::ZoneList => Response::Zones(d.list_zones()),
            Request::ZoneDestroy { id } => {
                d.destroy_zone(id).map_err(err)?;
                Response::Ack
            }
            Request::ZoneActivate { id, cpus, memory_mib } => {
                let record = d.activate_zone(id, cpus, memory_mib).map_err(err)?;
                d.pump();
                Response::Zone(d.zone(id).cloned().unwrap_or(record))
            }
            Request::ZoneQuarantine { id } => Response::Zone(d.quarantine_zone(id).map_err(err)?),
            Request::ZoneRelease { id } => Response::Zone(d.release_zone(id).map_err(err)?),
            Request::ZoneExec { id, argv } => d.exec_in_zone(id, &argv, &[]).map_err(err)?.into(),
            Request::PodApply { manifest } => {
                let pod = parse_manifest(&manifest).map_err(|e| e.to_string())?;
                let response = Response::PodApplied {
                    namespace: pod.namespace.clone(),
                    name: pod.name.clone(),
                    managed: pod.managed(),
                };
                self.cri.apply(pod);
                response
            }
            Request::PodDelete { namespace, name } => {
                self.cri
                    .delete(&namespace, &name)
                    .ok_or_else(|| format!("no pod {namespace}/{name}"))?;
                Response::Ack
            }
            Request::PodList => Response::Pods(self.pods()),
            Request::DeviceAttach {
                device,
                mode,
                driver_memory_mib,
            } => {
                let spec = ZoneSpec {
                    role: ZoneRole::Driver,
                    ..ZoneSpec::workload("driver", driver_memory_mib, 1)
                };
                Response::Device(d.attach_device(&device, mode, spec).map_err(err)?)
            }
            Request::DeviceBind { device, slice, zone } => {
                d.bind_slice(&device, slice, zone).map_err(err)?;
                Response::Ack
            }
            Request::DeviceUnbind { device, slice } => {
                d.unbind_slice(&device, slice).map_err(err)?;
                Response::Ack
            }
            Request::DeviceFault { device } => {
                let report = d.inject_driver_fault(&device).map_err(err)?;
                let now = d.now();
                d.supervise(now);
                Response::Fault {
                    device: report.device_id,
                    driver_zone: report.driver_zone,
                    failed_requests: report.failed_requests,
                }
            }
            Request::Metrics => Response::Metrics(self.metrics()),
        })
    }
}
