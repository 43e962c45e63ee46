//! Zone network proxy. Every packet a zone emits goes through
//! [`NetProxy::route_packet`]; zone interfaces hold nothing but a reference
//! to the proxy, so there is no other delivery path.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::zone::ZoneId;

pub const MAX_PACKET_PAYLOAD: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Destination {
    Zone(ZoneId),
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZonePacket {
    pub src: ZoneId,
    pub dst: Destination,
    pub payload: Vec<u8>,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropReason {
    Quarantined,
    NoRoute,
    UnknownSource,
    Oversize,
    ProxyDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOutcome {
    Delivered,
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub packets_seen: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub bytes_seen: u64,
    pub bytes_delivered: u64,
    pub bytes_dropped: u64,
    /// Bytes written to dialed outbound streams.
    pub stream_bytes: u64,
}

impl Counters {
    fn record(&mut self, bytes: u64, outcome: RouteOutcome) {
        self.packets_seen += 1;
        self.bytes_seen += bytes;
        match outcome {
            RouteOutcome::Delivered => {
                self.packets_delivered += 1;
                self.bytes_delivered += bytes;
            }
            RouteOutcome::Dropped(_) => {
                self.packets_dropped += 1;
                self.bytes_dropped += bytes;
            }
        }
    }

    pub fn balanced(&self) -> bool {
        self.packets_seen == self.packets_delivered + self.packets_dropped
            && self.bytes_seen == self.bytes_delivered + self.bytes_dropped
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub per_zone: BTreeMap<ZoneId, Counters>,
    pub total: Counters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DialError {
    #[error("zone is not active")]
    ZoneNotActive,
    #[error("dial refused")]
    DialRefused,
    #[error("no such stream")]
    NoSuchStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u64);

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NetState {
    Active,
    Quarantined,
}

#[derive(Debug)]
struct Stream {
    zone: ZoneId,
    target: String,
}

#[derive(Debug, Default)]
struct Inner {
    zones: HashMap<ZoneId, NetState>,
    inbox: HashMap<ZoneId, VecDeque<ZonePacket>>,
    endpoints: BTreeMap<String, u64>,
    streams: BTreeMap<StreamId, Stream>,
    next_stream: u64,
    counters: BTreeMap<ZoneId, Counters>,
    total: Counters,
    down: bool,
}

#[derive(Debug, Default)]
pub struct NetProxy {
    inner: Mutex<Inner>,
}

impl NetProxy {
    pub fn new() -> Arc<Self> {
        Arc::new(NetProxy::default())
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn register_zone(&self, zone: ZoneId) {
        let mut inner = self.lock();
        inner.zones.insert(zone, NetState::Active);
        inner.inbox.entry(zone).or_default();
    }

    pub fn set_quarantined(&self, zone: ZoneId, quarantined: bool) {
        let state = if quarantined {
            NetState::Quarantined
        } else {
            NetState::Active
        };
        if let Some(s) = self.lock().zones.get_mut(&zone) {
            *s = state;
        }
    }

    /// Forgets a zone: its queue and streams go away, its counters stay.
    pub fn remove_zone(&self, zone: ZoneId) {
        let mut inner = self.lock();
        inner.zones.remove(&zone);
        inner.inbox.remove(&zone);
        inner.streams.retain(|_, s| s.zone != zone);
    }

    pub fn is_quarantined(&self, zone: ZoneId) -> bool {
        self.lock().zones.get(&zone) == Some(&NetState::Quarantined)
    }

    pub fn register_endpoint(&self, address: impl Into<String>) {
        self.lock().endpoints.entry(address.into()).or_insert(0);
    }

    /// Bytes an external endpoint has received.
    pub fn endpoint_bytes(&self, address: &str) -> Option<u64> {
        self.lock().endpoints.get(address).copied()
    }

    pub fn route_packet(&self, packet: ZonePacket) -> RouteOutcome {
        let mut inner = self.lock();
        let bytes = packet.payload.len() as u64;
        let outcome = if inner.down {
            RouteOutcome::Dropped(DropReason::ProxyDown)
        } else if packet.payload.len() > MAX_PACKET_PAYLOAD {
            RouteOutcome::Dropped(DropReason::Oversize)
        } else {
            match inner.zones.get(&packet.src) {
                None => RouteOutcome::Dropped(DropReason::UnknownSource),
                Some(NetState::Quarantined) => RouteOutcome::Dropped(DropReason::Quarantined),
                Some(NetState::Active) => match &packet.dst {
                    Destination::Zone(dst) if inner.zones.contains_key(dst) => RouteOutcome::Delivered,
                    Destination::External(addr) if inner.endpoints.contains_key(addr) => RouteOutcome::Delivered,
                    _ => RouteOutcome::Dropped(DropReason::NoRoute),
                },
            }
        };
        inner.counters.entry(packet.src).or_default().record(bytes, outcome);
        inner.total.record(bytes, outcome);
        if outcome == RouteOutcome::Delivered {
            match &packet.dst {
                Destination::Zone(dst) => {
                    let dst = *dst;
                    inner.inbox.entry(dst).or_default().push_back(packet);
                }
                Destination::External(addr) => {
                    *inner.endpoints.get_mut(addr).expect("checked above") += bytes;
                }
            }
        }
        outcome
    }

    /// Next packet queued for `zone`.
    pub fn recv(&self, zone: ZoneId) -> Option<ZonePacket> {
        self.lock().inbox.get_mut(&zone)?.pop_front()
    }

    pub fn dial_socket(&self, zone: ZoneId, target: &str) -> Result<StreamId, DialError> {
        let mut inner = self.lock();
        if inner.down || inner.zones.get(&zone) != Some(&NetState::Active) {
            return Err(DialError::ZoneNotActive);
        }
        if !inner.endpoints.contains_key(target) {
            return Err(DialError::DialRefused);
        }
        let id = StreamId(inner.next_stream);
        inner.next_stream += 1;
        inner.streams.insert(
            id,
            Stream {
                zone,
                target: target.to_string(),
            },
        );
        Ok(id)
    }

    /// Writes to a dialed stream; the bytes are charged to the dialing zone.
    pub fn stream_send(&self, stream: StreamId, data: &[u8]) -> Result<usize, DialError> {
        let mut inner = self.lock();
        let (zone, target) = match inner.streams.get(&stream) {
            Some(s) => (s.zone, s.target.clone()),
            None => return Err(DialError::NoSuchStream),
        };
        if inner.zones.get(&zone) != Some(&NetState::Active) {
            return Err(DialError::ZoneNotActive);
        }
        let n = data.len() as u64;
        inner.counters.entry(zone).or_default().stream_bytes += n;
        inner.total.stream_bytes += n;
        *inner
            .endpoints
            .get_mut(&target)
            .expect("streams only to known endpoints") += n;
        Ok(data.len())
    }

    pub fn snapshot_counters(&self) -> TrafficCounters {
        let inner = self.lock();
        TrafficCounters {
            per_zone: inner.counters.clone(),
            total: inner.total,
        }
    }

    /// Liveness probe for the supervisor.
    pub fn probe(&self) -> bool {
        !self.lock().down
    }

    /// Simulates a proxy crash. Packets are dropped (and still counted)
    /// until [`NetProxy::restart`].
    pub fn crash(&self) {
        self.lock().down = true;
    }

    /// Brings the proxy back. Zone table, queues, and counters persist.
    pub fn restart(&self) {
        self.lock().down = false;
    }
}

/// A zone's network interface. It can only reach the proxy.
#[derive(Debug, Clone)]
pub struct ZoneInterface {
    zone: ZoneId,
    proxy: Arc<NetProxy>,
    next_seq: u64,
}

impl ZoneInterface {
    pub fn new(zone: ZoneId, proxy: Arc<NetProxy>) -> Self {
        ZoneInterface {
            zone,
            proxy,
            next_seq: 0,
        }
    }

    pub fn zone(&self) -> ZoneId {
        self.zone
    }

    pub fn send(&mut self, dst: Destination, payload: Vec<u8>) -> RouteOutcome {
        let packet = ZonePacket {
            src: self.zone,
            dst,
            payload,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.proxy.route_packet(packet)
    }

    pub fn recv(&self) -> Option<ZonePacket> {
        self.proxy.recv(self.zone)
    }

    pub fn dial(&self, target: &str) -> Result<StreamId, DialError> {
        self.proxy.dial_socket(self.zone, target)
    }
}
