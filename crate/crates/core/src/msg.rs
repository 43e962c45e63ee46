//! Typed payloads carried in IDM frames, encoded as TLV fields.

use serde::{Deserialize, Serialize};

use crate::idm::tlv::{self, TlvError};
use crate::idm::{Frame, MsgType};
use crate::zone::ZoneId;

pub trait Payload: Sized {
    const TYPE: MsgType;

    fn encode(&self) -> Result<Vec<u8>, TlvError>;
    fn decode(payload: &[u8]) -> Result<Self, TlvError>;

    fn to_frame(&self, stream_id: u32) -> Result<Frame, TlvError> {
        Ok(Frame::new(Self::TYPE, stream_id, self.encode()?))
    }

    fn from_frame(frame: &Frame) -> Result<Self, TlvError> {
        if frame.msg_type != Self::TYPE {
            return Err(TlvError::Invalid { tag: 0 });
        }
        Self::decode(&frame.payload)
    }
}

/// Liveness beacon. An empty heartbeat sent by the daemon is a ping that the
/// agent answers with a heartbeat of its own on its next tick.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Heartbeat {
    pub zone_id: Option<ZoneId>,
    pub seq: Option<u64>,
}

impl Payload for Heartbeat {
    const TYPE: MsgType = MsgType::Heartbeat;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut w = tlv::Writer::new();
        if let Some(id) = &self.zone_id {
            w.bytes(1, id.as_bytes())?;
        }
        if let Some(seq) = self.seq {
            w.u64(2, seq);
        }
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        let zone_id = match f.get(1) {
            Some(v) => Some(ZoneId::from_bytes(
                v.try_into().map_err(|_| TlvError::Invalid { tag: 1 })?,
            )),
            None => None,
        };
        let seq = f.get(2).map(|_| f.u64(2)).transpose()?;
        Ok(Heartbeat { zone_id, seq })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MonitorKind {
    ProcessStart,
    ProcessExit,
    ResourcePressure,
    PagetableFaultObserved,
    Custom,
}

impl MonitorKind {
    fn code(self) -> u8 {
        match self {
            MonitorKind::ProcessStart => 1,
            MonitorKind::ProcessExit => 2,
            MonitorKind::ResourcePressure => 3,
            MonitorKind::PagetableFaultObserved => 4,
            MonitorKind::Custom => 5,
        }
    }

    fn from_code(b: u8) -> Option<Self> {
        Some(match b {
            1 => MonitorKind::ProcessStart,
            2 => MonitorKind::ProcessExit,
            3 => MonitorKind::ResourcePressure,
            4 => MonitorKind::PagetableFaultObserved,
            5 => MonitorKind::Custom,
            _ => return None,
        })
    }
}

pub const MAX_EVENT_DETAIL: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub kind: MonitorKind,
    pub detail: String,
    pub at: u64,
}

impl MonitorEvent {
    /// Builds an event, truncating `detail` to 4 KiB on a char boundary.
    pub fn new(kind: MonitorKind, detail: impl Into<String>, at: u64) -> Self {
        let mut detail = detail.into();
        if detail.len() > MAX_EVENT_DETAIL {
            let mut cut = MAX_EVENT_DETAIL;
            while !detail.is_char_boundary(cut) {
                cut -= 1;
            }
            detail.truncate(cut);
        }
        MonitorEvent { kind, detail, at }
    }
}

impl Payload for MonitorEvent {
    const TYPE: MsgType = MsgType::Event;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut w = tlv::Writer::new();
        w.u8(1, self.kind.code()).str(2, &self.detail)?.u64(3, self.at);
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        let kind = MonitorKind::from_code(f.u8(1)?).ok_or(TlvError::Invalid { tag: 1 })?;
        let detail = f.string(2)?;
        if detail.len() > MAX_EVENT_DETAIL {
            return Err(TlvError::Invalid { tag: 2 });
        }
        Ok(MonitorEvent {
            kind,
            detail,
            at: f.u64(3)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRequest {
    pub argv: Vec<String>,
    pub stdin: Vec<u8>,
}

impl Payload for ExecRequest {
    const TYPE: MsgType = MsgType::ExecRequest;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut w = tlv::Writer::new();
        for arg in &self.argv {
            w.str(1, arg)?;
        }
        for chunk in self.stdin.chunks(tlv::MAX_VALUE) {
            w.bytes(2, chunk)?;
        }
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        let argv = f
            .all(1)
            .map(|v| String::from_utf8(v.to_vec()).map_err(|_| TlvError::Invalid { tag: 1 }))
            .collect::<Result<Vec<_>, _>>()?;
        let stdin = f.all(2).flatten().copied().collect();
        Ok(ExecRequest { argv, stdin })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFd {
    Stdout,
    Stderr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutput {
    pub fd: OutputFd,
    pub data: Vec<u8>,
}

impl Payload for ExecOutput {
    const TYPE: MsgType = MsgType::ExecOutput;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let fd = match self.fd {
            OutputFd::Stdout => 1,
            OutputFd::Stderr => 2,
        };
        let mut w = tlv::Writer::new();
        w.u8(1, fd).bytes(2, &self.data)?;
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        let fd = match f.u8(1)? {
            1 => OutputFd::Stdout,
            2 => OutputFd::Stderr,
            _ => return Err(TlvError::Invalid { tag: 1 }),
        };
        Ok(ExecOutput {
            fd,
            data: f.require(2)?.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitEvent {
    pub code: i32,
}

impl Payload for ExitEvent {
    const TYPE: MsgType = MsgType::ExitEvent;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        Ok(tlv::Writer::new().i32(1, self.code).finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        Ok(ExitEvent {
            code: tlv::parse(payload)?.i32(1)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogLine {
    pub level: u8,
    pub text: String,
}

impl Payload for LogLine {
    const TYPE: MsgType = MsgType::Log;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut w = tlv::Writer::new();
        w.u8(1, self.level).str(2, &self.text)?;
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        Ok(LogLine {
            level: f.u8(1)?,
            text: f.string(2)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceOp {
    Read { offset: u64, len: u32 },
    Write { offset: u64, data: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceRequest {
    pub device_id: String,
    pub slice: u32,
    pub op: DeviceOp,
}

impl Payload for DeviceRequest {
    const TYPE: MsgType = MsgType::DeviceRequest;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let mut w = tlv::Writer::new();
        w.str(1, &self.device_id)?.u32(2, self.slice);
        match &self.op {
            DeviceOp::Read { offset, len } => {
                w.u8(3, 1).u64(4, *offset).u32(5, *len);
            }
            DeviceOp::Write { offset, data } => {
                w.u8(3, 2).u64(4, *offset).bytes(6, data)?;
            }
        }
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        let op = match f.u8(3)? {
            1 => DeviceOp::Read {
                offset: f.u64(4)?,
                len: f.u32(5)?,
            },
            2 => DeviceOp::Write {
                offset: f.u64(4)?,
                data: f.require(6)?.to_vec(),
            },
            _ => return Err(TlvError::Invalid { tag: 3 }),
        };
        Ok(DeviceRequest {
            device_id: f.string(1)?,
            slice: f.u32(2)?,
            op,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeviceStatus {
    Ok,
    OutOfRange,
    NoSuchSlice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceReply {
    pub status: DeviceStatus,
    pub data: Vec<u8>,
}

impl Payload for DeviceReply {
    const TYPE: MsgType = MsgType::DeviceReply;

    fn encode(&self) -> Result<Vec<u8>, TlvError> {
        let status = match self.status {
            DeviceStatus::Ok => 0,
            DeviceStatus::OutOfRange => 1,
            DeviceStatus::NoSuchSlice => 2,
        };
        let mut w = tlv::Writer::new();
        w.u8(1, status).bytes(2, &self.data)?;
        Ok(w.finish())
    }

    fn decode(payload: &[u8]) -> Result<Self, TlvError> {
        let f = tlv::parse(payload)?;
        let status = match f.u8(1)? {
            0 => DeviceStatus::Ok,
            1 => DeviceStatus::OutOfRange,
            2 => DeviceStatus::NoSuchSlice,
            _ => return Err(TlvError::Invalid { tag: 1 }),
        };
        Ok(DeviceReply {
            status,
            data: f.require(2)?.to_vec(),
        })
    }
}
