//! Control requests between `ederactl` and `ederad`.
//!
//! Requests and responses travel as raw IDM-format frames carrying a JSON
//! body. Type 0x10 is a request, 0x11 a response; the stream id pairs them.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::daemon::ExecResult;
use crate::devices::{AttachMode, AttachmentSummary};
use crate::idm::{encode_raw, read_raw, FrameError, ReadFrameError};
use crate::zone::{ZoneId, ZoneRecord, ZoneState};

pub const RPC_REQUEST: u8 = 0x10;
pub const RPC_RESPONSE: u8 = 0x11;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    ZoneCreate {
        kernel: String,
        memory_mib: u64,
        vcpus: u32,
        warm: bool,
    },
    ZoneList,
    ZoneDestroy {
        id: ZoneId,
    },
    ZoneActivate {
        id: ZoneId,
        cpus: u32,
        memory_mib: u64,
    },
    ZoneQuarantine {
        id: ZoneId,
    },
    ZoneRelease {
        id: ZoneId,
    },
    ZoneExec {
        id: ZoneId,
        argv: Vec<String>,
    },
    PodApply {
        manifest: String,
    },
    PodDelete {
        namespace: String,
        name: String,
    },
    PodList,
    DeviceAttach {
        device: String,
        mode: AttachMode,
        driver_memory_mib: u64,
    },
    DeviceBind {
        device: String,
        slice: u32,
        zone: ZoneId,
    },
    DeviceUnbind {
        device: String,
        slice: u32,
    },
    DeviceFault {
        device: String,
    },
    Metrics,
}

impl Request {
    pub fn mutates(&self) -> bool {
        !matches!(self, Request::ZoneList | Request::PodList | Request::Metrics)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodRow {
    pub namespace: String,
    pub name: String,
    pub managed: bool,
    pub zone: Option<ZoneId>,
    pub state: Option<ZoneState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum Response {
    Ack,
    Zone(ZoneRecord),
    Zones(Vec<ZoneRecord>),
    PodApplied {
        namespace: String,
        name: String,
        managed: bool,
    },
    Pods(Vec<PodRow>),
    Device(AttachmentSummary),
    Fault {
        device: String,
        driver_zone: ZoneId,
        failed_requests: usize,
    },
    Exec {
        stdout: Vec<u8>,
        stderr: Vec<u8>,
        exit_code: i32,
    },
    Metrics(String),
    Error(String),
}

impl From<ExecResult> for Response {
    fn from(r: ExecResult) -> Self {
        Response::Exec {
            stdout: r.stdout,
            stderr: r.stderr,
            exit_code: r.exit_code,
        }
    }
}

#[derive(Debug, Error)]
pub enum RpcError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("bad message body: {0}")]
    Body(#[from] serde_json::Error),
    #[error("unexpected frame type {0:#04x}")]
    UnexpectedType(u8),
    #[error("response for stream {got}, expected {want}")]
    StreamMismatch { want: u32, got: u32 },
    #[error("connection closed")]
    Closed,
}

impl From<ReadFrameError> for RpcError {
    fn from(e: ReadFrameError) -> Self {
        match e {
            ReadFrameError::Frame(f) => RpcError::Frame(f),
            ReadFrameError::Io(io) => RpcError::Io(io),
        }
    }
}

pub fn write_message<W: Write, T: Serialize>(w: &mut W, msg_type: u8, stream: u32, body: &T) -> Result<(), RpcError> {
    let payload = serde_json::to_vec(body)?;
    w.write_all(&encode_raw(msg_type, stream, &payload)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one message of `msg_type`. `None` on a clean end of stream.
pub fn read_message<R: Read, T: for<'de> Deserialize<'de>>(
    r: &mut R,
    msg_type: u8,
) -> Result<Option<(u32, T)>, RpcError> {
    let Some(frame) = read_raw(r)? else {
        return Ok(None);
    };
    if frame.msg_type != msg_type {
        return Err(RpcError::UnexpectedType(frame.msg_type));
    }
    Ok(Some((frame.stream_id, serde_json::from_slice(&frame.payload)?)))
}

/// Client side of one connection.
#[derive(Debug)]
pub struct Client<S> {
    stream: S,
    next: u32,
}

impl<S: Read + Write> Client<S> {
    pub fn new(stream: S) -> Self {
        Client { stream, next: 1 }
    }

    pub fn call(&mut self, request: &Request) -> Result<Response, RpcError> {
        let id = self.next;
        self.next = self.next.wrapping_add(1);
        write_message(&mut self.stream, RPC_REQUEST, id, request)?;
        let (got, response) = read_message(&mut self.stream, RPC_RESPONSE)?.ok_or(RpcError::Closed)?;
        if got != id {
            return Err(RpcError::StreamMismatch { want: id, got });
        }
        Ok(response)
    }
}

/// Serves requests on one connection until the peer hangs up. A request
/// with an undecodable body gets an error response; a broken frame ends
/// the connection.
pub fn serve<S: Read + Write>(stream: &mut S, mut handle: impl FnMut(Request) -> Response) -> Result<(), RpcError> {
    loop {
        let frame = match read_raw(stream) {
            Ok(Some(frame)) => frame,
            Ok(None) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let response = if frame.msg_type != RPC_REQUEST {
            Response::Error(format!("unexpected frame type {:#04x}", frame.msg_type))
        } else {
            match serde_json::from_slice::<Request>(&frame.payload) {
                Ok(req) => handle(req),
                Err(e) => Response::Error(format!("bad request: {e}")),
            }
        };
        write_message(stream, RPC_RESPONSE, frame.stream_id, &response)?;
    }
}
