//! Inter-domain messaging: a bounded, checksummed frame format and an
//! in-process channel with an inflight budget.
//!
//! Wire layout of one frame (all integers big-endian):
//!
//! ```text
//! +-------+-------+---------+----------+-------------+---------+---------+
//! | ED 7A | 01    | type u8 | stream   | payload_len | payload | crc32   |
//! | 2 B   | 1 B   | 1 B     | u32      | u32         | len B   | u32     |
//! +-------+-------+---------+----------+-------------+---------+---------+
//! ```
//!
//! The CRC is CRC-32/IEEE over every preceding byte. Payloads are capped at
//! 1 MiB and that bound is checked from the header alone, before any payload
//! byte is buffered.

use std::collections::VecDeque;
use std::io::{self, Read};
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0xED, 0x7A];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 12;
pub const TRAILER_LEN: usize = 4;
pub const FRAME_OVERHEAD: usize = HEADER_LEN + TRAILER_LEN;
pub const MAX_PAYLOAD: usize = 1024 * 1024;
pub const DEFAULT_INFLIGHT_BUDGET: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Heartbeat = 0x01,
    Event = 0x02,
    ExecRequest = 0x03,
    ExecOutput = 0x04,
    ExitEvent = 0x05,
    Log = 0x06,
    DeviceRequest = 0x07,
    DeviceReply = 0x08,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Heartbeat,
        MsgType::Event,
        MsgType::ExecRequest,
        MsgType::ExecOutput,
        MsgType::ExitEvent,
        MsgType::Log,
        MsgType::DeviceRequest,
        MsgType::DeviceReply,
    ];

    pub fn from_u8(b: u8) -> Option<MsgType> {
        MsgType::ALL.into_iter().find(|t| *t as u8 == b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("declared payload of {0} bytes exceeds the 1 MiB bound")]
    FrameTooLarge(u32),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("crc mismatch: frame says {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 1 MiB bound")]
    PayloadTooLarge(usize),
}

/// A frame whose type byte has not been interpreted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub msg_type: u8,
    pub stream_id: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub stream_id: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, stream_id: u32, payload: Vec<u8>) -> Self {
        Frame {
            msg_type,
            stream_id,
            payload,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_frame(self.msg_type, self.stream_id, &self.payload)
    }
}

pub fn encode_raw(msg_type: u8, stream_id: u32, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::PayloadTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type);
    out.extend_from_slice(&stream_id.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn encode_frame(msg_type: MsgType, stream_id: u32, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    encode_raw(msg_type as u8, stream_id, payload)
}

/// Parses the fixed header, applying magic, version, and length-bound
/// checks. Returns `(msg_type, stream_id, payload_len)`.
fn parse_header(bytes: &[u8]) -> Result<(u8, u32, usize), FrameError> {
    let magic_seen = bytes.len().min(2);
    if bytes[..magic_seen] != MAGIC[..magic_seen] {
        return Err(FrameError::BadMagic);
    }
    if let Some(&v) = bytes.get(2) {
        if v != VERSION {
            return Err(FrameError::BadVersion(v));
        }
    }
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    let msg_type = bytes[3];
    let stream_id = u32::from_be_bytes(bytes[4..8].try_into().unwrap());
    let len = u32::from_be_bytes(bytes[8..12].try_into().unwrap());
    if len as usize > MAX_PAYLOAD {
        return Err(FrameError::FrameTooLarge(len));
    }
    Ok((msg_type, stream_id, len as usize))
}

/// Decodes one frame from the front of `bytes` without interpreting the
/// type byte. Returns the frame and the number of bytes consumed.
pub fn decode_raw(bytes: &[u8]) -> Result<(RawFrame, usize), FrameError> {
    let (msg_type, stream_id, len) = parse_header(bytes)?;
    let total = FRAME_OVERHEAD + len;
    if bytes.len() < total {
        return Err(FrameError::Truncated {
            needed: total,
            have: bytes.len(),
        });
    }
    let body_end = HEADER_LEN + len;
    let expected = u32::from_be_bytes(bytes[body_end..total].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..body_end]);
    if expected != actual {
        return Err(FrameError::CrcMismatch { expected, actual });
    }
    Ok((
        RawFrame {
            msg_type,
            stream_id,
            payload: bytes[HEADER_LEN..body_end].to_vec(),
        },
        total,
    ))
}

/// Decodes one IDM frame from the front of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let (raw, used) = decode_raw(bytes)?;
    let msg_type = MsgType::from_u8(raw.msg_type).ok_or(FrameError::UnknownType(raw.msg_type))?;
    Ok((
        Frame {
            msg_type,
            stream_id: raw.stream_id,
            payload: raw.payload,
        },
        used,
    ))
}

#[derive(Debug, Error)]
pub enum ReadFrameError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one raw frame from a byte stream. The payload buffer is only
/// allocated after the header passed the length bound. Returns `Ok(None)` on
/// a clean end of stream before any header byte.
pub fn read_raw<R: Read>(reader: &mut R) -> Result<Option<RawFrame>, ReadFrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                parse_header(&header[..got])?;
                return Err(FrameError::Truncated {
                    needed: HEADER_LEN,
                    have: got,
                }
                .into());
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (_, _, len) = parse_header(&header)?;
    let mut frame = Vec::with_capacity(FRAME_OVERHEAD + len);
    frame.extend_from_slice(&header);
    frame.resize(FRAME_OVERHEAD + len, 0);
    reader.read_exact(&mut frame[HEADER_LEN..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ReadFrameError::Frame(FrameError::Truncated {
                needed: FRAME_OVERHEAD + len,
                have: HEADER_LEN,
            })
        } else {
            ReadFrameError::Io(e)
        }
    })?;
    Ok(Some(decode_raw(&frame)?.0))
}

/// Tag-length-value payload encoding: tag u8, length u16 BE, value.
pub mod tlv {
    use thiserror::Error;

    pub const MAX_VALUE: usize = u16::MAX as usize;

    #[derive(Debug, Clone, PartialEq, Eq, Error)]
    pub enum TlvError {
        #[error("truncated tlv field at offset {0}")]
        Truncated(usize),
        #[error("missing field {0:#04x}")]
        Missing(u8),
        #[error("field {tag:#04x} has invalid contents")]
        Invalid { tag: u8 },
        #[error("value of {0} bytes does not fit a tlv field")]
        ValueTooLong(usize),
    }

    #[derive(Debug, Default, Clone)]
    pub struct Writer {
        buf: Vec<u8>,
    }

    impl Writer {
        pub fn new() -> Self {
            Writer::default()
        }

        pub fn bytes(&mut self, tag: u8, value: &[u8]) -> Result<&mut Self, TlvError> {
            if value.len() > MAX_VALUE {
                return Err(TlvError::ValueTooLong(value.len()));
            }
            self.buf.push(tag);
            self.buf.extend_from_slice(&(value.len() as u16).to_be_bytes());
            self.buf.extend_from_slice(value);
            Ok(self)
        }

        pub fn str(&mut self, tag: u8, value: &str) -> Result<&mut Self, TlvError> {
            self.bytes(tag, value.as_bytes())
        }

        pub fn u8(&mut self, tag: u8, value: u8) -> &mut Self {
            self.bytes(tag, &[value]).expect("fits")
        }

        pub fn u32(&mut self, tag: u8, value: u32) -> &mut Self {
            self.bytes(tag, &value.to_be_bytes()).expect("fits")
        }

        pub fn i32(&mut self, tag: u8, value: i32) -> &mut Self {
            self.bytes(tag, &value.to_be_bytes()).expect("fits")
        }

        pub fn u64(&mut self, tag: u8, value: u64) -> &mut Self {
            self.bytes(tag, &value.to_be_bytes()).expect("fits")
        }

        pub fn finish(&mut self) -> Vec<u8> {
            std::mem::take(&mut self.buf)
        }
    }

    /// Parsed fields in wire order; tags may repeat.
    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Fields<'a>(pub Vec<(u8, &'a [u8])>);

    pub fn parse(payload: &[u8]) -> Result<Fields<'_>, TlvError> {
        let mut fields = Vec::new();
        let mut at = 0;
        while at < payload.len() {
            if payload.len() - at < 3 {
                return Err(TlvError::Truncated(at));
            }
            let tag = payload[at];
            let len = u16::from_be_bytes([payload[at + 1], payload[at + 2]]) as usize;
            let start = at + 3;
            if payload.len() - start < len {
                return Err(TlvError::Truncated(at));
            }
            fields.push((tag, &payload[start..start + len]));
            at = start + len;
        }
        Ok(Fields(fields))
    }

    impl<'a> Fields<'a> {
        pub fn get(&self, tag: u8) -> Option<&'a [u8]> {
            self.0.iter().find(|(t, _)| *t == tag).map(|(_, v)| *v)
        }

        pub fn all(&self, tag: u8) -> impl Iterator<Item = &'a [u8]> + '_ {
            self.0.iter().filter(move |(t, _)| *t == tag).map(|(_, v)| *v)
        }

        pub fn require(&self, tag: u8) -> Result<&'a [u8], TlvError> {
            self.get(tag).ok_or(TlvError::Missing(tag))
        }

        pub fn u8(&self, tag: u8) -> Result<u8, TlvError> {
            match self.require(tag)? {
                [b] => Ok(*b),
                _ => Err(TlvError::Invalid { tag }),
            }
        }

        pub fn u32(&self, tag: u8) -> Result<u32, TlvError> {
            let v = self.require(tag)?;
            Ok(u32::from_be_bytes(v.try_into().map_err(|_| TlvError::Invalid { tag })?))
        }

        pub fn i32(&self, tag: u8) -> Result<i32, TlvError> {
            let v = self.require(tag)?;
            Ok(i32::from_be_bytes(v.try_into().map_err(|_| TlvError::Invalid { tag })?))
        }

        pub fn u64(&self, tag: u8) -> Result<u64, TlvError> {
            let v = self.require(tag)?;
            Ok(u64::from_be_bytes(v.try_into().map_err(|_| TlvError::Invalid { tag })?))
        }

        pub fn string(&self, tag: u8) -> Result<String, TlvError> {
            let v = self.require(tag)?;
            String::from_utf8(v.to_vec()).map_err(|_| TlvError::Invalid { tag })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Daemon,
    Zone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("channel closed")]
    ChannelClosed,
    #[error("inflight budget exhausted")]
    Backpressure,
    #[error("frame could not be encoded: payload too large")]
    PayloadTooLarge,
}

#[derive(Debug, Default)]
struct Direction {
    queue: VecDeque<Vec<u8>>,
}

#[derive(Debug)]
struct Shared {
    budget: usize,
    to_zone: Direction,
    to_daemon: Direction,
    closed: bool,
}

/// One end of a bidirectional IDM channel.
///
/// Frames travel as encoded bytes. A sender may have at most `budget`
/// frames sitting unreceived in the peer's queue; the peer's `recv` releases
/// one unit per frame.
#[derive(Debug, Clone)]
pub struct ChannelEndpoint {
    side: Side,
    shared: Arc<Mutex<Shared>>,
}

/// Creates a connected `(daemon, zone)` endpoint pair.
pub fn channel(inflight_budget: usize) -> (ChannelEndpoint, ChannelEndpoint) {
    assert!(inflight_budget > 0, "inflight budget must be positive");
    let shared = Arc::new(Mutex::new(Shared {
        budget: inflight_budget,
        to_zone: Direction::default(),
        to_daemon: Direction::default(),
        closed: false,
    }));
    (
        ChannelEndpoint {
            side: Side::Daemon,
            shared: shared.clone(),
        },
        ChannelEndpoint {
            side: Side::Zone,
            shared,
        },
    )
}

impl ChannelEndpoint {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn inflight_budget(&self) -> usize {
        self.lock().budget
    }

    /// Frames this endpoint has sent that the peer has not yet received.
    pub fn unacknowledged(&self) -> usize {
        let shared = self.lock();
        match self.side {
            Side::Daemon => shared.to_zone.queue.len(),
            Side::Zone => shared.to_daemon.queue.len(),
        }
    }

    pub fn send(&self, frame: &Frame) -> Result<(), ChannelError> {
        let bytes = frame.encode().map_err(|_| ChannelError::PayloadTooLarge)?;
        self.send_bytes(bytes)
    }

    /// Sends an already encoded frame.
    pub fn send_bytes(&self, bytes: Vec<u8>) -> Result<(), ChannelError> {
        let mut shared = self.lock();
        if shared.closed {
            return Err(ChannelError::ChannelClosed);
        }
        let budget = shared.budget;
        let out = match self.side {
            Side::Daemon => &mut shared.to_zone,
            Side::Zone => &mut shared.to_daemon,
        };
        if out.queue.len() >= budget {
            return Err(ChannelError::Backpressure);
        }
        out.queue.push_back(bytes);
        Ok(())
    }

    /// Oldest frame bytes queued for this endpoint, if any.
    pub fn recv_bytes(&self) -> Result<Option<Vec<u8>>, ChannelError> {
        let mut shared = self.lock();
        if shared.closed {
            return Err(ChannelError::ChannelClosed);
        }
        let inbox = match self.side {
            Side::Daemon => &mut shared.to_daemon,
            Side::Zone => &mut shared.to_zone,
        };
        Ok(inbox.queue.pop_front())
    }

    /// Receives and decodes the oldest frame. Frames that fail to decode are
    /// dropped and reported as an error for that call.
    pub fn recv(&self) -> Result<Option<Result<Frame, FrameError>>, ChannelError> {
        Ok(self
            .recv_bytes()?
            .map(|bytes| decode_frame(&bytes).map(|(frame, _)| frame)))
    }

    /// Closes both directions.
    pub fn close(&self) {
        self.lock().closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }
}
