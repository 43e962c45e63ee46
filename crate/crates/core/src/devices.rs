//! Device attachments served by driver zones.
//!
//! A device is either passed through whole (one slice, one client) or
//! partitioned into slices that serve one client each. Slice memory models
//! device-local memory (VRAM for a GPU): the driver zone reads and writes it
//! on behalf of clients, and the daemon wipes a slice before it can be bound
//! to anyone else.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::agent::DeviceBackend;
use crate::msg::{DeviceOp, DeviceReply, DeviceRequest, DeviceStatus};
use crate::zone::ZoneId;

pub const DEFAULT_SLICE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttachMode {
    Passthrough,
    Partitioned { slices: u32 },
}

impl AttachMode {
    pub fn slice_count(&self) -> u32 {
        match self {
            AttachMode::Passthrough => 1,
            AttachMode::Partitioned { slices } => *slices,
        }
    }
}

/// Per-slice device memory shared between the daemon and the driver zone.
#[derive(Debug)]
pub struct DeviceMemory {
    slices: Mutex<Vec<Vec<u8>>>,
}

impl DeviceMemory {
    pub fn new(slices: u32, slice_bytes: usize) -> Self {
        DeviceMemory {
            slices: Mutex::new(vec![vec![0u8; slice_bytes]; slices as usize]),
        }
    }

    pub fn wipe(&self, slice: u32) {
        let mut slices = self.slices.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(buf) = slices.get_mut(slice as usize) {
            buf.fill(0);
        }
    }

    pub fn wipe_all(&self) {
        let mut slices = self.slices.lock().unwrap_or_else(|e| e.into_inner());
        for buf in slices.iter_mut() {
            buf.fill(0);
        }
    }

    pub fn snapshot(&self, slice: u32) -> Option<Vec<u8>> {
        let slices = self.slices.lock().unwrap_or_else(|e| e.into_inner());
        slices.get(slice as usize).cloned()
    }
}

impl DeviceBackend for DeviceMemory {
    fn handle(&self, request: &DeviceRequest) -> DeviceReply {
        let mut slices = self.slices.lock().unwrap_or_else(|e| e.into_inner());
        let Some(buf) = slices.get_mut(request.slice as usize) else {
            return DeviceReply {
                status: DeviceStatus::NoSuchSlice,
                data: Vec::new(),
            };
        };
        let out_of_range = DeviceReply {
            status: DeviceStatus::OutOfRange,
            data: Vec::new(),
        };
        match &request.op {
            DeviceOp::Read { offset, len } => {
                let Some(end) = offset.checked_add(*len as u64) else {
                    return out_of_range;
                };
                if end > buf.len() as u64 {
                    return out_of_range;
                }
                DeviceReply {
                    status: DeviceStatus::Ok,
                    data: buf[*offset as usize..end as usize].to_vec(),
                }
            }
            DeviceOp::Write { offset, data } => {
                let Some(end) = offset.checked_add(data.len() as u64) else {
                    return out_of_range;
                };
                if end > buf.len() as u64 {
                    return out_of_range;
                }
                buf[*offset as usize..end as usize].copy_from_slice(data);
                DeviceReply {
                    status: DeviceStatus::Ok,
                    data: Vec::new(),
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceAttachment {
    pub device_id: String,
    pub mode: AttachMode,
    pub driver_zone: ZoneId,
    pub slices: BTreeMap<u32, Option<ZoneId>>,
    pub memory: Arc<DeviceMemory>,
}

impl DeviceAttachment {
    pub fn new(device_id: String, mode: AttachMode, driver_zone: ZoneId, slice_bytes: usize) -> Self {
        let count = mode.slice_count();
        DeviceAttachment {
            device_id,
            mode,
            driver_zone,
            slices: (0..count).map(|i| (i, None)).collect(),
            memory: Arc::new(DeviceMemory::new(count, slice_bytes)),
        }
    }

    pub fn client_of(&self, slice: u32) -> Option<ZoneId> {
        self.slices.get(&slice).copied().flatten()
    }

    pub fn slices_of(&self, client: ZoneId) -> Vec<u32> {
        self.slices
            .iter()
            .filter(|(_, c)| **c == Some(client))
            .map(|(s, _)| *s)
            .collect()
    }

    /// Serializable summary for APIs.
    pub fn summary(&self) -> AttachmentSummary {
        AttachmentSummary {
            device_id: self.device_id.clone(),
            mode: self.mode,
            driver_zone: self.driver_zone,
            slices: self.slices.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachmentSummary {
    pub device_id: String,
    pub mode: AttachMode,
    pub driver_zone: ZoneId,
    pub slices: BTreeMap<u32, Option<ZoneId>>,
}
