//! Embedded append-only key-value store.
//!
//! On-disk record layout (integers big-endian):
//!
//! ```text
//! +----------+----------+----------------------------------------------+
//! | body_len | crc32    | body                                         |
//! | u32      | u32      | op u8 | key_len u16 | key | val_len u32 | val |
//! +----------+----------+----------------------------------------------+
//! ```
//!
//! `op` is 0x01 (put). The CRC is CRC-32/IEEE over the body. Recovery
//! replays records in order and stops at the first record that is short or
//! fails its CRC; the file is truncated there, so a torn trailing write is
//! discarded silently. Compaction writes one put per live key to a temp
//! file and renames it over the log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

const OP_PUT: u8 = 0x01;
const RECORD_HEADER: usize = 8;
pub const MAX_KEY_LEN: usize = u16::MAX as usize;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(#[from] io::Error),
    #[error("no such key: {0}")]
    NoSuchKey(String),
    #[error("key of {0} bytes is too long")]
    KeyTooLong(usize),
    #[error("value of {0} bytes is too long")]
    ValueTooLong(usize),
}

/// Whether each put is fsynced before it is acknowledged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    #[default]
    Always,
    /// Flush to the OS only. For simulations that do not survive a power cut.
    FlushOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Recovery {
    pub records: u64,
    pub valid_bytes: u64,
    pub discarded_bytes: u64,
}

/// Encodes one put record.
pub fn encode_put(key: &str, value: &[u8]) -> Result<Vec<u8>, StoreError> {
    if key.len() > MAX_KEY_LEN {
        return Err(StoreError::KeyTooLong(key.len()));
    }
    if value.len() > u32::MAX as usize - key.len() - 7 {
        return Err(StoreError::ValueTooLong(value.len()));
    }
    let mut body = Vec::with_capacity(7 + key.len() + value.len());
    body.push(OP_PUT);
    body.extend_from_slice(&(key.len() as u16).to_be_bytes());
    body.extend_from_slice(key.as_bytes());
    body.extend_from_slice(&(value.len() as u32).to_be_bytes());
    body.extend_from_slice(value);

    let mut record = Vec::with_capacity(RECORD_HEADER + body.len());
    record.extend_from_slice(&(body.len() as u32).to_be_bytes());
    record.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    record.extend_from_slice(&body);
    Ok(record)
}

fn decode_body(body: &[u8]) -> Option<(String, Vec<u8>)> {
    let (&op, rest) = body.split_first()?;
    if op != OP_PUT || rest.len() < 2 {
        return None;
    }
    let key_len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
    let rest = &rest[2..];
    if rest.len() < key_len + 4 {
        return None;
    }
    let key = String::from_utf8(rest[..key_len].to_vec()).ok()?;
    let rest = &rest[key_len..];
    let val_len = u32::from_be_bytes(rest[..4].try_into().ok()?) as usize;
    let rest = &rest[4..];
    if rest.len() != val_len {
        return None;
    }
    Some((key, rest.to_vec()))
}

/// Replays a log image. Returns the recovered map and how much of the
/// image was valid.
pub fn replay(log: &[u8]) -> (BTreeMap<String, Vec<u8>>, Recovery) {
    let mut map = BTreeMap::new();
    let mut at = 0usize;
    let mut records = 0u64;
    while log.len() - at >= RECORD_HEADER {
        let len = u32::from_be_bytes(log[at..at + 4].try_into().unwrap()) as usize;
        let crc = u32::from_be_bytes(log[at + 4..at + 8].try_into().unwrap());
        let start = at + RECORD_HEADER;
        if log.len() - start < len {
            break;
        }
        let body = &log[start..start + len];
        if crc32fast::hash(body) != crc {
            break;
        }
        let Some((key, value)) = decode_body(body) else {
            break;
        };
        map.insert(key, value);
        records += 1;
        at = start + len;
    }
    (
        map,
        Recovery {
            records,
            valid_bytes: at as u64,
            discarded_bytes: (log.len() - at) as u64,
        },
    )
}

#[derive(Debug)]
pub struct KvStore {
    path: PathBuf,
    file: File,
    map: BTreeMap<String, Vec<u8>>,
    sync: SyncMode,
    log_bytes: u64,
}

impl KvStore {
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Recovery), StoreError> {
        Self::open_with(path, SyncMode::default())
    }

    pub fn open_with(path: impl AsRef<Path>, sync: SyncMode) -> Result<(Self, Recovery), StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut image = Vec::new();
        file.read_to_end(&mut image)?;
        let (map, recovery) = replay(&image);
        if recovery.discarded_bytes > 0 {
            warn!(
                "{}: discarding {} trailing bytes after {} records",
                path.display(),
                recovery.discarded_bytes,
                recovery.records
            );
            file.set_len(recovery.valid_bytes)?;
            file.sync_all()?;
        }
        Ok((
            KvStore {
                path,
                file,
                map,
                sync,
                log_bytes: recovery.valid_bytes,
            },
            recovery,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends and flushes the record before updating the in-memory map.
    pub fn put(&mut self, key: &str, value: &[u8]) -> Result<(), StoreError> {
        let record = encode_put(key, value)?;
        self.file.write_all(&record)?;
        match self.sync {
            SyncMode::Always => self.file.sync_data()?,
            SyncMode::FlushOnly => self.file.flush()?,
        }
        self.log_bytes += record.len() as u64;
        self.map.insert(key.to_string(), value.to_vec());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&[u8], StoreError> {
        self.map
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| StoreError::NoSuchKey(key.to_string()))
    }

    /// Keys starting with `prefix`, in lexicographic order.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        self.map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn log_bytes(&self) -> u64 {
        self.log_bytes
    }

    /// Rewrites the log as a snapshot holding one record per key.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let tmp = self.path.with_extension("compact");
        {
            let mut out = File::create(&tmp)?;
            for (k, v) in &self.map {
                out.write_all(&encode_put(k, v)?)?;
            }
            out.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().read(true).append(true).open(&self.path)?;
        self.log_bytes = self.file.metadata()?.len();
        Ok(())
    }
}
