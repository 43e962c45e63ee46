//! Acceptance checks shared by the `acceptance` runner and the topic test
//! files. Each check returns a one-line summary on success.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Cursor, Read};
use std::time::{Duration, Instant};

use edera_core::bench::{self, BenchClock, PUBLISHED_STARTUP_MS, REFERENCE_LABEL};
use edera_core::cri::{CriShim, PodDesiredState, RUNTIME_CLASS};
use edera_core::daemon::{Daemon, DaemonConfig, DaemonError};
use edera_core::devices::AttachMode;
use edera_core::hv::{CpuPolicy, DomainId, HostConfig, HvError, Hypervisor, ROOT_DOMAIN};
use edera_core::idm::{self, FrameError, MsgType, ReadFrameError, MAX_PAYLOAD};
use edera_core::msg::{
    DeviceOp, DeviceReply, DeviceRequest, DeviceStatus, ExecOutput, ExecRequest, ExitEvent, Heartbeat, LogLine,
    MonitorEvent, MonitorKind, OutputFd, Payload,
};
use edera_core::net::{Destination, DropReason, NetProxy, RouteOutcome, ZonePacket, MAX_PACKET_PAYLOAD};
use edera_core::scenario;
use edera_core::store::{KvStore, SyncMode};
use edera_core::zone::{transition, LifecycleEvent, WorkloadBinding, ZoneId, ZoneRole, ZoneSpec, ZoneState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config(dir: &tempfile::TempDir, cpus: u32, memory_mib: u64) -> DaemonConfig {
    let mut cfg = DaemonConfig::new(
        HostConfig::with_memory_mib(cpus, memory_mib),
        dir.path().join("zones.log"),
    );
    cfg.sync = SyncMode::FlushOnly;
    cfg.kernel_stage_bytes = 4096;
    cfg.slice_bytes = 4096;
    cfg
}

pub fn daemon(dir: &tempfile::TempDir, cpus: u32, memory_mib: u64) -> Daemon {
    Daemon::open(config(dir, cpus, memory_mib), NetProxy::new()).expect("daemon opens")
}

// ---------------------------------------------------------------- 1

pub const SCENARIO_BUDGET: Duration = Duration::from_secs(5);

pub fn escape_suite() -> Check {
    let start = Instant::now();
    let outcomes = scenario::run_named("all").map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(outcomes.len() == 3, "expected 3 scenarios, ran {}", outcomes.len());
    for o in &outcomes {
        ensure!(o.passed, "{} failed: {}", o.name, o.detail);
    }
    ensure!(elapsed < SCENARIO_BUDGET, "suite took {elapsed:?}");
    Ok(format!("3/3 scenarios passed in {} ms", elapsed.as_millis()))
}

// ---------------------------------------------------------------- 2

/// The legal (state, successor) pairs, written out independently of the
/// implementation.
pub fn legal_successors(s: ZoneState) -> BTreeSet<ZoneState> {
    use ZoneState::*;
    let next: &[ZoneState] = match s {
        Provisioning => &[Warm, Active, Deprovisioned],
        Warm => &[Active, Deprovisioned],
        Active => &[Quarantined, NotResponding, Deprovisioned],
        Quarantined => &[Active, NotResponding, Deprovisioned],
        NotResponding => &[Deprovisioned],
        Deprovisioned => &[],
    };
    next.iter().copied().collect()
}

pub fn state_machine_closure() -> Check {
    let mut observed: BTreeMap<ZoneState, BTreeSet<ZoneState>> = BTreeMap::new();
    let mut pairs = 0;
    for s in ZoneState::ALL {
        for e in LifecycleEvent::ALL {
            pairs += 1;
            match transition(s, e) {
                Ok(next) => {
                    ensure!(
                        legal_successors(s).contains(&next),
                        "{s:?} --{e:?}--> {next:?} is not in the legal table"
                    );
                    ensure!(
                        transition(s, e) == Ok(next),
                        "transition is not a function at ({s:?}, {e:?})"
                    );
                    observed.entry(s).or_default().insert(next);
                }
                Err(err) => ensure!(err.state == s && err.event == e, "error misreports ({s:?}, {e:?})"),
            }
        }
    }
    for s in ZoneState::ALL {
        let got = observed.get(&s).cloned().unwrap_or_default();
        ensure!(
            got == legal_successors(s),
            "{s:?}: successors {got:?} != table {:?}",
            legal_successors(s)
        );
    }
    for e in LifecycleEvent::ALL {
        ensure!(
            transition(ZoneState::Deprovisioned, e).is_err(),
            "{e:?} resurrects Deprovisioned"
        );
    }
    let mut reached = BTreeSet::from([ZoneState::Provisioning]);
    let mut frontier = vec![ZoneState::Provisioning];
    while let Some(s) = frontier.pop() {
        for e in LifecycleEvent::ALL {
            if let Ok(n) = transition(s, e) {
                if reached.insert(n) {
                    frontier.push(n);
                }
            }
        }
    }
    ensure!(
        reached.len() == ZoneState::ALL.len(),
        "unreachable states: only {reached:?}"
    );
    Ok(format!(
        "{pairs} (state, event) pairs match the table; Deprovisioned terminal; all states reachable"
    ))
}

// ---------------------------------------------------------------- 3

#[derive(Debug, Default)]
struct LedgerModel {
    pages: BTreeMap<DomainId, u64>,
    pins: BTreeMap<u32, DomainId>,
}

pub fn ledger_conservation(seed: u64, ops: usize) -> Check {
    const CPUS: u32 = 8;
    let host = HostConfig::with_memory_mib(CPUS, 256);
    let total = host.page_count;
    let mut hv = Hypervisor::new(host).map_err(|e| e.to_string())?;
    let mut model = LedgerModel::default();
    model.pages.insert(ROOT_DOMAIN, 0);
    let mut r = rng(seed);
    let mut successes = 0;

    for step in 0..ops {
        let free = total - model.pages.values().sum::<u64>();
        let ids: Vec<DomainId> = model.pages.keys().copied().filter(|d| *d != ROOT_DOMAIN).collect();
        let pick = |r: &mut ChaCha8Rng| ids.choose(r).copied();
        let op = r.gen_range(0..5);
        let ok = match op {
            0 => {
                let mib = r.gen_range(0..=24u64);
                let vcpus = r.gen_range(0..=3u32);
                let exclusive = r.gen_bool(0.3);
                let pages = host.pages_for_mib(mib);
                let free_cpus: Vec<u32> = (0..CPUS).filter(|c| !model.pins.contains_key(c)).collect();
                let expect_ok = pages <= free && (!exclusive || free_cpus.len() >= vcpus as usize);
                let spec = ZoneSpec::workload("k", mib, vcpus);
                let policy = if exclusive {
                    CpuPolicy::Exclusive
                } else {
                    CpuPolicy::Shared
                };
                let res = hv.create_domain(&spec, 256, policy);
                ensure!(
                    res.is_ok() == expect_ok,
                    "step {step}: create {mib} MiB/{vcpus} -> {res:?}"
                );
                if let Ok(h) = res {
                    model.pages.insert(h.domain_id, pages);
                    if exclusive {
                        for &c in free_cpus.iter().take(vcpus as usize) {
                            model.pins.insert(c, h.domain_id);
                        }
                    }
                }
                expect_ok
            }
            1 => {
                let target = if r.gen_bool(0.05) {
                    Some(ROOT_DOMAIN)
                } else {
                    pick(&mut r)
                };
                let Some(d) = target else { continue };
                let res = hv.destroy_domain(d);
                if d == ROOT_DOMAIN {
                    ensure!(
                        matches!(res, Err(HvError::RootUndestroyable)),
                        "step {step}: root destroyed"
                    );
                    false
                } else {
                    let released = res.map_err(|e| format!("step {step}: destroy {d}: {e}"))?;
                    let pages = model.pages.remove(&d).unwrap();
                    ensure!(
                        released.pages == pages,
                        "step {step}: released {} != {pages}",
                        released.pages
                    );
                    model.pins.retain(|_, owner| *owner != d);
                    true
                }
            }
            2 => {
                let Some(d) = pick(&mut r) else { continue };
                let mib = r.gen_range(1..=16u64);
                let pages = host.pages_for_mib(mib);
                let res = hv.grow_memory(d, mib);
                ensure!(
                    res.is_ok() == (pages <= free),
                    "step {step}: grow {d} by {mib} MiB -> {res:?}"
                );
                if res.is_ok() {
                    *model.pages.get_mut(&d).unwrap() += pages;
                }
                res.is_ok()
            }
            3 => {
                let Some(d) = pick(&mut r) else { continue };
                let cpu = r.gen_range(0..CPUS + 1);
                let expect_ok = cpu < CPUS && model.pins.get(&cpu).is_none_or(|o| *o == d);
                let res = hv.pin_cpu(d, cpu);
                ensure!(res.is_ok() == expect_ok, "step {step}: pin {d} cpu{cpu} -> {res:?}");
                if expect_ok {
                    model.pins.insert(cpu, d);
                }
                expect_ok
            }
            _ => {
                let Some(d) = pick(&mut r) else { continue };
                let cpu = r.gen_range(0..CPUS);
                let expect_ok = model.pins.get(&cpu) == Some(&d);
                let res = hv.unpin_cpu(d, cpu);
                ensure!(res.is_ok() == expect_ok, "step {step}: unpin {d} cpu{cpu} -> {res:?}");
                if expect_ok {
                    model.pins.remove(&cpu);
                }
                expect_ok
            }
        };
        successes += usize::from(ok);

        hv.check_invariants().map_err(|e| format!("step {step}: {e}"))?;
        let ledger = hv.ledger();
        ensure!(
            ledger.granted_pages() + ledger.free_pages == total && ledger.total_pages == total,
            "step {step}: granted {} + free {} != total {total}",
            ledger.granted_pages(),
            ledger.free_pages
        );
        let model_granted: u64 = model.pages.values().sum();
        ensure!(
            ledger.granted_pages() == model_granted,
            "step {step}: ledger disagrees with model"
        );
        let mut pinned_by: BTreeMap<u32, DomainId> = BTreeMap::new();
        for &d in model.pages.keys() {
            let info = hv.domain(d).ok_or(format!("step {step}: {d} missing"))?;
            ensure!(
                info.pages == model.pages[&d],
                "step {step}: {d} has {} pages",
                info.pages
            );
            for &cpu in &info.pinned {
                ensure!(pinned_by.insert(cpu, d).is_none(), "step {step}: cpu{cpu} pinned twice");
            }
        }
        ensure!(
            pinned_by == model.pins,
            "step {step}: pins {pinned_by:?} != model {:?}",
            model.pins
        );
        for (cpu, grant) in ledger.cpu_grants.iter().enumerate() {
            ensure!(
                *grant == pinned_by.get(&(cpu as u32)).copied(),
                "step {step}: cpu{cpu} grant {grant:?} disagrees with domain pins"
            );
        }
    }
    Ok(format!(
        "{ops} operations ({successes} succeeded), conservation and pin exclusivity held at every step"
    ))
}

// ---------------------------------------------------------------- 4

pub struct FairnessCase {
    pub cpus: u32,
    pub weights: Vec<u32>,
    pub window: u64,
}

pub fn fairness_case(r: &mut ChaCha8Rng) -> FairnessCase {
    let n = r.gen_range(1..=8usize);
    FairnessCase {
        cpus: r.gen_range(1..=8),
        weights: (0..n).map(|_| r.gen_range(1..=1024)).collect(),
        window: 100 * n as u64 * r.gen_range(1..=4),
    }
}

fn scheduled_host(case: &FairnessCase) -> Result<(Hypervisor, Vec<DomainId>), String> {
    let mut hv = Hypervisor::new(HostConfig::new(case.cpus, 64)).map_err(|e| e.to_string())?;
    let mut ids = Vec::new();
    for &w in &case.weights {
        let h = hv
            .create_domain(&ZoneSpec::workload("k", 0, 1), w, CpuPolicy::Shared)
            .map_err(|e| e.to_string())?;
        ids.push(h.domain_id);
    }
    Ok((hv, ids))
}

/// Largest deviation from the fluid proportional share, in ticks.
pub fn check_fairness(case: &FairnessCase) -> Result<f64, String> {
    let n = case.weights.len() as i128;
    let (hv, ids) = scheduled_host(case)?;
    let trace = hv.run_scheduler(case.window).map_err(|e| e.to_string())?;
    let slots = case.window as i128 * case.cpus as i128;
    let total_w: i128 = case.weights.iter().map(|&w| w as i128).sum();
    ensure!(
        trace.total() as i128 == slots,
        "{} of {slots} slots used",
        trace.total()
    );
    let mut worst = 0f64;
    for (id, &w) in ids.iter().zip(&case.weights) {
        let count = trace.ticks_for(*id) as i128;
        let scaled_dev = (count * total_w - slots * w as i128).abs();
        worst = worst.max(scaled_dev as f64 / total_w as f64);
        ensure!(
            scaled_dev <= n * total_w,
            "domain {id} weight {w}: {count} ticks vs share {:.2} (weights {:?}, cpus {})",
            (slots * w as i128) as f64 / total_w as f64,
            case.weights,
            case.cpus
        );
    }
    let (again, _) = scheduled_host(case)?;
    let first = trace.to_bytes();
    ensure!(
        hv.run_scheduler(case.window).map_err(|e| e.to_string())?.to_bytes() == first
            && again.run_scheduler(case.window).map_err(|e| e.to_string())?.to_bytes() == first,
        "trace differs between runs for weights {:?}",
        case.weights
    );
    Ok(worst)
}

pub fn scheduler_fairness(seed: u64, vectors: usize) -> Check {
    let mut r = rng(seed);
    let mut worst = 0f64;
    for i in 0..vectors {
        let case = fairness_case(&mut r);
        let dev = check_fairness(&case).map_err(|e| format!("vector {i}: {e}"))?;
        worst = worst.max(dev);
    }
    Ok(format!(
        "{vectors} weight vectors within |domains| ticks of proportional share (worst {worst:.2}); traces byte-identical"
    ))
}

// ---------------------------------------------------------------- 5

/// Bitwise CRC-32 (IEEE, reflected, poly 0xEDB88320).
pub fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xEDB8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

/// Frame encoder written from the wire layout alone.
pub fn reference_frame(msg_type: u8, stream: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0xED, 0x7A, 0x01, msg_type];
    out.extend_from_slice(&stream.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    let crc = crc32_bitwise(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    out
}

pub const GOLDEN: &str = include_str!("../data/idm_golden.txt");

pub fn golden_vectors() -> Vec<(String, Vec<u8>)> {
    GOLDEN
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (name, hex) = l.split_once(' ').expect("name and hex");
            (name.to_string(), unhex(hex.trim()))
        })
        .collect()
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

/// The typed message each golden vector encodes, as (type, stream, payload).
fn golden_message(name: &str) -> Option<(MsgType, u32, Vec<u8>)> {
    fn enc<P: Payload>(p: P, stream: u32) -> Option<(MsgType, u32, Vec<u8>)> {
        Some((P::TYPE, stream, p.encode().ok()?))
    }
    let device_stream = 0x0102_0304;
    match name {
        "ping" => enc(Heartbeat::default(), 0),
        "heartbeat" => {
            let mut id = [0u8; 16];
            for (i, b) in id.iter_mut().enumerate() {
                *b = i as u8;
            }
            enc(
                Heartbeat {
                    zone_id: Some(ZoneId::from_bytes(id)),
                    seq: Some(7),
                },
                0,
            )
        }
        "monitor_event" => enc(MonitorEvent::new(MonitorKind::ProcessStart, "echo", 1500), 0),
        "exec_request" => enc(
            ExecRequest {
                argv: vec!["echo".into(), "hi".into()],
                stdin: Vec::new(),
            },
            42,
        ),
        "exec_output" => enc(
            ExecOutput {
                fd: OutputFd::Stdout,
                data: b"hi\n".to_vec(),
            },
            42,
        ),
        "exit_event" => enc(ExitEvent { code: -1 }, 42),
        "log_line" => enc(
            LogLine {
                level: 3,
                text: "boot ok".into(),
            },
            0,
        ),
        "device_request" => enc(
            DeviceRequest {
                device_id: "gpu0".into(),
                slice: 1,
                op: DeviceOp::Read { offset: 0, len: 16 },
            },
            device_stream,
        ),
        "device_reply" => enc(
            DeviceReply {
                status: DeviceStatus::Ok,
                data: vec![1, 2, 3],
            },
            device_stream,
        ),
        _ => None,
    }
}

pub fn check_golden() -> Result<usize, String> {
    let vectors = golden_vectors();
    ensure!(vectors.len() == 9, "expected 9 golden vectors, found {}", vectors.len());
    for (name, bytes) in &vectors {
        let (ty, stream, payload) = golden_message(name).ok_or(format!("no message for golden vector {name}"))?;
        let encoded = idm::encode_frame(ty, stream, &payload).map_err(|e| e.to_string())?;
        ensure!(&encoded == bytes, "{name}: encoder output differs from golden bytes");
        ensure!(
            reference_frame(ty as u8, stream, &payload) == *bytes,
            "{name}: reference encoder differs"
        );
        let crc = u32::from_be_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        ensure!(
            crc == crc32_bitwise(&bytes[..bytes.len() - 4]),
            "{name}: golden crc is wrong"
        );
        let (frame, used) = idm::decode_frame(bytes).map_err(|e| format!("{name}: {e}"))?;
        ensure!(
            used == bytes.len() && frame.msg_type == ty && frame.stream_id == stream && frame.payload == payload,
            "{name}: decode mismatch"
        );
    }
    Ok(vectors.len())
}

const MSG_TYPES: [MsgType; 8] = [
    MsgType::Heartbeat,
    MsgType::Event,
    MsgType::ExecRequest,
    MsgType::ExecOutput,
    MsgType::ExitEvent,
    MsgType::Log,
    MsgType::DeviceRequest,
    MsgType::DeviceReply,
];

pub fn random_frame(r: &mut ChaCha8Rng) -> (MsgType, u32, Vec<u8>) {
    let ty = *MSG_TYPES.choose(r).unwrap();
    let len = match r.gen_range(0..100) {
        0 => MAX_PAYLOAD,
        1..=3 => r.gen_range(0..=MAX_PAYLOAD),
        4..=20 => 0,
        _ => r.gen_range(0..512),
    };
    let mut payload = vec![0u8; len];
    r.fill(&mut payload[..]);
    (ty, r.gen(), payload)
}

/// A corpus input: random bytes, a damaged legal frame, or a run of frames
/// with damage somewhere.
pub fn fuzz_input(r: &mut ChaCha8Rng) -> Vec<u8> {
    match r.gen_range(0..6) {
        0 => {
            let mut b = vec![0u8; r.gen_range(0..64)];
            r.fill(&mut b[..]);
            if r.gen_bool(0.5) && b.len() >= 3 {
                b[..3].copy_from_slice(&[0xED, 0x7A, 0x01]);
            }
            b
        }
        1 => {
            let mut f = small_frame(r);
            let bit = r.gen_range(0..f.len() * 8);
            f[bit / 8] ^= 1 << (bit % 8);
            f
        }
        2 => {
            let mut f = small_frame(r);
            f.truncate(r.gen_range(0..f.len()));
            f
        }
        3 => {
            let mut f = small_frame(r);
            let len: u32 = match r.gen_range(0..3) {
                0 => r.gen(),
                1 => MAX_PAYLOAD as u32 + r.gen_range(1..1024),
                _ => r.gen_range(0..64),
            };
            f[8..12].copy_from_slice(&len.to_be_bytes());
            f
        }
        4 => {
            let mut f = small_frame(r);
            f[3] = r.gen();
            if r.gen_bool(0.5) {
                let body_end = f.len() - 4;
                let crc = crc32_bitwise(&f[..body_end]);
                f[body_end..].copy_from_slice(&crc.to_be_bytes());
            }
            f
        }
        _ => {
            let mut out = Vec::new();
            for _ in 0..r.gen_range(1..5) {
                out.extend(small_frame(r));
            }
            let at = r.gen_range(0..out.len());
            match r.gen_range(0..3) {
                0 => out[at] = r.gen(),
                1 => out.truncate(at),
                _ => out.insert(at, r.gen()),
            }
            out
        }
    }
}

fn small_frame(r: &mut ChaCha8Rng) -> Vec<u8> {
    let ty = *MSG_TYPES.choose(r).unwrap();
    let mut payload = vec![0u8; r.gen_range(0..48)];
    r.fill(&mut payload[..]);
    idm::encode_frame(ty, r.gen(), &payload).unwrap()
}

/// Decodes every frame it can from `input`, through both the slice decoder
/// and the stream reader, and checks what was accepted re-encodes exactly.
pub fn decode_all(input: &[u8]) -> Result<usize, String> {
    let mut at = 0;
    let mut frames = 0;
    while at < input.len() {
        match idm::decode_frame(&input[at..]) {
            Ok((f, used)) => {
                ensure!(
                    used >= idm::FRAME_OVERHEAD && at + used <= input.len(),
                    "bad consumed length {used}"
                );
                ensure!(
                    f.encode().unwrap() == input[at..at + used],
                    "accepted frame does not re-encode"
                );
                frames += 1;
                at += used;
            }
            Err(_) => break,
        }
    }
    let mut cursor = Cursor::new(input);
    for _ in 0..=input.len() {
        match idm::read_raw(&mut cursor) {
            Ok(Some(_)) => {}
            Ok(None) | Err(_) => break,
        }
    }
    Ok(frames)
}

/// Serves `header` and then fails any further read.
pub struct HeaderOnly {
    header: Vec<u8>,
    at: usize,
    pub read_past_header: bool,
}

impl HeaderOnly {
    pub fn new(header: Vec<u8>) -> Self {
        HeaderOnly {
            header,
            at: 0,
            read_past_header: false,
        }
    }
}

impl Read for HeaderOnly {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.at == self.header.len() {
            self.read_past_header = true;
            return Err(io::Error::other("payload read attempted"));
        }
        let n = buf.len().min(self.header.len() - self.at).min(5);
        buf[..n].copy_from_slice(&self.header[self.at..self.at + n]);
        self.at += n;
        Ok(n)
    }
}

pub fn oversize_header(msg_type: u8, stream: u32, len: u32) -> Vec<u8> {
    let mut h = vec![0xED, 0x7A, 0x01, msg_type];
    h.extend_from_slice(&stream.to_be_bytes());
    h.extend_from_slice(&len.to_be_bytes());
    h
}

pub fn check_oversize(msg_type: u8, stream: u32, len: u32) -> Result<(), String> {
    let header = oversize_header(msg_type, stream, len);
    ensure!(
        idm::decode_raw(&header) == Err(FrameError::FrameTooLarge(len)),
        "decode_raw accepted or misclassified len {len}"
    );
    let mut reader = HeaderOnly::new(header);
    let res = idm::read_raw(&mut reader);
    ensure!(
        matches!(res, Err(ReadFrameError::Frame(FrameError::FrameTooLarge(l))) if l == len),
        "read_raw on len {len}: {res:?}"
    );
    ensure!(!reader.read_past_header, "payload bytes were requested for len {len}");
    Ok(())
}

pub fn idm_robustness(seed: u64) -> Check {
    let mut r = rng(seed);
    let golden = check_golden()?;

    let mut accepted = 0;
    for i in 0..10_000 {
        let input = fuzz_input(&mut r);
        let res = std::panic::catch_unwind(|| decode_all(&input));
        match res {
            Ok(Ok(n)) => accepted += n,
            Ok(Err(e)) => return Err(format!("fuzz input {i}: {e}")),
            Err(_) => return Err(format!("fuzz input {i} panicked: {input:02x?}")),
        }
    }

    for _ in 0..1000 {
        let len = r.gen_range(MAX_PAYLOAD as u32 + 1..=u32::MAX);
        check_oversize(r.gen(), r.gen(), len)?;
    }
    check_oversize(0x01, 0, MAX_PAYLOAD as u32 + 1)?;
    check_oversize(0x01, 0, u32::MAX)?;

    for i in 0..1000 {
        let (ty, stream, payload) = random_frame(&mut r);
        let bytes = idm::encode_frame(ty, stream, &payload).map_err(|e| e.to_string())?;
        ensure!(
            bytes == reference_frame(ty as u8, stream, &payload),
            "frame {i}: encoding differs from reference"
        );
        let (f, used) = idm::decode_frame(&bytes).map_err(|e| format!("frame {i}: {e}"))?;
        ensure!(
            used == bytes.len() && f.msg_type == ty && f.stream_id == stream && f.payload == payload,
            "frame {i}: round trip changed the frame"
        );
        let raw = idm::read_raw(&mut Cursor::new(&bytes)).map_err(|e| e.to_string())?;
        ensure!(
            raw.is_some_and(|raw| raw.payload == payload),
            "frame {i}: stream read differs"
        );
    }
    Ok(format!(
        "10000 fuzz inputs without a crash ({accepted} intact frames recovered); 1002 oversize headers rejected before payload reads; 1000 round trips; {golden} golden vectors bit-exact"
    ))
}

// ---------------------------------------------------------------- 6

pub struct SupervisionRun {
    pub disabled_at: u64,
    pub deprovisioned_at: u64,
    pub timeout: u64,
}

/// Disables one zone's agent at a random point and runs the clock well past
/// the deadline. Healthy zones must not move.
pub fn supervision_run(seed: u64, interval: u64) -> Result<SupervisionRun, String> {
    let mut r = rng(seed);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = config(&dir, 4, 1024);
    cfg.heartbeat_interval_ms = interval;
    cfg.heartbeat_timeout_ms = 3 * interval;
    cfg.id_seed = Some(seed);
    let timeout = cfg.heartbeat_timeout_ms;
    let mut d = Daemon::open(cfg, NetProxy::new()).map_err(|e| e.to_string())?;
    let err = |e: DaemonError| e.to_string();

    let victim = d.create_zone(ZoneSpec::workload("k", 16, 1), false).map_err(err)?.id;
    let active = d.create_zone(ZoneSpec::workload("k", 16, 1), false).map_err(err)?.id;
    let quarantined = d.create_zone(ZoneSpec::workload("k", 16, 1), false).map_err(err)?.id;
    let warm = d.create_zone(ZoneSpec::workload("k", 0, 0), true).map_err(err)?.id;
    d.pump();
    d.quarantine_zone(quarantined).map_err(err)?;
    let healthy = [active, quarantined, warm];
    let expected: Vec<ZoneState> = healthy.iter().map(|z| d.zone(*z).unwrap().state).collect();
    ensure!(
        expected == [ZoneState::Active, ZoneState::Quarantined, ZoneState::Warm],
        "setup states {expected:?}"
    );
    ensure!(d.zone(victim).unwrap().state == ZoneState::Active, "victim not active");

    let step = r.gen_range(1..=interval / 4).max(1);
    let disable_after = r.gen_range(0..=10 * interval);
    let horizon = disable_after + 40 * timeout;
    let mut now = 0;
    let mut disabled_at = None;
    let mut deprovisioned_at = None;
    while now <= horizon {
        if disabled_at.is_none() && now >= disable_after {
            d.disable_agent(victim).map_err(err)?;
            disabled_at = Some(now);
        }
        for change in d.advance_to(now) {
            ensure!(
                !healthy.contains(&change.zone),
                "healthy zone {} moved {:?}->{:?} at {now}",
                change.zone,
                change.from,
                change.to
            );
            if change.zone == victim && change.to == ZoneState::Deprovisioned {
                deprovisioned_at.get_or_insert(now);
            }
        }
        now += step;
    }
    let states: Vec<ZoneState> = healthy.iter().map(|z| d.zone(*z).unwrap().state).collect();
    ensure!(states == expected, "healthy zones ended in {states:?}");
    let disabled_at = disabled_at.ok_or("agent never disabled")?;
    let deprovisioned_at = deprovisioned_at.ok_or(format!("victim never deprovisioned (interval {interval})"))?;
    ensure!(
        d.zone(victim).is_some_and(|z| z.state == ZoneState::Deprovisioned),
        "victim record not tombstoned"
    );
    Ok(SupervisionRun {
        disabled_at,
        deprovisioned_at,
        timeout,
    })
}

pub fn heartbeat_supervision(seed: u64) -> Check {
    let mut worst = 0f64;
    for (i, interval) in [10u64, 50, 100, 250, 500].into_iter().enumerate() {
        for k in 0..4 {
            let run = supervision_run(seed + 97 * i as u64 + k, interval)?;
            let took = run.deprovisioned_at - run.disabled_at;
            ensure!(
                took <= 2 * run.timeout,
                "interval {interval}: deprovisioned {took} ms after disable, limit {}",
                2 * run.timeout
            );
            worst = worst.max(took as f64 / run.timeout as f64);
        }
    }
    Ok(format!(
        "20 runs: disabled zone deprovisioned within {worst:.2}x timeout (limit 2x); healthy active/quarantined/warm zones never transitioned"
    ))
}

// ---------------------------------------------------------------- 7

const KERNELS: [&str; 2] = [
    "ghcr.io/edera-dev/linux-kernel:latest",
    "ghcr.io/edera-dev/linux-kernel:6.6",
];

fn random_pod(r: &mut ChaCha8Rng, i: usize) -> PodDesiredState {
    PodDesiredState {
        name: format!("pod-{i}"),
        namespace: ["default", "prod"][r.gen_range(0..2)].to_string(),
        kernel_image: KERNELS[r.gen_range(0..2)].to_string(),
        memory_mib: [16, 32][r.gen_range(0..2)],
        runtime_class: if r.gen_bool(0.85) {
            RUNTIME_CLASS.into()
        } else {
            "runc".into()
        },
        containers: Vec::new(),
    }
}

fn converged(shim: &CriShim, d: &Daemon) -> Result<(), String> {
    let mut bound: BTreeMap<WorkloadBinding, Vec<ZoneId>> = BTreeMap::new();
    for z in d.live_zones().filter(|z| z.spec.role == ZoneRole::Workload) {
        if let Some(b) = &z.workload {
            bound.entry(b.clone()).or_default().push(z.id);
        }
    }
    let managed: Vec<&PodDesiredState> = shim.desired().filter(|p| p.managed()).collect();
    for p in &managed {
        let zones = bound.remove(&p.key()).unwrap_or_default();
        ensure!(zones.len() == 1, "pod {} has {} zones", p.key(), zones.len());
        let z = d.zone(zones[0]).unwrap();
        ensure!(
            z.spec.kernel_image == p.kernel_image && z.spec.memory_mib == p.memory_mib,
            "pod {} bound to a zone with the wrong spec",
            p.key()
        );
        ensure!(
            matches!(
                z.state,
                ZoneState::Active | ZoneState::Quarantined | ZoneState::Provisioning
            ),
            "pod {} zone is {}",
            p.key(),
            z.state
        );
    }
    ensure!(
        bound.is_empty(),
        "zones bound to no managed pod survive: {:?}",
        bound.keys().collect::<Vec<_>>()
    );
    Ok(())
}

pub fn reconcile_pair(seed: u64) -> Result<(usize, usize), String> {
    let mut r = rng(seed);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = config(&dir, 4, 4096);
    cfg.id_seed = Some(seed);
    let mut d = Daemon::open(cfg, NetProxy::new()).map_err(|e| e.to_string())?;
    let err = |e: DaemonError| e.to_string();

    let pods: Vec<PodDesiredState> = (0..r.gen_range(0..=50)).map(|i| random_pod(&mut r, i)).collect();
    let mut shim = CriShim::new();
    for p in &pods {
        shim.apply(p.clone());
    }
    let actual = r.gen_range(0..=40);
    let mut to_quarantine = Vec::new();
    for _ in 0..actual {
        let binding = match r.gen_range(0..10) {
            0 => None,
            1 => Some(WorkloadBinding {
                namespace: "default".into(),
                name: format!("gone-{}", r.gen_range(0..5)),
            }),
            _ if pods.is_empty() => None,
            _ => Some(pods.choose(&mut r).unwrap().key()),
        };
        let warm = r.gen_bool(0.1);
        let spec = if warm {
            ZoneSpec::workload(KERNELS[r.gen_range(0..2)], 0, 0)
        } else {
            ZoneSpec::workload(KERNELS[r.gen_range(0..2)], [16, 32][r.gen_range(0..2)], 1)
        };
        let id = d.create_zone_for(spec, warm, binding).map_err(err)?.id;
        if !warm && r.gen_bool(0.15) {
            to_quarantine.push(id);
        }
    }
    d.pump();
    for id in to_quarantine {
        d.quarantine_zone(id).map_err(err)?;
    }

    let first = shim.reconcile(&mut d).map_err(|e| e.to_string())?;
    ensure!(first.failed.is_empty(), "round 1 failures: {:?}", first.failed);
    d.pump();
    converged(&shim, &d)?;
    let before = d.mutations();
    let second = shim.reconcile(&mut d).map_err(|e| e.to_string())?;
    ensure!(second.is_empty(), "round 2 still acting: {second:?}");
    ensure!(
        d.mutations() == before,
        "round 2 issued {} mutations",
        d.mutations() - before
    );
    let third = shim.reconcile(&mut d).map_err(|e| e.to_string())?;
    ensure!(third.is_empty() && d.mutations() == before, "fixed point not stable");
    Ok((pods.len(), actual))
}

pub fn reconcile_convergence(seed: u64, pairs: u64) -> Check {
    let mut max_pods = 0;
    for i in 0..pairs {
        let (pods, _) = reconcile_pair(seed.wrapping_mul(1000) + i).map_err(|e| format!("pair {i}: {e}"))?;
        max_pods = max_pods.max(pods);
    }
    Ok(format!(
        "{pairs} random pairs (up to {max_pods} pods) converged in 1 round; fixed-point reconcile issued 0 mutations"
    ))
}

// ---------------------------------------------------------------- 8

pub fn no_bypass(seed: u64, packets: usize) -> Check {
    let mut r = rng(seed);
    let proxy = NetProxy::new();
    let zones: Vec<ZoneId> = (0..6u8).map(|i| ZoneId::from_bytes([i + 1; 16])).collect();
    let strangers: Vec<ZoneId> = (0..2u8).map(|i| ZoneId::from_bytes([0xF0 + i; 16])).collect();
    for z in &zones {
        proxy.register_zone(*z);
    }
    proxy.register_endpoint("10.0.0.1:443");
    proxy.register_endpoint("10.0.0.2:53");
    let mut quarantined: BTreeMap<ZoneId, (u64, u64)> = BTreeMap::new();
    let mut down = false;
    let mut outcomes: BTreeMap<String, u64> = BTreeMap::new();

    for seq in 0..packets as u64 {
        if r.gen_bool(0.02) {
            let z = *zones.choose(&mut r).unwrap();
            if quarantined.remove(&z).is_some() {
                proxy.set_quarantined(z, false);
            } else {
                proxy.set_quarantined(z, true);
                let c = proxy.snapshot_counters().per_zone.get(&z).copied().unwrap_or_default();
                quarantined.insert(z, (c.packets_delivered, c.bytes_delivered));
            }
        }
        if r.gen_bool(0.005) {
            down = !down;
            if down {
                proxy.crash();
            } else {
                proxy.restart();
            }
        }
        let src = if r.gen_bool(0.05) {
            *strangers.choose(&mut r).unwrap()
        } else {
            *zones.choose(&mut r).unwrap()
        };
        let dst = match r.gen_range(0..10) {
            0 => Destination::External("10.0.0.1:443".into()),
            1 => Destination::External("203.0.113.9:80".into()),
            2 => Destination::Zone(*strangers.choose(&mut r).unwrap()),
            _ => Destination::Zone(*zones.choose(&mut r).unwrap()),
        };
        let len = if r.gen_bool(0.02) {
            r.gen_range(MAX_PACKET_PAYLOAD + 1..=MAX_PACKET_PAYLOAD + 4096)
        } else {
            r.gen_range(0..1500)
        };
        let expected = if down {
            RouteOutcome::Dropped(DropReason::ProxyDown)
        } else if len > MAX_PACKET_PAYLOAD {
            RouteOutcome::Dropped(DropReason::Oversize)
        } else if strangers.contains(&src) {
            RouteOutcome::Dropped(DropReason::UnknownSource)
        } else if quarantined.contains_key(&src) {
            RouteOutcome::Dropped(DropReason::Quarantined)
        } else {
            match &dst {
                Destination::Zone(z) if zones.contains(z) => RouteOutcome::Delivered,
                Destination::External(a) if a == "10.0.0.1:443" => RouteOutcome::Delivered,
                _ => RouteOutcome::Dropped(DropReason::NoRoute),
            }
        };
        let got = proxy.route_packet(ZonePacket {
            src,
            dst,
            payload: vec![0xAB; len],
            seq,
        });
        ensure!(got == expected, "packet {seq}: {got:?}, expected {expected:?}");
        *outcomes.entry(format!("{got:?}")).or_default() += 1;

        let snap = proxy.snapshot_counters();
        ensure!(
            snap.total.balanced(),
            "packet {seq}: global counters unbalanced {:?}",
            snap.total
        );
        ensure!(
            snap.total.packets_seen == seq + 1,
            "packet {seq}: seen {}",
            snap.total.packets_seen
        );
        for (z, (pkts, bytes)) in &quarantined {
            let c = snap.per_zone.get(z).copied().unwrap_or_default();
            ensure!(
                (c.packets_delivered, c.bytes_delivered) == (*pkts, *bytes),
                "packet {seq}: quarantined zone {z} delivered counter moved"
            );
        }
    }
    let snap = proxy.snapshot_counters();
    let mut sum = edera_core::net::Counters::default();
    for (z, c) in &snap.per_zone {
        ensure!(c.balanced(), "zone {z} counters unbalanced {c:?}");
        sum.packets_seen += c.packets_seen;
        sum.packets_delivered += c.packets_delivered;
        sum.packets_dropped += c.packets_dropped;
        sum.bytes_seen += c.bytes_seen;
    }
    ensure!(
        sum.packets_seen == snap.total.packets_seen
            && sum.packets_delivered == snap.total.packets_delivered
            && sum.packets_dropped == snap.total.packets_dropped
            && sum.bytes_seen == snap.total.bytes_seen,
        "per-zone counters do not add up to the totals"
    );
    ensure!(
        packets < 10_000 || outcomes.len() == 6,
        "not every outcome exercised: {outcomes:?}"
    );
    Ok(format!(
        "{packets} packets: seen = delivered + dropped globally and for {} sources; quarantined delivered counters frozen ({} delivered)",
        snap.per_zone.len(),
        snap.total.packets_delivered
    ))
}

// ---------------------------------------------------------------- 9

#[derive(Debug, Clone)]
pub enum WipeOp {
    Bind {
        slice: u32,
        zone: usize,
    },
    Write {
        slice: u32,
        offset: u64,
        data: Vec<u8>,
    },
    Unbind {
        slice: u32,
    },
    /// Crash the driver and attach the device again.
    Reattach,
}

pub const WIPE_SLICES: u32 = 3;
pub const WIPE_CLIENTS: usize = 4;
pub const WIPE_SLICE_BYTES: usize = 4096;

pub fn random_wipe_ops(r: &mut ChaCha8Rng, n: usize) -> Vec<WipeOp> {
    (0..n)
        .map(|_| match r.gen_range(0..10) {
            0..=2 => WipeOp::Bind {
                slice: r.gen_range(0..WIPE_SLICES),
                zone: r.gen_range(0..WIPE_CLIENTS),
            },
            3..=6 => {
                let len = r.gen_range(1..=512);
                let mut data = vec![0u8; len];
                r.fill(&mut data[..]);
                for b in data.iter_mut() {
                    *b |= 1;
                }
                WipeOp::Write {
                    slice: r.gen_range(0..WIPE_SLICES),
                    offset: r.gen_range(0..(WIPE_SLICE_BYTES - len) as u64),
                    data,
                }
            }
            7..=8 => WipeOp::Unbind {
                slice: r.gen_range(0..WIPE_SLICES),
            },
            _ => WipeOp::Reattach,
        })
        .collect()
}

fn read_slice(d: &mut Daemon, zone: ZoneId, slice: u32) -> Result<Vec<u8>, String> {
    let reply = d
        .device_request(
            zone,
            "gpu0",
            slice,
            DeviceOp::Read {
                offset: 0,
                len: WIPE_SLICE_BYTES as u32,
            },
        )
        .map_err(|e| e.to_string())?;
    ensure!(reply.status == DeviceStatus::Ok, "read status {:?}", reply.status);
    Ok(reply.data)
}

/// Applies `ops` and checks every first read after a (re)bind or re-attach
/// is all zero. Returns how many first reads were checked.
pub fn run_wipe_ops(ops: &[WipeOp]) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut d = daemon(&dir, 4, 512);
    let err = |e: DaemonError| e.to_string();
    let driver = || ZoneSpec {
        role: ZoneRole::Driver,
        ..ZoneSpec::workload("driver", 16, 1)
    };
    d.attach_device("gpu0", AttachMode::Partitioned { slices: WIPE_SLICES }, driver())
        .map_err(err)?;
    let clients: Vec<ZoneId> = (0..WIPE_CLIENTS)
        .map(|_| d.create_zone(ZoneSpec::workload("k", 16, 1), false).map(|z| z.id))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    d.pump();

    let mut owner: BTreeMap<u32, ZoneId> = BTreeMap::new();
    let mut contents: BTreeMap<u32, Vec<u8>> = (0..WIPE_SLICES).map(|s| (s, vec![0u8; WIPE_SLICE_BYTES])).collect();
    let mut first_reads = 0;

    for (i, op) in ops.iter().enumerate() {
        match op {
            WipeOp::Bind { slice, zone } => {
                if owner.contains_key(slice) {
                    continue;
                }
                let client = clients[*zone];
                d.bind_slice("gpu0", *slice, client)
                    .map_err(|e| format!("op {i}: {e}"))?;
                owner.insert(*slice, client);
                let data = read_slice(&mut d, client, *slice).map_err(|e| format!("op {i}: {e}"))?;
                ensure!(
                    data.iter().all(|b| *b == 0),
                    "op {i}: new client of slice {slice} sees old data"
                );
                first_reads += 1;
            }
            WipeOp::Write { slice, offset, data } => {
                let Some(&client) = owner.get(slice) else { continue };
                let reply = d
                    .device_request(
                        client,
                        "gpu0",
                        *slice,
                        DeviceOp::Write {
                            offset: *offset,
                            data: data.clone(),
                        },
                    )
                    .map_err(|e| format!("op {i}: {e}"))?;
                ensure!(
                    reply.status == DeviceStatus::Ok,
                    "op {i}: write status {:?}",
                    reply.status
                );
                let c = contents.get_mut(slice).unwrap();
                c[*offset as usize..*offset as usize + data.len()].copy_from_slice(data);
                let back = read_slice(&mut d, client, *slice).map_err(|e| format!("op {i}: {e}"))?;
                ensure!(&back == c, "op {i}: slice {slice} lost its data");
            }
            WipeOp::Unbind { slice } => {
                if owner.remove(slice).is_none() {
                    continue;
                }
                d.unbind_slice("gpu0", *slice).map_err(|e| format!("op {i}: {e}"))?;
                contents.insert(*slice, vec![0u8; WIPE_SLICE_BYTES]);
            }
            WipeOp::Reattach => {
                d.inject_driver_fault("gpu0").map_err(err)?;
                let now = d.now();
                d.supervise(now);
                d.attach_device("gpu0", AttachMode::Partitioned { slices: WIPE_SLICES }, driver())
                    .map_err(|e| format!("op {i}: reattach: {e}"))?;
                for (slice, client) in &owner {
                    let data = read_slice(&mut d, *client, *slice).map_err(|e| format!("op {i}: {e}"))?;
                    ensure!(
                        data.iter().all(|b| *b == 0),
                        "op {i}: slice {slice} survived a driver re-attach"
                    );
                    first_reads += 1;
                }
                for c in contents.values_mut() {
                    c.fill(0);
                }
            }
        }
    }
    Ok(first_reads)
}

pub fn device_wipe(seed: u64, sequences: usize) -> Check {
    let mut r = rng(seed);
    let mut reads = 0;
    for s in 0..sequences {
        let n = r.gen_range(1..=60);
        let ops = random_wipe_ops(&mut r, n);
        reads += run_wipe_ops(&ops).map_err(|e| format!("sequence {s}: {e}"))?;
    }
    Ok(format!(
        "{sequences} random sequences; all {reads} first reads after bind or re-attach were zero"
    ))
}

// ---------------------------------------------------------------- 10

pub const WARM_RATIO_BOUND: f64 = 0.5;

pub fn warm_benefit(runs: usize) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = DaemonConfig::new(HostConfig::with_memory_mib(8, 16 * 1024), dir.path().join("bench.log"));
    cfg.sync = SyncMode::FlushOnly;
    let mut d = Daemon::open(cfg, NetProxy::new()).map_err(|e| e.to_string())?;
    let c = bench::compare_startup(&mut d, runs, BenchClock::Wall).map_err(|e| e.to_string())?;
    ensure!(c.cold.runs == runs && c.warm.runs == runs, "wrong run count");
    ensure!(
        c.cold.stderr_ms.is_finite() && c.warm.stderr_ms.is_finite(),
        "stderr missing"
    );
    let summary = format!(
        "K={runs} wall-clock: cold {:.3} +/- {:.3} ms, warm {:.3} +/- {:.3} ms (stderr), ratio {:.3}",
        c.cold.mean_ms,
        c.cold.stderr_ms,
        c.warm.mean_ms,
        c.warm.stderr_ms,
        c.ratio()
    );
    ensure!(
        c.ratio().total_cmp(&WARM_RATIO_BOUND).is_lt(),
        "{summary} is not below {WARM_RATIO_BOUND}"
    );
    Ok(summary)
}

// ---------------------------------------------------------------- 11

/// Record encoder written from the documented log layout.
pub fn reference_record(key: &str, value: &[u8]) -> Vec<u8> {
    let mut body = vec![0x01];
    body.extend_from_slice(&(key.len() as u16).to_be_bytes());
    body.extend_from_slice(key.as_bytes());
    body.extend_from_slice(&(value.len() as u32).to_be_bytes());
    body.extend_from_slice(value);
    let mut rec = (body.len() as u32).to_be_bytes().to_vec();
    rec.extend_from_slice(&crc32_bitwise(&body).to_be_bytes());
    rec.extend(body);
    rec
}

pub struct CommittedLog {
    pub bytes: Vec<u8>,
    /// (end offset, map after that record)
    pub commits: Vec<(usize, BTreeMap<String, Vec<u8>>)>,
}

pub fn committed_log(r: &mut ChaCha8Rng, records: usize) -> Result<CommittedLog, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("kv.log");
    let (mut store, _) = KvStore::open_with(&path, SyncMode::FlushOnly).map_err(|e| e.to_string())?;
    let mut map = BTreeMap::new();
    let mut expected_bytes = Vec::new();
    let mut commits = vec![(0, map.clone())];
    for _ in 0..records {
        let key = format!("zone/{}", r.gen_range(0..12));
        let mut value = vec![0u8; r.gen_range(0..200)];
        r.fill(&mut value[..]);
        store.put(&key, &value).map_err(|e| e.to_string())?;
        expected_bytes.extend(reference_record(&key, &value));
        map.insert(key, value);
        commits.push((expected_bytes.len(), map.clone()));
    }
    drop(store);
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure!(
        bytes == expected_bytes,
        "on-disk log differs from the documented record layout"
    );
    Ok(CommittedLog { bytes, commits })
}

pub fn check_crash_point(log: &CommittedLog, cut: usize) -> Result<(), String> {
    let (end, expected) = log.commits.iter().rev().find(|(end, _)| *end <= cut).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("kv.log");
    std::fs::write(&path, &log.bytes[..cut]).map_err(|e| e.to_string())?;
    let (store, rec) = KvStore::open(&path).map_err(|e| format!("cut {cut}: open failed: {e}"))?;
    ensure!(
        rec.valid_bytes as usize == *end && rec.discarded_bytes as usize == cut - end,
        "cut {cut}: recovery {rec:?}, committed prefix ends at {end}"
    );
    let keys = store.list("");
    ensure!(
        keys.len() == expected.len(),
        "cut {cut}: {} keys, expected {}",
        keys.len(),
        expected.len()
    );
    for (k, v) in expected {
        ensure!(
            store.get(k).map_err(|e| e.to_string())? == v.as_slice(),
            "cut {cut}: {k} differs"
        );
    }
    drop(store);
    ensure!(
        std::fs::metadata(&path).map_err(|e| e.to_string())?.len() as usize == *end,
        "cut {cut}: torn tail left on disk"
    );
    let (mut store, _) = KvStore::open(&path).map_err(|e| e.to_string())?;
    store.put("after/crash", b"ok").map_err(|e| e.to_string())?;
    drop(store);
    let (store, rec) = KvStore::open(&path).map_err(|e| e.to_string())?;
    ensure!(
        rec.discarded_bytes == 0 && store.get("after/crash").map_err(|e| e.to_string())? == b"ok",
        "cut {cut}: log not appendable after recovery"
    );
    Ok(())
}

pub fn store_durability(seed: u64, crash_points: usize) -> Check {
    let mut r = rng(seed);
    let log = committed_log(&mut r, 60)?;
    let boundaries: BTreeSet<usize> = log.commits.iter().map(|(e, _)| *e).collect();
    let mut torn = 0;
    for i in 0..crash_points {
        let cut = if i == 0 {
            log.bytes.len()
        } else {
            r.gen_range(0..=log.bytes.len())
        };
        torn += usize::from(!boundaries.contains(&cut));
        check_crash_point(&log, cut)?;
    }
    Ok(format!(
        "{crash_points} crash points ({torn} mid-record) recovered exactly the committed prefix; torn tails discarded"
    ))
}

// ---------------------------------------------------------------- 12

pub const PUBLISHED: [f64; 6] = [177.4, 203.8, 281.8, 765.8, 968.6, 1934.2];

pub fn reference_table() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut d = daemon(&dir, 4, 4096);
    let report = bench::bench_startup(&mut d, 5, false, BenchClock::Logical).map_err(|e| e.to_string())?;
    let values: Vec<f64> = report.reference().iter().map(|r| r.startup_ms).collect();
    ensure!(values == PUBLISHED, "embedded reference {values:?}");
    ensure!(
        PUBLISHED_STARTUP_MS.len() == 6,
        "reference table has {} rows",
        PUBLISHED_STARTUP_MS.len()
    );
    let text = report.to_string();
    let (_, table) = text
        .split_once(REFERENCE_LABEL)
        .ok_or("report does not label the reference table")?;
    ensure!(
        REFERENCE_LABEL.contains("published reference"),
        "label is {REFERENCE_LABEL:?}"
    );
    let printed: Vec<f64> = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split_whitespace().last()?.parse().ok())
        .collect();
    ensure!(printed == PUBLISHED, "printed reference values {printed:?}");
    let json = serde_json::to_string(&PUBLISHED_STARTUP_MS).map_err(|e| e.to_string())?;
    for v in ["177.4", "203.8", "281.8", "765.8", "968.6", "1934.2"] {
        ensure!(json.contains(v), "{v} missing from serialized table");
    }
    Ok(format!("report embeds exactly {values:?} under \"{REFERENCE_LABEL}\""))
}
