//! In-zone init agent.
//!
//! The agent is driven by an injected logical clock through [`InitAgent::tick`].
//! Each tick it drains inbound frames (pings, exec requests, device
//! requests), then sends in order: a heartbeat if one is due, queued
//! monitor events, and queued replies. A send that hits backpressure stops
//! the tick; whatever was not sent stays queued for the next tick.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use log::warn;
use thiserror::Error;

use crate::idm::tlv::MAX_VALUE;
use crate::idm::{ChannelEndpoint, ChannelError, Frame, MsgType};
use crate::msg::{
    DeviceReply, DeviceRequest, DeviceStatus, ExecOutput, ExecRequest, ExitEvent, Heartbeat, MonitorEvent, MonitorKind,
    OutputFd, Payload,
};
use crate::zone::ZoneId;

pub const DEFAULT_HEARTBEAT_INTERVAL_MS: u64 = 500;
pub const MIN_HEARTBEAT_INTERVAL_MS: u64 = 10;
/// Largest output chunk one ExecOutput frame carries.
pub const MAX_OUTPUT_CHUNK: usize = MAX_VALUE;
pub const EXIT_COMMAND_NOT_FOUND: i32 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub zone_id: ZoneId,
    pub heartbeat_interval_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("heartbeat interval must be at least {MIN_HEARTBEAT_INTERVAL_MS} ms")]
pub struct BadInterval;

impl AgentConfig {
    pub fn new(zone_id: ZoneId) -> Self {
        AgentConfig {
            zone_id,
            heartbeat_interval_ms: DEFAULT_HEARTBEAT_INTERVAL_MS,
        }
    }

    pub fn validate(&self) -> Result<(), BadInterval> {
        if self.heartbeat_interval_ms < MIN_HEARTBEAT_INTERVAL_MS {
            return Err(BadInterval);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessOutput {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub code: i32,
}

impl ProcessOutput {
    pub fn exit(code: i32) -> Self {
        ProcessOutput {
            code,
            ..Default::default()
        }
    }
}

pub type CommandFn = Arc<dyn Fn(&[String], &[u8]) -> ProcessOutput + Send + Sync>;

/// The zone's simulated process table: command name to behavior.
#[derive(Clone)]
pub struct CommandTable {
    commands: HashMap<String, CommandFn>,
}

impl fmt::Debug for CommandTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.commands.keys().collect();
        names.sort();
        f.debug_struct("CommandTable").field("commands", &names).finish()
    }
}

impl Default for CommandTable {
    fn default() -> Self {
        let mut table = CommandTable {
            commands: HashMap::new(),
        };
        table.register("echo", |args, _| ProcessOutput {
            stdout: format!("{}\n", args.join(" ")).into_bytes(),
            ..Default::default()
        });
        table.register("true", |_, _| ProcessOutput::exit(0));
        table.register("false", |_, _| ProcessOutput::exit(1));
        table.register("sleep", |_, _| ProcessOutput::exit(0));
        table.register("cat", |_, stdin| ProcessOutput {
            stdout: stdin.to_vec(),
            ..Default::default()
        });
        table.register("crash", |_, _| ProcessOutput {
            stderr: b"segmentation fault\n".to_vec(),
            code: 139,
            ..Default::default()
        });
        table
    }
}

impl CommandTable {
    pub fn empty() -> Self {
        CommandTable {
            commands: HashMap::new(),
        }
    }

    /// Registers `name`; the closure receives the arguments after argv[0].
    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&[String], &[u8]) -> ProcessOutput + Send + Sync + 'static,
    {
        self.commands.insert(name.to_string(), Arc::new(f));
    }

    pub fn run(&self, argv: &[String], stdin: &[u8]) -> ProcessOutput {
        let Some((name, args)) = argv.split_first() else {
            return ProcessOutput::exit(EXIT_COMMAND_NOT_FOUND);
        };
        match self.commands.get(name) {
            Some(cmd) => cmd(args, stdin),
            None => ProcessOutput {
                stderr: format!("{name}: command not found\n").into_bytes(),
                code: EXIT_COMMAND_NOT_FOUND,
                ..Default::default()
            },
        }
    }
}

/// Handles device requests inside a driver zone.
pub trait DeviceBackend: Send + Sync + fmt::Debug {
    fn handle(&self, request: &DeviceRequest) -> DeviceReply;
}

/// Turns a command invocation into its ExecOutput frames and the terminal
/// ExitEvent, all tagged with `stream_id`.
pub fn exec_frames(commands: &CommandTable, stream_id: u32, argv: &[String], stdin: &[u8]) -> Vec<Frame> {
    let out = commands.run(argv, stdin);
    let mut frames = Vec::new();
    for (fd, data) in [(OutputFd::Stdout, &out.stdout), (OutputFd::Stderr, &out.stderr)] {
        for chunk in data.chunks(MAX_OUTPUT_CHUNK) {
            let msg = ExecOutput {
                fd,
                data: chunk.to_vec(),
            };
            frames.push(msg.to_frame(stream_id).expect("chunk fits a tlv field"));
        }
    }
    frames.push(ExitEvent { code: out.code }.to_frame(stream_id).expect("fixed size"));
    frames
}

#[derive(Debug)]
pub struct InitAgent {
    config: AgentConfig,
    endpoint: ChannelEndpoint,
    enabled: bool,
    boot_at: u64,
    last_emit: Option<u64>,
    heartbeat_due: bool,
    seq: u64,
    events: VecDeque<MonitorEvent>,
    outbox: VecDeque<Frame>,
    commands: CommandTable,
    device: Option<Arc<dyn DeviceBackend>>,
}

impl InitAgent {
    /// Starts an agent whose guest finishes booting at logical time `boot_at`.
    pub fn new(config: AgentConfig, endpoint: ChannelEndpoint, boot_at: u64) -> Result<Self, BadInterval> {
        config.validate()?;
        Ok(InitAgent {
            config,
            endpoint,
            enabled: true,
            boot_at,
            last_emit: None,
            heartbeat_due: false,
            seq: 0,
            events: VecDeque::new(),
            outbox: VecDeque::new(),
            commands: CommandTable::default(),
            device: None,
        })
    }

    pub fn with_commands(mut self, commands: CommandTable) -> Self {
        self.commands = commands;
        self
    }

    pub fn set_device_backend(&mut self, backend: Arc<dyn DeviceBackend>) {
        self.device = Some(backend);
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn commands_mut(&mut self) -> &mut CommandTable {
        &mut self.commands
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn last_emit(&self) -> Option<u64> {
        self.last_emit
    }

    /// Queues a monitored event for delivery on a later tick.
    pub fn observe(&mut self, event: MonitorEvent) {
        if self.enabled {
            self.events.push_back(event);
        }
    }

    /// Stops the agent for good. A second call does nothing.
    pub fn disable(&mut self) {
        self.enabled = false;
    }

    /// Frames for one exec request; see [`exec_frames`].
    pub fn exec(&self, stream_id: u32, argv: &[String], stdin: &[u8]) -> Vec<Frame> {
        exec_frames(&self.commands, stream_id, argv, stdin)
    }

    /// Advances the agent to `now` and returns the frames it managed to send.
    pub fn tick(&mut self, now: u64) -> Result<Vec<Frame>, ChannelError> {
        if !self.enabled || now < self.boot_at {
            return Ok(Vec::new());
        }
        while let Some(inbound) = self.endpoint.recv()? {
            match inbound {
                Ok(frame) => self.handle(frame, now),
                Err(e) => warn!("zone {}: dropping undecodable frame: {e}", self.config.zone_id),
            }
        }
        let interval_elapsed = self
            .last_emit
            .is_none_or(|last| now >= last.saturating_add(self.config.heartbeat_interval_ms));
        if interval_elapsed {
            self.heartbeat_due = true;
        }

        let mut sent = Vec::new();
        if self.heartbeat_due {
            let hb = Heartbeat {
                zone_id: Some(self.config.zone_id),
                seq: Some(self.seq),
            }
            .to_frame(0)
            .expect("fixed size");
            if !self.try_send(&hb, &mut sent)? {
                return Ok(sent);
            }
            self.heartbeat_due = false;
            self.last_emit = Some(now);
            self.seq += 1;
        }
        while let Some(event) = self.events.front() {
            let frame = event.to_frame(0).expect("detail is capped");
            if !self.try_send(&frame, &mut sent)? {
                return Ok(sent);
            }
            self.events.pop_front();
        }
        while let Some(frame) = self.outbox.front() {
            let frame = frame.clone();
            if !self.try_send(&frame, &mut sent)? {
                return Ok(sent);
            }
            self.outbox.pop_front();
        }
        Ok(sent)
    }

    /// `Ok(false)` on backpressure.
    fn try_send(&self, frame: &Frame, sent: &mut Vec<Frame>) -> Result<bool, ChannelError> {
        match self.endpoint.send(frame) {
            Ok(()) => {
                sent.push(frame.clone());
                Ok(true)
            }
            Err(ChannelError::Backpressure) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn handle(&mut self, frame: Frame, now: u64) {
        match frame.msg_type {
            MsgType::Heartbeat => self.heartbeat_due = true,
            MsgType::ExecRequest => match ExecRequest::decode(&frame.payload) {
                Ok(req) => {
                    let name = req.argv.first().cloned().unwrap_or_default();
                    self.events
                        .push_back(MonitorEvent::new(MonitorKind::ProcessStart, name.clone(), now));
                    let frames = self.exec(frame.stream_id, &req.argv, &req.stdin);
                    let code = frames
                        .last()
                        .and_then(|f| ExitEvent::from_frame(f).ok())
                        .map_or(0, |e| e.code);
                    self.outbox.extend(frames);
                    self.events.push_back(MonitorEvent::new(
                        MonitorKind::ProcessExit,
                        format!("{name} exited {code}"),
                        now,
                    ));
                }
                Err(e) => warn!("zone {}: bad exec request: {e}", self.config.zone_id),
            },
            MsgType::DeviceRequest => {
                let reply = match (DeviceRequest::decode(&frame.payload), &self.device) {
                    (Ok(req), Some(dev)) => dev.handle(&req),
                    _ => DeviceReply {
                        status: DeviceStatus::NoSuchSlice,
                        data: Vec::new(),
                    },
                };
                match reply.to_frame(frame.stream_id) {
                    Ok(f) => self.outbox.push_back(f),
                    Err(e) => warn!("zone {}: device reply too large: {e}", self.config.zone_id),
                }
            }
            other => warn!("zone {}: ignoring inbound {other:?}", self.config.zone_id),
        }
    }
}
