//! Simulated zone orchestration: a hypervisor model, the IDM control
//! channel, in-zone init agents, the zone daemon and the services around it.

pub mod agent;
pub mod bench;
pub mod cri;
pub mod daemon;
pub mod devices;
pub mod hv;
pub mod idm;
pub mod msg;
pub mod net;
pub mod node;
pub mod orchestrator;
pub mod rpc;
pub mod scenario;
pub mod store;
pub mod zone;
