//! Host-based intrusion detection: a per-host agent that reassembles
//! socket streams and matches them against web-client and web-server
//! rules, a UDP event collector with a quarantine table, and a small
//! signature distribution protocol.
//!
//! The `hostguard` binary wraps all of it; see [`cli`].

pub mod rules;
pub mod reassembly;
pub mod detection;
pub mod escape;
pub mod wire;
pub mod sampler;
pub mod agent;
pub mod collector;
pub mod sigupdate;
pub mod cli;
