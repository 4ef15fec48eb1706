//! Host-side agent: replays a socket-event trace through the detection
//! engine, journals every event datagram and ships it to the collector.

mod config;
mod trace;

pub use config::{AgentConfig, ConfigError};
pub use trace::{load_trace, parse_trace, render_trace, TraceError, TraceEvent, TRACE_MAGIC};

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::detection::{
    ConnectionContext, ConnectionTable, DataDirection, DetectionError, DetectionEvent, EventKind,
};
use crate::reassembly::{ReassemblyError, Segment};
use crate::rules::{Action, CompiledMatcher, RuleSet};
use crate::sampler::{Sampler, SamplerConfigError};
use crate::wire::{encode_event, EventRecord};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("writing journal: {0}")]
    Journal(io::Error),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerConfigError),
    #[error("opening UDP socket: {0}")]
    Socket(io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("ruleset version {offered} is not newer than the active version {current}")]
pub struct StaleUpdate {
    pub current: u64,
    pub offered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapReport {
    pub old_version: u64,
    pub new_version: u64,
    pub rule_delta_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentStats {
    pub connections: u64,
    /// Payload bytes seen in DATA events.
    pub bytes: u64,
    pub events: u64,
    pub by_kind: BTreeMap<&'static str, u64>,
    pub datagrams_sent: u64,
    pub send_failures: u64,
    pub drops_latched: u64,
    pub suppressed_segments: u64,
    /// Gaps forced because a reassembly buffer hit its cap.
    pub overflow_gaps: u64,
    /// Segments that could not be buffered even after a forced gap.
    pub discarded_segments: u64,
    pub sampler_intervals: u64,
    pub sampler_interval_ms: u64,
    pub ruleset_version: u64,
}

impl AgentStats {
    pub fn kind_count(&self, kind: EventKind) -> u64 {
        self.by_kind.get(kind.code()).copied().unwrap_or(0)
    }
}

/// Where encoded datagrams go besides the caller.
#[derive(Default)]
pub struct Outputs {
    pub journal: Option<Box<dyn Write>>,
    /// Socket plus collector address.
    pub udp: Option<(UdpSocket, SocketAddr)>,
}

impl Outputs {
    pub fn journal_file(path: &Path) -> io::Result<Box<dyn Write>> {
        Ok(Box::new(BufWriter::new(File::create(path)?)))
    }

    pub fn udp_to(collector: SocketAddr) -> io::Result<(UdpSocket, SocketAddr)> {
        let bind: SocketAddr = if collector.is_ipv4() {
            "0.0.0.0:0".parse().expect("literal")
        } else {
            "[::]:0".parse().expect("literal")
        };
        Ok((UdpSocket::bind(bind)?, collector))
    }
}

/// Bytes-per-interval accounting over trace time.
#[derive(Debug)]
struct TrafficClock {
    sampler: Sampler,
    start: Option<u64>,
    acc: u64,
}

impl TrafficClock {
    /// Closes every interval that ended at or before `ts`.
    fn advance(&mut self, ts: u64, stats: &mut AgentStats) {
        let mut start = *self.start.get_or_insert(ts);
        while ts >= start + self.sampler.interval_ms() {
            start += self.sampler.interval_ms();
            self.sampler.update_interval(self.acc as f64);
            self.acc = 0;
            stats.sampler_intervals += 1;
        }
        self.start = Some(start);
        stats.sampler_interval_ms = self.sampler.interval_ms();
    }
}

pub struct Agent {
    cfg: AgentConfig,
    ruleset: RuleSet,
    matcher: Arc<CompiledMatcher>,
    table: ConnectionTable,
    /// Next in-order offset per connection and data direction.
    cursors: HashMap<(String, DataDirection), u64>,
    seq: u64,
    clock: TrafficClock,
    outputs: Outputs,
    stats: AgentStats,
    opened: Vec<(String, u64)>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("host_id", &self.cfg.host_id)
            .field("ruleset_version", &self.ruleset.version)
            .field("seq", &self.seq)
            .finish_non_exhaustive()
    }
}

impl Agent {
    pub fn new(cfg: AgentConfig, ruleset: RuleSet, outputs: Outputs) -> Result<Self, AgentError> {
        let sampler = Sampler::new(cfg.sampler.clone())?;
        let matcher = Arc::new(CompiledMatcher::compile(&ruleset, &cfg.home_nets));
        let stats = AgentStats {
            ruleset_version: ruleset.version,
            sampler_interval_ms: sampler.interval_ms(),
            ..AgentStats::default()
        };
        Ok(Agent {
            table: ConnectionTable::new(cfg.engine_options()),
            cfg,
            ruleset,
            matcher,
            cursors: HashMap::new(),
            seq: 0,
            clock: TrafficClock {
                sampler,
                start: None,
                acc: 0,
            },
            outputs,
            stats,
            opened: Vec::new(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn ruleset(&self) -> &RuleSet {
        &self.ruleset
    }

    pub fn matcher(&self) -> &Arc<CompiledMatcher> {
        &self.matcher
    }

    pub fn stats(&self) -> &AgentStats {
        &self.stats
    }

    pub fn sampler(&self) -> &Sampler {
        &self.clock.sampler
    }

    /// Ruleset version each connection was opened with, in open order.
    pub fn connection_versions(&self) -> &[(String, u64)] {
        &self.opened
    }

    /// Swaps in a newer ruleset. Open connections keep the matcher they
    /// started with.
    pub fn apply_ruleset_update(&mut self, new: RuleSet) -> Result<SwapReport, StaleUpdate> {
        if new.version <= self.ruleset.version {
            return Err(StaleUpdate {
                current: self.ruleset.version,
                offered: new.version,
            });
        }
        let report = SwapReport {
            old_version: self.ruleset.version,
            new_version: new.version,
            rule_delta_count: self.ruleset.delta_count(&new),
        };
        self.matcher = Arc::new(CompiledMatcher::compile(&new, &self.cfg.home_nets));
        self.ruleset = new;
        self.stats.ruleset_version = report.new_version;
        log::info!(
            "ruleset v{} -> v{} ({} rules changed)",
            report.old_version,
            report.new_version,
            report.rule_delta_count
        );
        Ok(report)
    }

    /// Processes one trace event and returns the records it produced.
    pub fn step(&mut self, ev: &TraceEvent) -> Result<Vec<EventRecord>, AgentError> {
        self.clock.advance(ev.ts(), &mut self.stats);
        let events = match ev {
            TraceEvent::Open {
                conn_id,
                ts,
                local,
                remote,
                direction,
                app_name,
                app_version,
            } => {
                let ctx = ConnectionContext::new(
                    conn_id.clone(),
                    *ts,
                    *local,
                    *remote,
                    *direction,
                    app_name.clone(),
                    app_version.clone(),
                );
                self.table.open_connection(ctx, Arc::clone(&self.matcher))?;
                self.stats.connections += 1;
                self.opened.push((conn_id.clone(), self.matcher.version()));
                Vec::new()
            }
            TraceEvent::Data {
                conn_id,
                ts,
                direction,
                offset,
                payload,
            } => {
                self.stats.bytes += payload.len() as u64;
                self.clock.acc += payload.len() as u64;
                let cursor = self.cursors.entry((conn_id.clone(), *direction)).or_insert(0);
                let start = offset.unwrap_or(*cursor);
                *cursor = (*cursor).max(start.saturating_add(payload.len() as u64));
                self.data(conn_id, *ts, *direction, Segment::new(start, payload.clone()))?
            }
            TraceEvent::Close { conn_id, ts } => {
                let (events, _, suppressed) = self.table.close_connection(conn_id, *ts)?;
                self.stats.suppressed_segments += suppressed;
                self.cursors.remove(&(conn_id.clone(), DataDirection::In));
                self.cursors.remove(&(conn_id.clone(), DataDirection::Out));
                events
            }
        };
        self.emit_all(events)
    }

    fn data(&mut self, conn_id: &str, ts: u64, dir: DataDirection, seg: Segment) -> Result<Vec<DetectionEvent>, AgentError> {
        let was_blocked = self.table.get(conn_id).is_some_and(|c| c.is_blocked());
        let events = match self.table.on_data(conn_id, ts, dir, seg.clone()) {
            Err(DetectionError::Reassembly {
                source: ReassemblyError::Overflow { .. },
                ..
            }) => {
                self.stats.overflow_gaps += 1;
                let mut evs = self.table.force_gap(conn_id, ts, dir)?;
                match self.table.on_data(conn_id, ts, dir, seg) {
                    Ok(more) => evs.extend(more),
                    Err(DetectionError::Reassembly { .. }) => self.stats.discarded_segments += 1,
                    Err(e) => return Err(e.into()),
                }
                evs
            }
            Err(DetectionError::Reassembly { .. }) => {
                self.stats.discarded_segments += 1;
                Vec::new()
            }
            other => other?,
        };
        if !was_blocked && self.table.get(conn_id).is_some_and(|c| c.is_blocked()) {
            self.stats.drops_latched += 1;
        }
        Ok(events)
    }

    fn emit_all(&mut self, events: Vec<DetectionEvent>) -> Result<Vec<EventRecord>, AgentError> {
        let mut out = Vec::with_capacity(events.len());
        for ev in events {
            self.seq += 1;
            let rec = EventRecord::new(self.seq, ev);
            let datagram = encode_event(&rec);
            if let Some(j) = self.outputs.journal.as_mut() {
                j.write_all(&datagram).map_err(AgentError::Journal)?;
            }
            if let Some((sock, addr)) = &self.outputs.udp {
                match sock.send_to(&datagram, addr) {
                    Ok(_) => self.stats.datagrams_sent += 1,
                    Err(e) => {
                        log::warn!("event seq={} not sent: {e}", rec.seq);
                        self.stats.send_failures += 1;
                    }
                }
            }
            self.stats.events += 1;
            *self.stats.by_kind.entry(rec.event.kind.code()).or_insert(0) += 1;
            if rec.event.action == Action::Drop {
                log::debug!("conn {} latched to drop by sid {}", rec.event.conn_id, rec.event.sid);
            }
            out.push(rec);
        }
        Ok(out)
    }

    /// Closes connections the trace left open, in id order, at `ts`.
    pub fn finish(&mut self, ts: u64) -> Result<Vec<EventRecord>, AgentError> {
        let mut ids: Vec<String> = self.opened.iter().map(|(id, _)| id.clone()).collect();
        ids.sort();
        ids.dedup();
        let mut out = Vec::new();
        for id in ids {
            if self.table.get(&id).is_some() {
                out.extend(self.step(&TraceEvent::Close { conn_id: id, ts })?);
            }
        }
        if let Some(j) = self.outputs.journal.as_mut() {
            j.flush().map_err(AgentError::Journal)?;
        }
        Ok(out)
    }
}

/// Options of one replay run.
#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    pub journal: Option<std::path::PathBuf>,
    /// Send datagrams to the configured collector.
    pub send: bool,
}

/// Result of [`run_replay`].
#[derive(Debug)]
pub struct Replay {
    pub stats: AgentStats,
    pub records: Vec<EventRecord>,
}

/// Feeds a whole trace through a fresh agent.
pub fn run_replay(trace: &[TraceEvent], ruleset: RuleSet, cfg: AgentConfig, opts: &ReplayOptions) -> Result<Replay, AgentError> {
    let mut agent = replay_agent(ruleset, cfg, opts)?;
    replay_into(&mut agent, trace)
}

/// Builds an agent with the outputs `opts` asks for.
pub fn replay_agent(ruleset: RuleSet, cfg: AgentConfig, opts: &ReplayOptions) -> Result<Agent, AgentError> {
    let mut outputs = Outputs::default();
    if let Some(path) = &opts.journal {
        outputs.journal = Some(Outputs::journal_file(path).map_err(AgentError::Journal)?);
    }
    if opts.send {
        outputs.udp = Some(Outputs::udp_to(cfg.collector_addr).map_err(AgentError::Socket)?);
    }
    Agent::new(cfg, ruleset, outputs)
}

/// Feeds `trace` through `agent`, closing whatever is left open at the end.
pub fn replay_into(agent: &mut Agent, trace: &[TraceEvent]) -> Result<Replay, AgentError> {
    let mut records = Vec::new();
    for ev in trace {
        records.extend(agent.step(ev)?);
    }
    let end = trace.last().map_or(0, TraceEvent::ts);
    records.extend(agent.finish(end)?);
    Ok(Replay {
        stats: agent.stats().clone(),
        records,
    })
}
