//! Socket-event traces: the recorded view of what an application-aware
//! interceptor on the host saw, one event per line.
//!
//! ```text
//! HGTRC1
//! OPEN <conn_id> <ts_ms> tcp <local_ip:port> <remote_ip:port> <outbound|inbound> <app_name> <app_version>
//! DATA <conn_id> <ts_ms> <in|out> <offset|-> <hex_payload>
//! CLOSE <conn_id> <ts_ms>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::Path;

use thiserror::Error;

use crate::detection::DataDirection;
use crate::rules::ConnDirection;
use crate::wire::MAX_ID_LEN;

pub const TRACE_MAGIC: &str = "HGTRC1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Open {
        conn_id: String,
        ts: u64,
        local: SocketAddr,
        remote: SocketAddr,
        direction: ConnDirection,
        app_name: String,
        app_version: String,
    },
    Data {
        conn_id: String,
        ts: u64,
        direction: DataDirection,
        /// `None` appends after the highest byte seen so far in that direction.
        offset: Option<u64>,
        payload: Vec<u8>,
    },
    Close {
        conn_id: String,
        ts: u64,
    },
}

impl TraceEvent {
    pub fn conn_id(&self) -> &str {
        match self {
            TraceEvent::Open { conn_id, .. }
            | TraceEvent::Data { conn_id, .. }
            | TraceEvent::Close { conn_id, .. } => conn_id,
        }
    }

    pub fn ts(&self) -> u64 {
        match self {
            TraceEvent::Open { ts, .. } | TraceEvent::Data { ts, .. } | TraceEvent::Close { ts, .. } => *ts,
        }
    }

    /// The event as one trace line, without newline.
    pub fn to_line(&self) -> String {
        match self {
            TraceEvent::Open {
                conn_id,
                ts,
                local,
                remote,
                direction,
                app_name,
                app_version,
            } => format!(
                "OPEN {conn_id} {ts} tcp {local} {remote} {} {app_name} {app_version}",
                direction.as_str()
            ),
            TraceEvent::Data {
                conn_id,
                ts,
                direction,
                offset,
                payload,
            } => {
                let mut s = format!("DATA {conn_id} {ts} {} ", direction.as_str());
                match offset {
                    Some(o) => {
                        let _ = write!(s, "{o}");
                    }
                    None => s.push('-'),
                }
                s.push(' ');
                s.push_str(&hex::encode(payload));
                s
            }
            TraceEvent::Close { conn_id, ts } => format!("CLOSE {conn_id} {ts}"),
        }
    }
}

/// Renders a complete trace file.
pub fn render_trace(events: &[TraceEvent]) -> String {
    let mut out = String::from(TRACE_MAGIC);
    out.push('\n');
    for ev in events {
        out.push_str(&ev.to_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing {TRACE_MAGIC} magic line")]
    BadMagic,
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

fn line_err(line: usize, reason: impl Into<String>) -> TraceError {
    TraceError::Line {
        line,
        reason: reason.into(),
    }
}

fn parse_event(lineno: usize, line: &str) -> Result<TraceEvent, TraceError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let field = |i: usize, what: &str| -> Result<&str, TraceError> {
        fields
            .get(i)
            .copied()
            .ok_or_else(|| line_err(lineno, format!("missing {what}")))
    };
    let expect_len = |n: usize| -> Result<(), TraceError> {
        if fields.len() != n {
            Err(line_err(lineno, format!("expected {n} fields, found {}", fields.len())))
        } else {
            Ok(())
        }
    };
    let conn_id = field(1, "connection id")?;
    if conn_id.len() > MAX_ID_LEN {
        return Err(line_err(lineno, format!("connection id longer than {MAX_ID_LEN} bytes")));
    }
    let ts: u64 = field(2, "timestamp")?
        .parse()
        .map_err(|_| line_err(lineno, "timestamp is not a non-negative integer"))?;
    let conn_id = conn_id.to_string();
    match fields[0] {
        "OPEN" => {
            expect_len(9)?;
            if fields[3] != "tcp" {
                return Err(line_err(lineno, format!("unsupported protocol `{}`", fields[3])));
            }
            let addr = |i: usize| -> Result<SocketAddr, TraceError> {
                fields[i]
                    .parse()
                    .map_err(|_| line_err(lineno, format!("bad address `{}`", fields[i])))
            };
            let direction = fields[6]
                .parse()
                .map_err(|_| line_err(lineno, format!("bad connection direction `{}`", fields[6])))?;
            Ok(TraceEvent::Open {
                conn_id,
                ts,
                local: addr(4)?,
                remote: addr(5)?,
                direction,
                app_name: fields[7].to_string(),
                app_version: fields[8].to_string(),
            })
        }
        "DATA" => {
            expect_len(6)?;
            let direction = fields[3]
                .parse()
                .map_err(|_| line_err(lineno, format!("bad data direction `{}`", fields[3])))?;
            let offset: Option<u64> = match fields[4] {
                "-" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| line_err(lineno, format!("bad offset `{s}`")))?,
                ),
            };
            let payload = hex::decode(fields[5]).map_err(|_| line_err(lineno, "payload is not hex"))?;
            if payload.is_empty() {
                return Err(line_err(lineno, "empty payload"));
            }
            if let Some(o) = offset {
                if o.checked_add(payload.len() as u64).is_none() {
                    return Err(line_err(lineno, "offset overflows"));
                }
            }
            Ok(TraceEvent::Data {
                conn_id,
                ts,
                direction,
                offset,
                payload,
            })
        }
        "CLOSE" => {
            expect_len(3)?;
            Ok(TraceEvent::Close { conn_id, ts })
        }
        other => Err(line_err(lineno, format!("unknown event `{other}`"))),
    }
}

/// Parses and validates trace text.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim_end() == TRACE_MAGIC => {}
        _ => return Err(TraceError::BadMagic),
    }
    let mut events = Vec::new();
    let mut open: HashSet<String> = HashSet::new();
    let mut last_ts = 0u64;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ev = parse_event(lineno, line)?;
        if ev.ts() < last_ts {
            return Err(line_err(
                lineno,
                format!("timestamp {} goes backwards (previous {last_ts})", ev.ts()),
            ));
        }
        last_ts = ev.ts();
        match &ev {
            TraceEvent::Open { conn_id, .. } => {
                if !open.insert(conn_id.clone()) {
                    return Err(line_err(lineno, format!("connection `{conn_id}` is already open")));
                }
            }
            TraceEvent::Data { conn_id, .. } => {
                if !open.contains(conn_id) {
                    return Err(line_err(lineno, format!("DATA for unknown connection `{conn_id}`")));
                }
            }
            TraceEvent::Close { conn_id, .. } => {
                if !open.remove(conn_id) {
                    return Err(line_err(lineno, format!("CLOSE for unknown connection `{conn_id}`")));
                }
            }
        }
        events.push(ev);
    }
    Ok(events)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    parse_trace(&std::fs::read_to_string(path)?)
}
