//! Central event collector: persists event datagrams from agents and keeps
//! the quarantine table of inside applications seen attacking.
//!
//! A store directory holds `events.log`, one record per line (escaped
//! values in wire key order plus the truncation flag, joined by `|`), and
//! `quarantine.tsv`, rewritten atomically on every change.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use thiserror::Error;

use crate::detection::EventKind;
use crate::escape::{self, TABLE};
use crate::wire::{decode_event, record_fields, record_from_fields, EventRecord, MAX_DATAGRAM};

pub const EVENTS_FILE: &str = "events.log";
pub const QUARANTINE_FILE: &str = "quarantine.tsv";
const QUARANTINE_HEADER: &str = "#host\tapp\tappver\tfirst_seen\tlast_seen\tcount\tsids";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{file} line {line}: {reason}")]
    Corrupt {
        file: &'static str,
        line: usize,
        reason: String,
    },
    #[error("no events from host `{0}`")]
    UnknownHost(String),
    #[error("bad filter: {0}")]
    BadFilter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuarantineKey {
    pub host_id: String,
    pub app_name: String,
    pub app_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuarantineRecord {
    pub key: QuarantineKey,
    pub first_seen: u64,
    pub last_seen: u64,
    pub count: u64,
    pub sids: BTreeSet<u32>,
}

impl QuarantineRecord {
    fn to_row(&self) -> String {
        let sids: Vec<String> = self.sids.iter().map(u32::to_string).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            escape::escape(&self.key.host_id, TABLE),
            escape::escape(&self.key.app_name, TABLE),
            escape::escape(&self.key.app_version, TABLE),
            self.first_seen,
            self.last_seen,
            self.count,
            sids.join(",")
        )
    }

    fn from_row(row: &str) -> Option<QuarantineRecord> {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 7 {
            return None;
        }
        let sids = if cols[6].is_empty() {
            BTreeSet::new()
        } else {
            cols[6].split(',').map(|s| s.parse().ok()).collect::<Option<_>>()?
        };
        Some(QuarantineRecord {
            key: QuarantineKey {
                host_id: escape::unescape(cols[0], TABLE)?,
                app_name: escape::unescape(cols[1], TABLE)?,
                app_version: escape::unescape(cols[2], TABLE)?,
            },
            first_seen: cols[3].parse().ok()?,
            last_seen: cols[4].parse().ok()?,
            count: cols[5].parse().ok()?,
            sids,
        })
    }

    fn absorb(&mut self, rec: &EventRecord) {
        self.first_seen = self.first_seen.min(rec.event.ts);
        self.last_seen = self.last_seen.max(rec.event.ts);
        self.count += 1;
        self.sids.insert(rec.event.sid);
    }
}

fn quarantine_key(rec: &EventRecord) -> QuarantineKey {
    QuarantineKey {
        host_id: rec.event.host_id.clone(),
        app_name: rec.event.app_name.clone(),
        app_version: rec.event.app_version.clone(),
    }
}

type QuarantineTable = BTreeMap<QuarantineKey, QuarantineRecord>;

fn upsert(table: &mut QuarantineTable, rec: &EventRecord) {
    table
        .entry(quarantine_key(rec))
        .and_modify(|q| q.absorb(rec))
        .or_insert_with(|| QuarantineRecord {
            key: quarantine_key(rec),
            first_seen: rec.event.ts,
            last_seen: rec.event.ts,
            count: 1,
            sids: BTreeSet::from([rec.event.sid]),
        });
}

fn render_quarantine(table: &QuarantineTable) -> String {
    let mut out = String::from(QUARANTINE_HEADER);
    out.push('\n');
    for q in table.values() {
        out.push_str(&q.to_row());
        out.push('\n');
    }
    out
}

pub fn event_line(rec: &EventRecord) -> String {
    record_fields(rec).join("|")
}

pub fn parse_event_line(line: &str) -> Option<EventRecord> {
    let fields: Vec<&str> = line.split('|').collect();
    record_from_fields(&fields).ok()
}

fn read_events(path: &Path) -> Result<Vec<EventRecord>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            parse_event_line(line).ok_or_else(|| StoreError::Corrupt {
                file: EVENTS_FILE,
                line: i + 1,
                reason: "unparseable event record".into(),
            })
        })
        .collect()
}

fn read_quarantine(path: &Path) -> Result<Option<QuarantineTable>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut table = QuarantineTable::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let q = QuarantineRecord::from_row(line).ok_or_else(|| StoreError::Corrupt {
            file: QUARANTINE_FILE,
            line: i + 1,
            reason: "unparseable quarantine row".into(),
        })?;
        table.insert(q.key.clone(), q);
    }
    Ok(Some(table))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Stored,
    Duplicate,
    Rejected(&'static str),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventFilter {
    pub kind: Option<EventKind>,
    pub host: Option<String>,
    pub sid: Option<u32>,
    pub since: Option<u64>,
    pub until: Option<u64>,
    pub quarantined_only: bool,
}

impl EventFilter {
    pub fn validate(&self) -> Result<(), StoreError> {
        if let (Some(s), Some(u)) = (self.since, self.until) {
            if s > u {
                return Err(StoreError::BadFilter(format!("since {s} is after until {u}")));
            }
        }
        Ok(())
    }

    pub fn matches(&self, rec: &EventRecord) -> bool {
        let ev = &rec.event;
        self.kind.is_none_or(|k| ev.kind == k)
            && self.host.as_ref().is_none_or(|h| &ev.host_id == h)
            && self.sid.is_none_or(|s| ev.sid == s)
            && self.since.is_none_or(|s| ev.ts >= s)
            && self.until.is_none_or(|u| ev.ts <= u)
            && (!self.quarantined_only || ev.quarantine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GapStats {
    pub max_seq_seen: u64,
    /// Distinct sequence numbers stored.
    pub received: u64,
    /// Re-deliveries seen by this collector process.
    pub duplicates: u64,
    pub gaps: u64,
}

/// An open store directory. All writes go through one `Store`.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
    seen: HashMap<String, BTreeSet<u64>>,
    duplicates: HashMap<String, u64>,
    rejects: BTreeMap<&'static str, u64>,
    quarantine: QuarantineTable,
}

impl Store {
    /// Opens or creates a store. The quarantine table is rebuilt from the
    /// event log, and rewritten if the file on disk disagrees.
    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        fs::create_dir_all(dir)?;
        let events = read_events(&dir.join(EVENTS_FILE))?;
        let mut seen: HashMap<String, BTreeSet<u64>> = HashMap::new();
        let mut quarantine = QuarantineTable::new();
        for rec in &events {
            seen.entry(rec.event.host_id.clone()).or_default().insert(rec.seq);
            if rec.event.quarantine {
                upsert(&mut quarantine, rec);
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(dir.join(EVENTS_FILE))?;
        let store = Store {
            dir: dir.to_path_buf(),
            log,
            seen,
            duplicates: HashMap::new(),
            rejects: BTreeMap::new(),
            quarantine,
        };
        if read_quarantine(&store.dir.join(QUARANTINE_FILE))?.as_ref() != Some(&store.quarantine) {
            store.write_quarantine()?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_quarantine(&self) -> io::Result<()> {
        let tmp = self.dir.join(format!("{QUARANTINE_FILE}.tmp"));
        let mut f = File::create(&tmp)?;
        f.write_all(render_quarantine(&self.quarantine).as_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, self.dir.join(QUARANTINE_FILE))
    }

    /// Decodes and persists one datagram. Decode failures are counted.
    pub fn ingest_datagram(&mut self, datagram: &[u8]) -> Result<Outcome, StoreError> {
        match decode_event(datagram) {
            Ok(rec) => self.persist_event(&rec),
            Err(e) => {
                *self.rejects.entry(e.reason()).or_insert(0) += 1;
                log::debug!("rejected datagram: {e}");
                Ok(Outcome::Rejected(e.reason()))
            }
        }
    }

    pub fn persist_event(&mut self, rec: &EventRecord) -> Result<Outcome, StoreError> {
        let host = &rec.event.host_id;
        if self.seen.get(host).is_some_and(|s| s.contains(&rec.seq)) {
            *self.duplicates.entry(host.clone()).or_insert(0) += 1;
            return Ok(Outcome::Duplicate);
        }
        let mut line = event_line(rec);
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        self.log.flush()?;
        self.seen.entry(host.clone()).or_default().insert(rec.seq);
        if rec.event.quarantine {
            upsert(&mut self.quarantine, rec);
            self.write_quarantine()?;
        }
        Ok(Outcome::Stored)
    }

    pub fn rejects(&self) -> &BTreeMap<&'static str, u64> {
        &self.rejects
    }

    pub fn quarantine(&self) -> impl Iterator<Item = &QuarantineRecord> {
        self.quarantine.values()
    }

    pub fn hosts(&self) -> Vec<String> {
        let mut hosts: Vec<String> = self.seen.keys().cloned().collect();
        hosts.sort();
        hosts
    }

    pub fn gap_stats(&self, host: &str) -> Result<GapStats, StoreError> {
        let seqs = self
            .seen
            .get(host)
            .ok_or_else(|| StoreError::UnknownHost(host.into()))?;
        let max = seqs.iter().next_back().copied().unwrap_or(0);
        let received = seqs.len() as u64;
        Ok(GapStats {
            max_seq_seen: max,
            received,
            duplicates: self.duplicates.get(host).copied().unwrap_or(0),
            gaps: max - received,
        })
    }

    pub fn query(&self, filter: &EventFilter) -> Result<Vec<EventRecord>, StoreError> {
        query_events(&self.dir, filter)
    }

    pub fn audit(&self) -> Result<(), Vec<String>> {
        audit(&self.dir)
    }
}

/// Matching records from a store directory, ordered by (host, seq).
pub fn query_events(dir: &Path, filter: &EventFilter) -> Result<Vec<EventRecord>, StoreError> {
    filter.validate()?;
    let mut out: Vec<EventRecord> = read_events(&dir.join(EVENTS_FILE))?
        .into_iter()
        .filter(|r| filter.matches(r))
        .collect();
    out.sort_by(|a, b| (&a.event.host_id, a.seq).cmp(&(&b.event.host_id, b.seq)));
    Ok(out)
}

/// Loss accounting for every host in a store directory, computed from the
/// files alone (duplicates are not persisted and read as 0).
pub fn store_gap_stats(dir: &Path) -> Result<BTreeMap<String, GapStats>, StoreError> {
    let mut seqs: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
    for rec in read_events(&dir.join(EVENTS_FILE))? {
        seqs.entry(rec.event.host_id).or_default().insert(rec.seq);
    }
    Ok(seqs
        .into_iter()
        .map(|(host, s)| {
            let max = s.iter().next_back().copied().unwrap_or(0);
            let received = s.len() as u64;
            (
                host,
                GapStats {
                    max_seq_seen: max,
                    received,
                    duplicates: 0,
                    gaps: max - received,
                },
            )
        })
        .collect())
}

pub fn read_quarantine_table(dir: &Path) -> Result<Vec<QuarantineRecord>, StoreError> {
    Ok(read_quarantine(&dir.join(QUARANTINE_FILE))?
        .unwrap_or_default()
        .into_values()
        .collect())
}

/// Checks that every quarantine row agrees with the quarantine-flagged
/// events in the log. Returns the disagreements.
pub fn audit(dir: &Path) -> Result<(), Vec<String>> {
    let events = read_events(&dir.join(EVENTS_FILE)).map_err(|e| vec![e.to_string()])?;
    let on_disk = read_quarantine(&dir.join(QUARANTINE_FILE))
        .map_err(|e| vec![e.to_string()])?
        .unwrap_or_default();
    let mut expected = QuarantineTable::new();
    for rec in events.iter().filter(|r| r.event.quarantine) {
        upsert(&mut expected, rec);
    }
    let mut problems = Vec::new();
    for (k, q) in &expected {
        match on_disk.get(k) {
            None => problems.push(format!("missing quarantine row for {k:?}")),
            Some(d) if d != q => problems.push(format!("row for {k:?} is {d:?}, log says {q:?}")),
            Some(_) => {}
        }
    }
    for k in on_disk.keys().filter(|k| !expected.contains_key(*k)) {
        problems.push(format!("quarantine row {k:?} has no events"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

/// Receives datagrams on `socket` until `shutdown` is set.
pub fn serve(socket: &UdpSocket, store: &mut Store, shutdown: &AtomicBool) -> Result<(), StoreError> {
    socket.set_read_timeout(Some(Duration::from_millis(100)))?;
    let mut buf = vec![0u8; MAX_DATAGRAM.max(65_536)];
    while !shutdown.load(Ordering::Relaxed) {
        match socket.recv_from(&mut buf) {
            Ok((n, peer)) => {
                if let Outcome::Rejected(reason) = store.ingest_datagram(&buf[..n])? {
                    log::warn!("rejected datagram from {peer}: {reason}");
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
