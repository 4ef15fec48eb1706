//! Per-direction stream reassembly.
//!
//! Segments carry absolute stream offsets. Bytes are released exactly once,
//! in order, as soon as they become contiguous with the frontier; released
//! bytes are never revised. Overlaps with bytes still buffered are resolved
//! by the configured [`OverlapPolicy`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const DEFAULT_BUFFER_CAP: usize = 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    /// Buffered bytes are never overwritten by a later copy.
    #[default]
    FirstWins,
    /// A later copy overwrites buffered (not yet released) bytes.
    LastWins,
}

impl OverlapPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            OverlapPolicy::FirstWins => "first-wins",
            OverlapPolicy::LastWins => "last-wins",
        }
    }
}

impl FromStr for OverlapPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first-wins" => Ok(OverlapPolicy::FirstWins),
            "last-wins" => Ok(OverlapPolicy::LastWins),
            other => Err(format!("unknown overlap policy `{other}`")),
        }
    }
}

impl fmt::Display for OverlapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub offset: u64,
    pub bytes: Vec<u8>,
}

impl Segment {
    pub fn new(offset: u64, bytes: impl Into<Vec<u8>>) -> Self {
        Segment {
            offset,
            bytes: bytes.into(),
        }
    }

    fn end(&self) -> Option<u64> {
        self.offset.checked_add(self.bytes.len() as u64)
    }
}

/// Bytes made contiguous by one operation.
///
/// `context` holds up to the buffer's tail length of bytes released just
/// before `offset`; it is empty right after a gap.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Released {
    pub offset: u64,
    pub context: Vec<u8>,
    pub bytes: Vec<u8>,
    /// Set when this release starts after a skipped gap.
    pub after_gap: bool,
}

impl Released {
    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReassemblyError {
    #[error("segment is empty")]
    EmptySegment,
    #[error("segment end overflows the 64-bit stream offset")]
    OffsetOverflow,
    #[error("buffer cap of {cap} bytes exceeded ({needed} bytes would be buffered)")]
    Overflow { needed: usize, cap: usize },
}

/// Out-of-order data keyed by start offset. Entries never overlap.
#[derive(Debug, Clone, Default)]
struct Pending {
    map: BTreeMap<u64, Vec<u8>>,
    bytes: usize,
}

impl Pending {
    /// Entries intersecting `[start, end)`, in offset order.
    fn overlapping(&self, start: u64, end: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        if let Some((&k, v)) = self.map.range(..start).next_back() {
            if k + v.len() as u64 > start {
                out.push((k, k + v.len() as u64));
            }
        }
        for (&k, v) in self.map.range(start..end) {
            out.push((k, k + v.len() as u64));
        }
        out
    }

    fn insert(&mut self, offset: u64, bytes: Vec<u8>) {
        self.bytes += bytes.len();
        self.map.insert(offset, bytes);
    }

    fn remove(&mut self, offset: u64) -> Vec<u8> {
        let v = self.map.remove(&offset).expect("entry exists");
        self.bytes -= v.len();
        v
    }

    fn add(&mut self, seg: Segment, policy: OverlapPolicy) {
        let start = seg.offset;
        let end = start + seg.bytes.len() as u64;
        let existing = self.overlapping(start, end);
        match policy {
            OverlapPolicy::FirstWins => {
                let mut cursor = start;
                for (s, e) in existing.into_iter().chain(std::iter::once((end, end))) {
                    if s > cursor {
                        let a = (cursor - start) as usize;
                        let b = (s.min(end) - start) as usize;
                        self.insert(cursor, seg.bytes[a..b].to_vec());
                    }
                    cursor = cursor.max(e);
                    if cursor >= end {
                        break;
                    }
                }
            }
            OverlapPolicy::LastWins => {
                for (s, e) in existing {
                    let old = self.remove(s);
                    if s < start {
                        self.insert(s, old[..(start - s) as usize].to_vec());
                    }
                    if e > end {
                        self.insert(end, old[(end - s) as usize..].to_vec());
                    }
                }
                self.insert(start, seg.bytes);
            }
        }
    }

    /// Pops the contiguous run starting at `from`.
    fn take_contiguous(&mut self, from: u64) -> Vec<u8> {
        let mut out = Vec::new();
        let mut at = from;
        while self.map.contains_key(&at) {
            let v = self.remove(at);
            at += v.len() as u64;
            out.extend_from_slice(&v);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StreamBuffer {
    next_offset: u64,
    pending: Pending,
    policy: OverlapPolicy,
    cap: usize,
    tail: Vec<u8>,
    tail_len: usize,
    gap_marker: Option<u64>,
    gaps: u64,
}

impl StreamBuffer {
    /// `tail_len` is how many released bytes to keep as lookbehind context;
    /// pass the matcher's longest content length minus one.
    pub fn new(policy: OverlapPolicy, cap: usize, tail_len: usize) -> Self {
        StreamBuffer {
            next_offset: 0,
            pending: Pending::default(),
            policy,
            cap,
            tail: Vec::new(),
            tail_len,
            gap_marker: None,
            gaps: 0,
        }
    }

    pub fn next_offset(&self) -> u64 {
        self.next_offset
    }

    pub fn policy(&self) -> OverlapPolicy {
        self.policy
    }

    pub fn buffered(&self) -> usize {
        self.pending.bytes
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.map.is_empty()
    }

    pub fn retained_tail(&self) -> &[u8] {
        &self.tail
    }

    /// Start of the most recent gap skipped by [`force_gap`](Self::force_gap).
    pub fn gap_marker(&self) -> Option<u64> {
        self.gap_marker
    }

    pub fn gaps(&self) -> u64 {
        self.gaps
    }

    /// Adds a segment and returns whatever became contiguous.
    ///
    /// Bytes below the frontier are discarded. On overflow nothing changes.
    pub fn ingest_segment(&mut self, seg: Segment) -> Result<Released, ReassemblyError> {
        if seg.bytes.is_empty() {
            return Err(ReassemblyError::EmptySegment);
        }
        let end = seg.end().ok_or(ReassemblyError::OffsetOverflow)?;
        if end <= self.next_offset {
            return Ok(self.empty_release());
        }
        let seg = if seg.offset < self.next_offset {
            let cut = (self.next_offset - seg.offset) as usize;
            Segment::new(self.next_offset, seg.bytes[cut..].to_vec())
        } else {
            seg
        };

        // Only a segment that fits without release can skip the trial run.
        if self.pending.bytes + seg.bytes.len() > self.cap {
            let mut trial = self.pending.clone();
            trial.add(seg.clone(), self.policy);
            trial.take_contiguous(self.next_offset);
            if trial.bytes > self.cap {
                return Err(ReassemblyError::Overflow {
                    needed: trial.bytes,
                    cap: self.cap,
                });
            }
        }
        self.pending.add(seg, self.policy);
        Ok(self.release(false))
    }

    /// Skips the hole at the frontier, jumping to the lowest buffered
    /// offset, and releases what is contiguous from there. Matching state
    /// must not carry across the gap; the returned release has empty
    /// context and `after_gap` set.
    pub fn force_gap(&mut self) -> Released {
        let Some((&lowest, _)) = self.pending.map.iter().next() else {
            return self.empty_release();
        };
        self.gap_marker = Some(self.next_offset);
        self.gaps += 1;
        self.next_offset = lowest;
        self.tail.clear();
        self.release(true)
    }

    fn empty_release(&self) -> Released {
        Released {
            offset: self.next_offset,
            context: self.tail.clone(),
            bytes: Vec::new(),
            after_gap: false,
        }
    }

    fn release(&mut self, after_gap: bool) -> Released {
        let offset = self.next_offset;
        let bytes = self.pending.take_contiguous(offset);
        let context = self.tail.clone();
        self.next_offset += bytes.len() as u64;
        if self.tail_len > 0 {
            self.tail.extend_from_slice(&bytes);
            let excess = self.tail.len().saturating_sub(self.tail_len);
            self.tail.drain(..excess);
        }
        Released {
            offset,
            context,
            bytes,
            after_gap,
        }
    }
}
