//! Event datagram format shared by the agent and the collector.
//!
//! A datagram is UTF-8 text: the magic line `HGEV1`, then one `key=value`
//! line per field in a fixed order. Values are percent-escaped (see
//! [`crate::escape::FIELD`]). Datagrams never exceed [`MAX_DATAGRAM`] bytes;
//! oversized text fields are cut and the record is marked `trunc=1`.

use std::net::{IpAddr, SocketAddr};

use thiserror::Error;

use crate::detection::{DetectionEvent, EventKind};
use crate::escape::{self, FIELD};
use crate::rules::Action;

pub const MAGIC: &str = "HGEV1";
pub const MAX_DATAGRAM: usize = 1400;
/// Upper bound on host and connection ids. Together with the fixed-width
/// fields this keeps every datagram under the cap after text truncation.
pub const MAX_ID_LEN: usize = 64;

const KEYS: [&str; 18] = [
    "seq", "host", "ts", "conn", "proto", "src", "dst", "realsrc", "app", "appver", "sid", "rev",
    "msg", "sev", "kind", "quar", "act", "off",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    /// Per-agent sequence number, starting at 1.
    pub seq: u64,
    pub event: DetectionEvent,
    /// Some text was cut to fit the datagram cap.
    pub truncated: bool,
}

impl EventRecord {
    pub fn new(seq: u64, event: DetectionEvent) -> Self {
        EventRecord {
            seq,
            event,
            truncated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("not valid UTF-8")]
    NotUtf8,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(String),
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("missing key {0}")]
    MissingKey(&'static str),
    #[error("bad value for key {key}")]
    BadValue { key: &'static str },
    #[error("quarantine flag inconsistent with kind")]
    InconsistentQuarantine,
}

impl DecodeError {
    /// Stable short label for reject counters.
    pub fn reason(&self) -> &'static str {
        match self {
            DecodeError::NotUtf8 => "not-utf8",
            DecodeError::BadMagic => "bad-magic",
            DecodeError::UnsupportedVersion(_) => "unsupported-version",
            DecodeError::MalformedLine(_) => "malformed-line",
            DecodeError::UnknownKey(_) => "unknown-key",
            DecodeError::DuplicateKey(_) => "duplicate-key",
            DecodeError::MissingKey(_) => "missing-key",
            DecodeError::BadValue { .. } => "bad-value",
            DecodeError::InconsistentQuarantine => "inconsistent-quarantine",
        }
    }
}

struct TextFields<'a> {
    msg: &'a str,
    app: &'a str,
    appver: &'a str,
}

fn render(rec: &EventRecord, text: &TextFields<'_>, truncated: bool) -> String {
    let ev = &rec.event;
    let realsrc = ev.real_src.map_or_else(|| "-".to_string(), |ip| ip.to_string());
    let values: [String; 18] = [
        rec.seq.to_string(),
        escape::escape(&ev.host_id, FIELD),
        ev.ts.to_string(),
        escape::escape(&ev.conn_id, FIELD),
        "tcp".to_string(),
        ev.src.to_string(),
        ev.dst.to_string(),
        realsrc,
        escape::escape(text.app, FIELD),
        escape::escape(text.appver, FIELD),
        ev.sid.to_string(),
        ev.rev.to_string(),
        escape::escape(text.msg, FIELD),
        ev.severity.to_string(),
        ev.kind.code().to_string(),
        u8::from(ev.quarantine).to_string(),
        ev.action.as_str().to_string(),
        ev.match_offset.to_string(),
    ];
    let mut out = String::with_capacity(256);
    out.push_str(MAGIC);
    out.push('\n');
    for (key, value) in KEYS.iter().zip(values.iter()) {
        out.push_str(key);
        out.push('=');
        out.push_str(value);
        out.push('\n');
    }
    if truncated {
        out.push_str("trunc=1\n");
    }
    out
}

/// Longest prefix of `s` whose escaped form fits in `budget` bytes.
fn fit(s: &str, budget: &mut usize) -> usize {
    let mut used = 0;
    for (i, c) in s.char_indices() {
        let n = escape::escaped_len(c, FIELD);
        if used + n > *budget {
            *budget -= used;
            return i;
        }
        used += n;
    }
    *budget -= used;
    s.len()
}

pub fn encode_event(rec: &EventRecord) -> Vec<u8> {
    let ev = &rec.event;
    let full = TextFields {
        msg: &ev.msg,
        app: &ev.app_name,
        appver: &ev.app_version,
    };
    let text = render(rec, &full, rec.truncated);
    if text.len() <= MAX_DATAGRAM {
        return text.into_bytes();
    }
    let empty = TextFields {
        msg: "",
        app: "",
        appver: "",
    };
    let base = render(rec, &empty, true).len();
    let mut budget = MAX_DATAGRAM.saturating_sub(base);
    let msg = &ev.msg[..fit(&ev.msg, &mut budget)];
    let app = &ev.app_name[..fit(&ev.app_name, &mut budget)];
    let appver = &ev.app_version[..fit(&ev.app_version, &mut budget)];
    render(rec, &TextFields { msg, app, appver }, true).into_bytes()
}

fn field<T: std::str::FromStr>(values: &[Option<&str>; 18], idx: usize) -> Result<T, DecodeError> {
    let key = KEYS[idx];
    let raw = values[idx].ok_or(DecodeError::MissingKey(key))?;
    raw.parse().map_err(|_| DecodeError::BadValue { key })
}

fn text_field(values: &[Option<&str>; 18], idx: usize) -> Result<String, DecodeError> {
    let key = KEYS[idx];
    let raw = values[idx].ok_or(DecodeError::MissingKey(key))?;
    escape::unescape(raw, FIELD).ok_or(DecodeError::BadValue { key })
}

pub fn decode_event(datagram: &[u8]) -> Result<EventRecord, DecodeError> {
    let text = std::str::from_utf8(datagram).map_err(|_| DecodeError::NotUtf8)?;
    let mut lines = text.split_terminator('\n');
    match lines.next() {
        Some(MAGIC) => {}
        Some(other) if other.starts_with("HGEV") => {
            return Err(DecodeError::UnsupportedVersion(other.to_string()))
        }
        _ => return Err(DecodeError::BadMagic),
    }
    if !text.ends_with('\n') {
        return Err(DecodeError::MalformedLine(text.lines().count()));
    }

    let mut values: [Option<&str>; 18] = [None; 18];
    let mut trunc: Option<bool> = None;
    for (i, line) in lines.enumerate() {
        let (key, value) = line.split_once('=').ok_or(DecodeError::MalformedLine(i + 2))?;
        if key == "trunc" {
            if trunc.is_some() {
                return Err(DecodeError::DuplicateKey(key.into()));
            }
            trunc = Some(match value {
                "1" => true,
                "0" => false,
                _ => return Err(DecodeError::BadValue { key: "trunc" }),
            });
            continue;
        }
        let idx = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| DecodeError::UnknownKey(key.into()))?;
        if values[idx].replace(value).is_some() {
            return Err(DecodeError::DuplicateKey(key.into()));
        }
    }
    if let Some(missing) = KEYS.iter().zip(values.iter()).find(|(_, v)| v.is_none()) {
        return Err(DecodeError::MissingKey(missing.0));
    }

    if values[4] != Some("tcp") {
        return Err(DecodeError::BadValue { key: "proto" });
    }
    let real_src = match values[7] {
        Some("-") => None,
        _ => Some(field::<IpAddr>(&values, 7)?),
    };
    let kind = EventKind::from_code(values[14].unwrap_or_default())
        .ok_or(DecodeError::BadValue { key: "kind" })?;
    let quarantine = match values[15] {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(DecodeError::BadValue { key: "quar" }),
    };
    if quarantine != kind.is_attacking() {
        return Err(DecodeError::InconsistentQuarantine);
    }
    let action = values[16]
        .unwrap_or_default()
        .parse::<Action>()
        .map_err(|_| DecodeError::BadValue { key: "act" })?;
    let severity: u8 = field(&values, 13)?;
    if !(1..=4).contains(&severity) {
        return Err(DecodeError::BadValue { key: "sev" });
    }

    let event = DetectionEvent {
        ts: field(&values, 2)?,
        host_id: text_field(&values, 1)?,
        conn_id: text_field(&values, 3)?,
        src: field::<SocketAddr>(&values, 5)?,
        dst: field::<SocketAddr>(&values, 6)?,
        real_src,
        app_name: text_field(&values, 8)?,
        app_version: text_field(&values, 9)?,
        sid: field(&values, 10)?,
        rev: field(&values, 11)?,
        msg: text_field(&values, 12)?,
        severity,
        kind,
        quarantine,
        action,
        match_offset: field(&values, 17)?,
    };
    Ok(EventRecord {
        seq: field(&values, 0)?,
        event,
        truncated: trunc.unwrap_or(false),
    })
}

/// The record as escaped values in key order followed by the
/// truncation flag (`0` or `1`), as stored in the collector's event log.
pub fn record_fields(rec: &EventRecord) -> Vec<String> {
    let ev = &rec.event;
    let text = TextFields {
        msg: &ev.msg,
        app: &ev.app_name,
        appver: &ev.app_version,
    };
    let rendered = render(rec, &text, false);
    let mut out: Vec<String> = rendered
        .lines()
        .skip(1)
        .map(|l| l.split_once('=').map_or("", |(_, v)| v).to_string())
        .collect();
    out.push(if rec.truncated { "1" } else { "0" }.to_string());
    out
}

/// Inverse of [`record_fields`].
pub fn record_from_fields(fields: &[&str]) -> Result<EventRecord, DecodeError> {
    if fields.len() != KEYS.len() + 1 {
        return Err(DecodeError::MalformedLine(fields.len()));
    }
    let mut text = String::from(MAGIC);
    text.push('\n');
    for (key, value) in KEYS.iter().zip(fields) {
        text.push_str(key);
        text.push('=');
        text.push_str(value);
        text.push('\n');
    }
    let mut rec = decode_event(text.as_bytes())?;
    rec.truncated = match fields[KEYS.len()] {
        "0" => false,
        "1" => true,
        _ => return Err(DecodeError::BadValue { key: "trunc" }),
    };
    Ok(rec)
}

/// Splits a journal (datagrams written back to back) into datagrams.
/// Escaped values never contain a bare magic line, so each `HGEV` line
/// starts a new datagram.
pub fn split_journal(journal: &[u8]) -> Vec<&[u8]> {
    let mut starts = Vec::new();
    let mut line_start = 0;
    for (i, &b) in journal.iter().enumerate() {
        if b == b'\n' {
            if journal[line_start..i].starts_with(b"HGEV") && !journal[line_start..i].contains(&b'=') {
                starts.push(line_start);
            }
            line_start = i + 1;
        }
    }
    let mut out = Vec::with_capacity(starts.len());
    for (n, &s) in starts.iter().enumerate() {
        let e = starts.get(n + 1).copied().unwrap_or(journal.len());
        out.push(&journal[s..e]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> EventRecord {
        EventRecord::new(
            1,
            DetectionEvent {
                ts: 1_700_000_000_000,
                host_id: "h1".into(),
                conn_id: "c1".into(),
                src: "198.51.100.20:8080".parse().unwrap(),
                dst: "10.0.0.17:49152".parse().unwrap(),
                real_src: None,
                app_name: "iexplore".into(),
                app_version: "8.0".into(),
                sid: 1001,
                rev: 1,
                msg: "Possible IE URI validation RCE".into(),
                severity: 3,
                kind: EventKind::InsideClientVictimized,
                quarantine: false,
                action: Action::Alert,
                match_offset: 17,
            },
        )
    }

    #[test]
    fn layout() {
        let text = String::from_utf8(encode_event(&sample())).unwrap();
        assert!(text.starts_with("HGEV1\nseq=1\nhost=h1\n"));
        assert_eq!(
            text,
            "HGEV1\nseq=1\nhost=h1\nts=1700000000000\nconn=c1\nproto=tcp\n\
             src=198.51.100.20:8080\ndst=10.0.0.17:49152\nrealsrc=-\napp=iexplore\nappver=8.0\n\
             sid=1001\nrev=1\nmsg=Possible IE URI validation RCE\nsev=3\nkind=ICV\nquar=0\n\
             act=alert\noff=17\n"
        );
    }

    #[test]
    fn escapes_msg() {
        let mut rec = sample();
        rec.event.msg = "a=b\nc".into();
        let text = String::from_utf8(encode_event(&rec)).unwrap();
        assert!(text.contains("\nmsg=a%3Db%0Ac\n"));
        assert_eq!(decode_event(text.as_bytes()).unwrap(), rec);
    }

    #[test]
    fn truncates_long_msg() {
        let mut rec = sample();
        rec.event.msg = "x%=".repeat(1400);
        let bytes = encode_event(&rec);
        assert!(bytes.len() <= MAX_DATAGRAM);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.ends_with("trunc=1\n"));
        let back = decode_event(&bytes).unwrap();
        assert!(back.truncated);
        assert!(rec.event.msg.starts_with(&back.event.msg));
        assert!(!back.event.msg.is_empty());
    }

    #[test]
    fn truncation_keeps_utf8_boundaries() {
        let mut rec = sample();
        rec.event.msg = "é".repeat(2000);
        rec.event.app_name = "ü".repeat(500);
        let bytes = encode_event(&rec);
        assert!(bytes.len() <= MAX_DATAGRAM);
        let back = decode_event(&bytes).unwrap();
        assert!(back.event.msg.chars().all(|c| c == 'é'));
    }

    #[test]
    fn rejects_missing_key() {
        let text = String::from_utf8(encode_event(&sample())).unwrap();
        let without_sid: String = text
            .lines()
            .filter(|l| !l.starts_with("sid="))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = decode_event(without_sid.as_bytes()).unwrap_err();
        assert_eq!(err, DecodeError::MissingKey("sid"));
        assert_eq!(err.to_string(), "missing key sid");
    }

    #[test]
    fn rejects_wrong_magic() {
        let text = String::from_utf8(encode_event(&sample())).unwrap();
        let err = decode_event(text.replacen("HGEV1", "HGEV2", 1).as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "unsupported version HGEV2");
        assert_eq!(decode_event(b"hello\n"), Err(DecodeError::BadMagic));
    }

    #[test]
    fn rejects_duplicates_and_bad_values() {
        let text = String::from_utf8(encode_event(&sample())).unwrap();
        let dup = format!("{text}sid=2\n");
        assert_eq!(decode_event(dup.as_bytes()), Err(DecodeError::DuplicateKey("sid".into())));
        let bad = text.replace("msg=Possible", "msg=Poss%ZZible");
        assert_eq!(decode_event(bad.as_bytes()), Err(DecodeError::BadValue { key: "msg" }));
        let inconsistent = text.replace("quar=0", "quar=1");
        assert_eq!(decode_event(inconsistent.as_bytes()), Err(DecodeError::InconsistentQuarantine));
        let unknown = format!("{text}color=red\n");
        assert_eq!(decode_event(unknown.as_bytes()), Err(DecodeError::UnknownKey("color".into())));
        assert_eq!(decode_event(&[0xff, 0xfe]), Err(DecodeError::NotUtf8));
    }

    #[test]
    fn journal_splits_back_into_datagrams() {
        let mut a = sample();
        a.event.msg = "HGEV1\nseq=9".into();
        let mut b = sample();
        b.seq = 2;
        let mut journal = encode_event(&a);
        journal.extend(encode_event(&b));
        let parts = split_journal(&journal);
        assert_eq!(parts.len(), 2);
        assert_eq!(decode_event(parts[0]).unwrap(), a);
        assert_eq!(decode_event(parts[1]).unwrap(), b);
        assert!(split_journal(b"").is_empty());
    }
}
