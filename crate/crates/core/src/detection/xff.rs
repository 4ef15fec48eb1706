//! Real client identity behind a proxy, from the `X-Forwarded-For` header of
//! the first HTTP request on a connection.

use std::net::{IpAddr, SocketAddr};

/// Only this much of a stream is examined for the first request head.
pub const HEAD_CAP: usize = 8 * 1024;

fn is_tchar(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&b)
}

fn is_request_line(line: &[u8]) -> bool {
    let mut parts = line.split(|&b| b == b' ');
    let (Some(method), Some(target), Some(version), None) =
        (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return false;
    };
    let method_ok = !method.is_empty() && method.len() <= 16 && method.iter().all(u8::is_ascii_uppercase);
    let version_ok = version.len() == 8
        && version.starts_with(b"HTTP/")
        && version[5].is_ascii_digit()
        && version[6] == b'.'
        && version[7].is_ascii_digit();
    method_ok && !target.is_empty() && version_ok
}

/// Length of the request head including its terminating blank line, if the
/// blank line occurs within [`HEAD_CAP`].
fn head_len(data: &[u8]) -> Option<usize> {
    let data = &data[..data.len().min(HEAD_CAP)];
    let mut line_start = 0;
    for (i, &b) in data.iter().enumerate() {
        if b == b'\n' {
            let line = &data[line_start..i];
            if line.is_empty() || line == b"\r" {
                return Some(i + 1);
            }
            line_start = i + 1;
        }
    }
    None
}

/// Parses the first element of an `X-Forwarded-For` value.
pub fn parse_xff_value(value: &str) -> Option<IpAddr> {
    let first = value.split(',').next()?.trim();
    first
        .parse::<IpAddr>()
        .ok()
        .or_else(|| first.parse::<SocketAddr>().ok().map(|s| s.ip()))
}

/// Returns the first `X-Forwarded-For` address of the request head at the
/// start of `stream_prefix`. Anything that is not a complete, well-formed
/// request head yields `None`.
pub fn extract_xff(stream_prefix: &[u8]) -> Option<IpAddr> {
    let len = head_len(stream_prefix)?;
    let head = &stream_prefix[..len];
    let mut lines = head
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l))
        .take_while(|l| !l.is_empty());
    if !is_request_line(lines.next()?) {
        return None;
    }
    let mut found = None;
    for line in lines {
        let colon = line.iter().position(|&b| b == b':')?;
        let name = &line[..colon];
        if name.is_empty() || !name.iter().all(|&b| is_tchar(b)) {
            return None;
        }
        if found.is_none() && name.eq_ignore_ascii_case(b"x-forwarded-for") {
            let value = std::str::from_utf8(&line[colon + 1..]).ok()?;
            found = Some(parse_xff_value(value));
        }
    }
    found.flatten()
}

/// Accumulates the start of a stream until the first request head is
/// complete, then resolves once.
#[derive(Debug, Default)]
pub(crate) struct XffScanner {
    prefix: Vec<u8>,
    done: bool,
}

impl XffScanner {
    /// Returns `Some(result)` exactly once, when the head is complete or the
    /// cap is reached.
    pub(crate) fn push(&mut self, bytes: &[u8]) -> Option<Option<IpAddr>> {
        if self.done || bytes.is_empty() {
            return None;
        }
        let room = HEAD_CAP - self.prefix.len();
        self.prefix.extend_from_slice(&bytes[..bytes.len().min(room)]);
        if head_len(&self.prefix).is_some() || self.prefix.len() >= HEAD_CAP {
            self.done = true;
            let result = extract_xff(&self.prefix);
            self.prefix = Vec::new();
            return Some(result);
        }
        None
    }

    /// Gives up, e.g. after a gap broke the request head.
    pub(crate) fn abandon(&mut self) {
        self.done = true;
        self.prefix = Vec::new();
    }
}
