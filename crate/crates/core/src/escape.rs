//! Percent-escaping for the line-oriented wire and store formats.

/// Characters escaped in datagram values and event-log fields.
pub const FIELD: &[char] = &['%', '\n', '\r', '=', '|'];
/// Characters escaped in quarantine table cells.
pub const TABLE: &[char] = &['%', '\n', '\r', '=', '|', '\t'];

pub fn escape(s: &str, set: &[char]) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if set.contains(&c) {
            out.push_str(&format!("%{:02X}", c as u32));
        } else {
            out.push(c);
        }
    }
    out
}

/// Escaped length of one char.
pub fn escaped_len(c: char, set: &[char]) -> usize {
    if set.contains(&c) {
        3
    } else {
        c.len_utf8()
    }
}

/// Inverse of [`escape`]. Only the escapes `escape` itself produces for
/// `set` are accepted, so every value has exactly one encoding.
pub fn unescape(s: &str, set: &[char]) -> Option<String> {
    if s.chars().any(|c| c != '%' && set.contains(&c)) {
        return None;
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(i) = rest.find('%') {
        out.push_str(&rest[..i]);
        let code = rest.get(i + 1..i + 3)?;
        if code.bytes().any(|b| b.is_ascii_lowercase()) {
            return None;
        }
        let c = char::from(u8::from_str_radix(code, 16).ok()?);
        if !set.contains(&c) {
            return None;
        }
        out.push(c);
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    Some(out)
}
