use std::collections::HashMap;
use std::fmt;
use std::net::IpAddr;

use ipnet::IpNet;
use thiserror::Error;

use super::{Action, AddrSpec, ContentPattern, PortSpec, Rule, RuleClass, RuleSet, DEFAULT_SEVERITY};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("syntax error at column {pos} near `{token}`: expected {expected}")]
    Syntax {
        pos: usize,
        token: String,
        expected: &'static str,
    },
    #[error("duplicate option `{option}` at column {pos}")]
    DuplicateOption { option: String, pos: usize },
    #[error("missing {}", .0.join(" and "))]
    Missing(Vec<&'static str>),
    #[error("unknown classtype `{0}` (expected web-client or web-server)")]
    UnknownClasstype(String),
    #[error("invalid {option}: {reason}")]
    Invalid { option: &'static str, reason: String },
}

fn invalid(option: &'static str, reason: impl Into<String>) -> RuleError {
    RuleError::Invalid {
        option,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LineError {
    Rule { line: usize, error: RuleError },
    DuplicateSid { sid: u32, lines: Vec<usize> },
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LineError::Rule { line, error } => write!(f, "line {line}: {error}"),
            LineError::DuplicateSid { sid, lines } => {
                let lines: Vec<String> = lines.iter().map(usize::to_string).collect();
                write!(f, "duplicate sid {sid} on lines {}", lines.join(", "))
            }
        }
    }
}

/// All problems found in a ruleset file, in line order.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}", self.errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct RuleSetError {
    pub errors: Vec<LineError>,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn error(&self, expected: &'static str) -> RuleError {
        let token: String = self.src[self.pos..]
            .chars()
            .take_while(|c| !c.is_whitespace())
            .take(24)
            .collect();
        RuleError::Syntax {
            pos: self.pos + 1,
            token: if token.is_empty() { "<end>".into() } else { token },
            expected,
        }
    }

    /// Next whitespace-delimited word of the header, stopping before `(`.
    fn word(&mut self, expected: &'static str) -> Result<(usize, &'a str), RuleError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .find(|c: char| c.is_whitespace() || c == '(')
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.error(expected));
        }
        self.pos += len;
        Ok((start, &rest[..len]))
    }

    fn expect(&mut self, c: char, expected: &'static str) -> Result<(), RuleError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn ident(&mut self) -> Result<(usize, &'a str), RuleError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.error("option name"));
        }
        self.pos += len;
        Ok((start, &rest[..len]))
    }

    /// Body of a double-quoted string with backslash escapes left in place.
    fn quoted(&mut self) -> Result<&'a str, RuleError> {
        self.skip_ws();
        if self.peek() != Some('"') {
            return Err(self.error("`\"`"));
        }
        let start = self.pos + 1;
        let bytes = self.src.as_bytes();
        let mut i = start;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => i += 2,
                b'"' => {
                    self.pos = i + 1;
                    return Ok(&self.src[start..i]);
                }
                _ => i += 1,
            }
        }
        self.pos = start - 1;
        Err(self.error("closing `\"`"))
    }

    fn bare_value(&mut self) -> Result<(usize, &'a str), RuleError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest.find(';').unwrap_or(rest.len());
        let value = rest[..len].trim_end();
        if value.is_empty() {
            return Err(self.error("option value"));
        }
        self.pos += value.len();
        Ok((start, value))
    }
}

fn parse_addr(pos: usize, token: &str) -> Result<AddrSpec, RuleError> {
    match token {
        "any" => Ok(AddrSpec::Any),
        "$HOME_NET" => Ok(AddrSpec::HomeNet),
        "$EXTERNAL_NET" => Ok(AddrSpec::ExternalNet),
        _ => {
            if let Ok(net) = token.parse::<IpNet>() {
                Ok(AddrSpec::Net(net.trunc()))
            } else if let Ok(ip) = token.parse::<IpAddr>() {
                Ok(AddrSpec::Net(IpNet::from(ip)))
            } else {
                Err(RuleError::Syntax {
                    pos: pos + 1,
                    token: token.into(),
                    expected: "address (any, $HOME_NET, $EXTERNAL_NET or CIDR)",
                })
            }
        }
    }
}

fn parse_port(pos: usize, token: &str) -> Result<PortSpec, RuleError> {
    if token == "any" {
        return Ok(PortSpec::Any);
    }
    token.parse().map(PortSpec::Port).map_err(|_| RuleError::Syntax {
        pos: pos + 1,
        token: token.into(),
        expected: "port number or any",
    })
}

fn unescape_msg(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(next) = chars.next() {
                out.push(next);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Decodes a content string: literal bytes plus `|HH HH|` hex runs.
fn decode_content(raw: &str, pos: usize) -> Result<Vec<u8>, RuleError> {
    let bad = |expected: &'static str, token: &str| RuleError::Syntax {
        pos,
        token: token.into(),
        expected,
    };
    let mut out = Vec::with_capacity(raw.len());
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'|' => {
                let close = raw[i + 1..]
                    .find('|')
                    .ok_or_else(|| bad("closing `|` in content", &raw[i..]))?;
                let hex = &raw[i + 1..i + 1 + close];
                let digits: String = hex.split_whitespace().collect();
                if digits.is_empty() || !digits.len().is_multiple_of(2) {
                    return Err(bad("hex byte pairs in content", hex));
                }
                if hex.split_whitespace().any(|grp| grp.len() % 2 != 0) {
                    return Err(bad("hex byte pairs in content", hex));
                }
                let decoded =
                    hex::decode(&digits).map_err(|_| bad("hex byte pairs in content", hex))?;
                out.extend_from_slice(&decoded);
                i += close + 2;
            }
            b'\\' => {
                let next = *bytes
                    .get(i + 1)
                    .ok_or_else(|| bad("escaped character", "\\"))?;
                out.push(next);
                i += 2;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    Ok(out)
}

fn parse_uint<T: std::str::FromStr>(option: &'static str, value: &str) -> Result<T, RuleError> {
    value
        .parse()
        .map_err(|_| invalid(option, format!("`{value}` is not a non-negative integer")))
}

/// Parses one rule line.
pub fn parse_rule(text: &str) -> Result<Rule, RuleError> {
    let mut cur = Cursor {
        src: text.trim_end_matches(['\r', '\n']),
        pos: 0,
    };

    let (pos, action) = cur.word("action")?;
    let action: Action = action.parse().map_err(|_| RuleError::Syntax {
        pos: pos + 1,
        token: action.into(),
        expected: "action (alert or drop)",
    })?;
    let (pos, proto) = cur.word("protocol")?;
    if proto != "tcp" {
        return Err(RuleError::Syntax {
            pos: pos + 1,
            token: proto.into(),
            expected: "protocol tcp",
        });
    }
    let (pos, tok) = cur.word("source address")?;
    let src_addr = parse_addr(pos, tok)?;
    let (pos, tok) = cur.word("source port")?;
    let src_port = parse_port(pos, tok)?;
    let (pos, arrow) = cur.word("`->`")?;
    if arrow != "->" {
        return Err(RuleError::Syntax {
            pos: pos + 1,
            token: arrow.into(),
            expected: "`->`",
        });
    }
    let (pos, tok) = cur.word("destination address")?;
    let dst_addr = parse_addr(pos, tok)?;
    let (pos, tok) = cur.word("destination port")?;
    let dst_port = parse_port(pos, tok)?;
    cur.expect('(', "`(`")?;

    let mut msg: Option<String> = None;
    let mut class: Option<RuleClass> = None;
    let mut sid: Option<u32> = None;
    let mut rev: Option<u32> = None;
    let mut severity: Option<u8> = None;
    let mut patterns: Vec<ContentPattern> = Vec::new();
    let mut seen_modifiers: Vec<&str> = Vec::new();

    fn set_once<T>(slot: &mut Option<T>, value: T, name: &str, pos: usize) -> Result<(), RuleError> {
        if slot.is_some() {
            return Err(RuleError::DuplicateOption {
                option: name.into(),
                pos: pos + 1,
            });
        }
        *slot = Some(value);
        Ok(())
    }

    loop {
        cur.skip_ws();
        match cur.peek() {
            Some(')') => {
                cur.pos += 1;
                break;
            }
            None => return Err(cur.error("`)`")),
            _ => {}
        }
        let (pos, name) = cur.ident()?;
        cur.skip_ws();

        if name == "nocase" {
            cur.expect(';', "`;` after nocase")?;
            let last = patterns.last_mut().ok_or_else(|| RuleError::Syntax {
                pos: pos + 1,
                token: name.into(),
                expected: "content before nocase",
            })?;
            if seen_modifiers.contains(&"nocase") {
                return Err(RuleError::DuplicateOption {
                    option: name.into(),
                    pos: pos + 1,
                });
            }
            seen_modifiers.push("nocase");
            last.nocase = true;
            continue;
        }

        cur.expect(':', "`:`")?;
        match name {
            "msg" => {
                let raw = cur.quoted()?;
                set_once(&mut msg, unescape_msg(raw), name, pos)?;
            }
            "content" => {
                cur.skip_ws();
                let vpos = cur.pos + 1;
                let raw = cur.quoted()?;
                patterns.push(ContentPattern::new(decode_content(raw, vpos)?));
                seen_modifiers.clear();
            }
            "offset" | "depth" | "distance" | "within" => {
                let (_, value) = cur.bare_value()?;
                let n: u64 = parse_uint(static_name(name), value)?;
                let last = patterns.last_mut().ok_or_else(|| RuleError::Syntax {
                    pos: pos + 1,
                    token: name.into(),
                    expected: "content before content modifier",
                })?;
                if seen_modifiers.contains(&name) {
                    return Err(RuleError::DuplicateOption {
                        option: name.into(),
                        pos: pos + 1,
                    });
                }
                seen_modifiers.push(static_name(name));
                let slot = match name {
                    "offset" => &mut last.offset,
                    "depth" => &mut last.depth,
                    "distance" => &mut last.distance,
                    _ => &mut last.within,
                };
                *slot = Some(n);
            }
            "classtype" => {
                let (_, value) = cur.bare_value()?;
                let c: RuleClass = value
                    .parse()
                    .map_err(|_| RuleError::UnknownClasstype(value.into()))?;
                set_once(&mut class, c, name, pos)?;
            }
            "sid" => {
                let (_, value) = cur.bare_value()?;
                set_once(&mut sid, parse_uint("sid", value)?, name, pos)?;
            }
            "rev" => {
                let (_, value) = cur.bare_value()?;
                set_once(&mut rev, parse_uint("rev", value)?, name, pos)?;
            }
            "severity" => {
                let (_, value) = cur.bare_value()?;
                set_once(&mut severity, parse_uint("severity", value)?, name, pos)?;
            }
            _ => {
                return Err(RuleError::Syntax {
                    pos: pos + 1,
                    token: name.into(),
                    expected: "known option",
                })
            }
        }
        cur.expect(';', "`;`")?;
    }
    cur.skip_ws();
    if !cur.at_end() {
        return Err(cur.error("end of rule"));
    }

    let mut missing = Vec::new();
    if class.is_none() {
        missing.push("classtype");
    }
    if patterns.is_empty() {
        missing.push("content");
    }
    if sid.is_none() {
        missing.push("sid");
    }
    if !missing.is_empty() {
        return Err(RuleError::Missing(missing));
    }

    let rule = Rule {
        action,
        src_addr,
        src_port,
        dst_addr,
        dst_port,
        msg: msg.unwrap_or_default(),
        patterns,
        class: class.expect("checked above"),
        sid: sid.expect("checked above"),
        rev: rev.unwrap_or(1),
        severity: severity.unwrap_or(DEFAULT_SEVERITY),
    };
    validate_rule(&rule)?;
    Ok(rule)
}

fn static_name(name: &str) -> &'static str {
    match name {
        "offset" => "offset",
        "depth" => "depth",
        "distance" => "distance",
        _ => "within",
    }
}

pub(crate) fn validate_rule(rule: &Rule) -> Result<(), RuleError> {
    if rule.sid == 0 {
        return Err(invalid("sid", "must be positive"));
    }
    if rule.rev == 0 {
        return Err(invalid("rev", "must be positive"));
    }
    if !(1..=4).contains(&rule.severity) {
        return Err(invalid("severity", format!("{} is outside 1-4", rule.severity)));
    }
    if rule.msg.contains(['\n', '\r']) {
        return Err(invalid("msg", "line breaks are not allowed"));
    }
    if rule.patterns.is_empty() {
        return Err(RuleError::Missing(vec!["content"]));
    }
    for (i, p) in rule.patterns.iter().enumerate() {
        if p.bytes.is_empty() {
            return Err(invalid("content", "pattern is empty"));
        }
        if let Some(depth) = p.depth {
            if depth < p.bytes.len() as u64 {
                return Err(invalid(
                    "depth",
                    format!("{depth} is shorter than the {}-byte pattern", p.bytes.len()),
                ));
            }
        }
        if p.within == Some(0) {
            return Err(invalid("within", "must be positive"));
        }
        if i == 0 && (p.distance.is_some() || p.within.is_some()) {
            return Err(invalid(
                "distance",
                "distance/within need a preceding content",
            ));
        }
    }
    Ok(())
}

/// Parses a ruleset file. Blank lines and `#` comments are skipped; every
/// bad line is reported, not just the first.
pub fn parse_ruleset(text: &str, version: u64) -> Result<RuleSet, RuleSetError> {
    let mut rules = Vec::new();
    let mut errors = Vec::new();
    let mut sid_lines: HashMap<u32, Vec<usize>> = HashMap::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_rule(trimmed) {
            Ok(rule) => {
                sid_lines.entry(rule.sid).or_default().push(lineno);
                rules.push(rule);
            }
            Err(error) => errors.push(LineError::Rule { line: lineno, error }),
        }
    }

    let mut dups: Vec<(u32, Vec<usize>)> = sid_lines
        .into_iter()
        .filter(|(_, lines)| lines.len() > 1)
        .collect();
    dups.sort_by_key(|(_, lines)| lines[0]);
    errors.extend(
        dups.into_iter()
            .map(|(sid, lines)| LineError::DuplicateSid { sid, lines }),
    );

    if errors.is_empty() {
        Ok(RuleSet { version, rules })
    } else {
        Err(RuleSetError { errors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IE_RULE: &str = r#"alert tcp $EXTERNAL_NET any -> $HOME_NET any (msg:"Possible Microsoft Internet Explorer URI Validation Remote Code Execution Attempt"; content:"|75 72 6C 2E 64 6C 6C|"; classtype:web-client; sid:1001; rev:1;)"#;

    #[test]
    fn parses_ie_uri_rule() {
        let r = parse_rule(IE_RULE).unwrap();
        assert_eq!(r.sid, 1001);
        assert_eq!(r.class, RuleClass::WebClient);
        assert_eq!(r.patterns.len(), 1);
        assert_eq!(r.patterns[0].bytes, b"url.dll");
        assert_eq!(r.action, Action::Alert);
        assert_eq!(r.severity, 3);
        assert_eq!(r.src_addr, AddrSpec::ExternalNet);
        assert_eq!(r.dst_addr, AddrSpec::HomeNet);
    }

    #[test]
    fn parses_traversal_rule() {
        let r = parse_rule(
            r#"alert tcp any any -> any any (msg:"dt"; content:"../"; classtype:web-server; sid:2001; rev:1;)"#,
        )
        .unwrap();
        assert_eq!(r.sid, 2001);
        assert_eq!(r.class, RuleClass::WebServer);
        assert_eq!(r.patterns[0].bytes, b"../");
    }

    #[test]
    fn missing_classtype_and_content() {
        let err =
            parse_rule(r#"alert tcp any any -> any any (msg:"x"; sid:3; rev:1;)"#).unwrap_err();
        assert_eq!(err, RuleError::Missing(vec!["classtype", "content"]));
        assert_eq!(err.to_string(), "missing classtype and content");
    }

    #[test]
    fn content_modifiers_attach_to_preceding_content() {
        let r = parse_rule(
            r#"drop tcp 10.0.0.0/8 80 -> any any (msg:"m"; content:"GET"; nocase; offset:0; depth:3; content:"x|0A|"; distance:2; within:10; classtype:web-server; sid:5; rev:2; severity:1;)"#,
        )
        .unwrap();
        assert_eq!(r.action, Action::Drop);
        assert_eq!(r.src_port, PortSpec::Port(80));
        assert!(r.patterns[0].nocase);
        assert_eq!(r.patterns[0].depth, Some(3));
        assert!(!r.patterns[1].nocase);
        assert_eq!(r.patterns[1].bytes, b"x\n");
        assert_eq!(r.patterns[1].distance, Some(2));
        assert_eq!(r.patterns[1].within, Some(10));
        assert_eq!(r.severity, 1);
    }

    #[test]
    fn rejects_duplicate_option() {
        let err = parse_rule(
            r#"alert tcp any any -> any any (msg:"a"; msg:"b"; content:"x"; classtype:web-client; sid:1;)"#,
        )
        .unwrap_err();
        assert!(matches!(err, RuleError::DuplicateOption { ref option, .. } if option == "msg"));

        let err = parse_rule(
            r#"alert tcp any any -> any any (content:"x"; depth:3; depth:4; classtype:web-client; sid:1;)"#,
        )
        .unwrap_err();
        assert!(matches!(err, RuleError::DuplicateOption { ref option, .. } if option == "depth"));
    }

    #[test]
    fn rejects_unknown_classtype() {
        let err = parse_rule(
            r#"alert tcp any any -> any any (content:"x"; classtype:trojan-activity; sid:1;)"#,
        )
        .unwrap_err();
        assert_eq!(err, RuleError::UnknownClasstype("trojan-activity".into()));
    }

    #[test]
    fn syntax_error_reports_position_and_token() {
        let err = parse_rule(r#"alert udp any any -> any any (content:"x"; classtype:web-client; sid:1;)"#)
            .unwrap_err();
        assert_eq!(
            err,
            RuleError::Syntax {
                pos: 7,
                token: "udp".into(),
                expected: "protocol tcp"
            }
        );
        let err = parse_rule(r#"alert tcp any any -> any any (content:"x"; pcre:"/a/"; sid:1;)"#)
            .unwrap_err();
        assert!(matches!(err, RuleError::Syntax { ref token, .. } if token == "pcre"));
    }

    #[test]
    fn rejects_invariant_violations() {
        let depth_short = parse_rule(
            r#"alert tcp any any -> any any (content:"abcd"; depth:2; classtype:web-client; sid:1;)"#,
        );
        assert!(matches!(depth_short, Err(RuleError::Invalid { option: "depth", .. })));
        let first_distance = parse_rule(
            r#"alert tcp any any -> any any (content:"ab"; distance:2; classtype:web-client; sid:1;)"#,
        );
        assert!(matches!(first_distance, Err(RuleError::Invalid { .. })));
        let sev = parse_rule(
            r#"alert tcp any any -> any any (content:"ab"; classtype:web-client; sid:1; severity:5;)"#,
        );
        assert!(matches!(sev, Err(RuleError::Invalid { option: "severity", .. })));
        let sid0 = parse_rule(r#"alert tcp any any -> any any (content:"ab"; classtype:web-client; sid:0;)"#);
        assert!(matches!(sid0, Err(RuleError::Invalid { option: "sid", .. })));
        let modifier_first =
            parse_rule(r#"alert tcp any any -> any any (nocase; content:"ab"; classtype:web-client; sid:1;)"#);
        assert!(matches!(modifier_first, Err(RuleError::Syntax { .. })));
    }

    #[test]
    fn msg_escapes() {
        let r = parse_rule(
            r#"alert tcp any any -> any any (msg:"a \"q\" \; b\\"; content:"x"; classtype:web-client; sid:1;)"#,
        )
        .unwrap();
        assert_eq!(r.msg, r#"a "q" ; b\"#);
    }

    #[test]
    fn ruleset_skips_comments_and_blanks() {
        let text = format!(
            "# web-client\n{IE_RULE}\n\n   # traversal\nalert tcp any any -> any any (msg:\"dt\"; content:\"../\"; classtype:web-server; sid:2001; rev:1;)\n"
        );
        let rs = parse_ruleset(&text, 4).unwrap();
        assert_eq!(rs.len(), 2);
        assert_eq!(rs.version, 4);
        assert_eq!(rs.rules[0].sid, 1001);
        assert_eq!(rs.rules[1].sid, 2001);
    }

    #[test]
    fn ruleset_reports_duplicate_sid_lines() {
        let text = format!("{IE_RULE}\n# c\n{IE_RULE}\n");
        let err = parse_ruleset(&text, 1).unwrap_err();
        assert_eq!(
            err.errors,
            vec![LineError::DuplicateSid {
                sid: 1001,
                lines: vec![1, 3]
            }]
        );
        assert!(err.to_string().contains("lines 1, 3"));
    }

    #[test]
    fn ruleset_aggregates_line_errors() {
        let text = "alert tcp any any -> any any (sid:1;)\nbogus\n";
        let err = parse_ruleset(text, 1).unwrap_err();
        assert_eq!(err.errors.len(), 2);
        assert!(matches!(err.errors[0], LineError::Rule { line: 1, .. }));
        assert!(matches!(err.errors[1], LineError::Rule { line: 2, .. }));
    }

    #[test]
    fn empty_ruleset_is_valid() {
        let rs = parse_ruleset("", 0).unwrap();
        assert!(rs.is_empty());
    }
}
