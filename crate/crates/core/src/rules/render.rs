use std::fmt::Write;

use super::{ContentPattern, Rule, RuleSet};

fn is_literal(b: u8) -> bool {
    (0x20..0x7f).contains(&b) && !matches!(b, b'"' | b'\\' | b'|')
}

fn render_content(bytes: &[u8], out: &mut String) {
    out.push('"');
    let mut in_hex = false;
    for &b in bytes {
        if is_literal(b) {
            if in_hex {
                out.push('|');
                in_hex = false;
            }
            out.push(b as char);
        } else {
            if in_hex {
                out.push(' ');
            } else {
                out.push('|');
                in_hex = true;
            }
            let _ = write!(out, "{b:02X}");
        }
    }
    if in_hex {
        out.push('|');
    }
    out.push('"');
}

fn render_msg(msg: &str, out: &mut String) {
    out.push('"');
    for c in msg.chars() {
        if matches!(c, '"' | '\\' | ';') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
}

fn render_pattern(p: &ContentPattern, out: &mut String) {
    out.push_str(" content:");
    render_content(&p.bytes, out);
    out.push(';');
    if p.nocase {
        out.push_str(" nocase;");
    }
    for (name, value) in [
        ("offset", p.offset),
        ("depth", p.depth),
        ("distance", p.distance),
        ("within", p.within),
    ] {
        if let Some(v) = value {
            let _ = write!(out, " {name}:{v};");
        }
    }
}

/// Canonical single-line form of a rule.
pub fn render_rule(rule: &Rule) -> String {
    let mut out = String::with_capacity(128);
    let _ = write!(
        out,
        "{} tcp {} {} -> {} {} (msg:",
        rule.action.as_str(),
        rule.src_addr,
        rule.src_port,
        rule.dst_addr,
        rule.dst_port
    );
    render_msg(&rule.msg, &mut out);
    out.push(';');
    for p in &rule.patterns {
        render_pattern(p, &mut out);
    }
    let _ = write!(
        out,
        " classtype:{}; sid:{}; rev:{}; severity:{};)",
        rule.class, rule.sid, rule.rev, rule.severity
    );
    out
}

/// One canonical rule per line, in ruleset order.
pub fn render_ruleset(rs: &RuleSet) -> String {
    let mut out = String::new();
    for rule in &rs.rules {
        out.push_str(&render_rule(rule));
        out.push('\n');
    }
    out
}
