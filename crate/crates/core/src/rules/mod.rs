//! Signature rules: the rule model, the one-line rule grammar, canonical
//! rendering, categorization by connection direction, and compilation into
//! a streaming multi-pattern matcher.

mod matcher;
mod parse;
mod render;

use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use ipnet::IpNet;

pub use matcher::{CompiledMatcher, Firing, StreamMatcher, DEFAULT_HISTORY_CAP};
pub use parse::{parse_rule, parse_ruleset, LineError, RuleError, RuleSetError};
pub use render::{render_rule, render_ruleset};

pub const DEFAULT_SEVERITY: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Alert,
    Drop,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Alert => "alert",
            Action::Drop => "drop",
        }
    }
}

impl FromStr for Action {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "alert" => Ok(Action::Alert),
            "drop" => Ok(Action::Drop),
            _ => Err(()),
        }
    }
}

/// Which side of a connection a rule protects: web-client rules describe
/// attacks delivered to a client, web-server rules attacks delivered to a
/// server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleClass {
    WebClient,
    WebServer,
}

impl RuleClass {
    pub const ALL: [RuleClass; 2] = [RuleClass::WebClient, RuleClass::WebServer];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleClass::WebClient => "web-client",
            RuleClass::WebServer => "web-server",
        }
    }
}

impl FromStr for RuleClass {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "web-client" => Ok(RuleClass::WebClient),
            "web-server" => Ok(RuleClass::WebServer),
            _ => Err(()),
        }
    }
}

impl fmt::Display for RuleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who initiated a connection, seen from the monitored host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnDirection {
    /// The local host initiated; the local application is the client.
    Outbound,
    /// A remote host initiated; the local application is the server.
    Inbound,
}

impl ConnDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnDirection::Outbound => "outbound",
            ConnDirection::Inbound => "inbound",
        }
    }
}

impl FromStr for ConnDirection {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "outbound" => Ok(ConnDirection::Outbound),
            "inbound" => Ok(ConnDirection::Inbound),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleCategory {
    ServerInbound,
    ClientInbound,
    ServerOutbound,
    ClientOutbound,
}

impl RuleCategory {
    pub const ALL: [RuleCategory; 4] = [
        RuleCategory::ServerInbound,
        RuleCategory::ClientInbound,
        RuleCategory::ServerOutbound,
        RuleCategory::ClientOutbound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleCategory::ServerInbound => "server-inbound",
            RuleCategory::ClientInbound => "client-inbound",
            RuleCategory::ServerOutbound => "server-outbound",
            RuleCategory::ClientOutbound => "client-outbound",
        }
    }
}

impl fmt::Display for RuleCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn categorize_rule(class: RuleClass, direction: ConnDirection) -> RuleCategory {
    match (class, direction) {
        (RuleClass::WebServer, ConnDirection::Inbound) => RuleCategory::ServerInbound,
        (RuleClass::WebClient, ConnDirection::Inbound) => RuleCategory::ClientInbound,
        (RuleClass::WebServer, ConnDirection::Outbound) => RuleCategory::ServerOutbound,
        (RuleClass::WebClient, ConnDirection::Outbound) => RuleCategory::ClientOutbound,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AddrSpec {
    Any,
    HomeNet,
    ExternalNet,
    Net(IpNet),
}

impl AddrSpec {
    /// Whether `ip` falls under this spec, with `$HOME_NET` bound to `home`.
    pub fn contains(&self, ip: IpAddr, home: &[IpNet]) -> bool {
        match self {
            AddrSpec::Any => true,
            AddrSpec::HomeNet => home.iter().any(|n| n.contains(&ip)),
            AddrSpec::ExternalNet => !home.iter().any(|n| n.contains(&ip)),
            AddrSpec::Net(net) => net.contains(&ip),
        }
    }
}

impl fmt::Display for AddrSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AddrSpec::Any => f.write_str("any"),
            AddrSpec::HomeNet => f.write_str("$HOME_NET"),
            AddrSpec::ExternalNet => f.write_str("$EXTERNAL_NET"),
            AddrSpec::Net(net) => write!(f, "{net}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PortSpec {
    Any,
    Port(u16),
}

impl PortSpec {
    pub fn contains(&self, port: u16) -> bool {
        match self {
            PortSpec::Any => true,
            PortSpec::Port(p) => *p == port,
        }
    }
}

impl fmt::Display for PortSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortSpec::Any => f.write_str("any"),
            PortSpec::Port(p) => write!(f, "{p}"),
        }
    }
}

/// One `content` option together with its modifiers.
///
/// `offset`/`depth` are absolute stream positions: the match must lie
/// entirely inside `[offset, offset + depth)`. `distance`/`within` are
/// relative to the end of the previous pattern's match: the match must lie
/// inside `[prev_end + distance, prev_end + distance + within)`. A
/// non-first pattern without `distance` still has to start at or after the
/// previous match's end.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContentPattern {
    pub bytes: Vec<u8>,
    pub nocase: bool,
    pub offset: Option<u64>,
    pub depth: Option<u64>,
    pub distance: Option<u64>,
    pub within: Option<u64>,
}

impl ContentPattern {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        ContentPattern {
            bytes: bytes.into(),
            nocase: false,
            offset: None,
            depth: None,
            distance: None,
            within: None,
        }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Compares the pattern against `hay`, which must have the same length.
    pub(crate) fn matches_at(&self, hay: &[u8]) -> bool {
        if self.nocase {
            self.bytes.eq_ignore_ascii_case(hay)
        } else {
            self.bytes == hay
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub action: Action,
    pub src_addr: AddrSpec,
    pub src_port: PortSpec,
    pub dst_addr: AddrSpec,
    pub dst_port: PortSpec,
    pub msg: String,
    pub patterns: Vec<ContentPattern>,
    pub class: RuleClass,
    pub sid: u32,
    pub rev: u32,
    pub severity: u8,
}

impl Rule {
    pub fn max_pattern_len(&self) -> usize {
        self.patterns.iter().map(ContentPattern::len).max().unwrap_or(0)
    }

    /// Checks the structural invariants the parser enforces. Rules built in
    /// code go through this before compilation.
    pub fn validate(&self) -> Result<(), RuleError> {
        parse::validate_rule(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RuleSet {
    pub version: u64,
    pub rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(version: u64, rules: Vec<Rule>) -> Self {
        RuleSet { version, rules }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, sid: u32) -> Option<&Rule> {
        self.rules.iter().find(|r| r.sid == sid)
    }

    pub fn count_class(&self, class: RuleClass) -> usize {
        self.rules.iter().filter(|r| r.class == class).count()
    }

    /// Number of rules per category when every rule is bound to both
    /// connection directions.
    pub fn census(&self) -> Vec<(RuleCategory, usize)> {
        RuleCategory::ALL
            .iter()
            .map(|&cat| {
                let class = match cat {
                    RuleCategory::ServerInbound | RuleCategory::ServerOutbound => {
                        RuleClass::WebServer
                    }
                    RuleCategory::ClientInbound | RuleCategory::ClientOutbound => {
                        RuleClass::WebClient
                    }
                };
                (cat, self.count_class(class))
            })
            .collect()
    }

    /// Added, removed and modified sids going from `self` to `newer`.
    pub fn delta_count(&self, newer: &RuleSet) -> usize {
        let mut n = 0;
        for r in &newer.rules {
            match self.get(r.sid) {
                None => n += 1,
                Some(old) if old != r => n += 1,
                Some(_) => {}
            }
        }
        n + self
            .rules
            .iter()
            .filter(|r| newer.get(r.sid).is_none())
            .count()
    }
}
