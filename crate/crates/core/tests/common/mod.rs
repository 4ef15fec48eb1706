//! Test oracles and fixture helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use hostguard::agent::{load_trace, AgentConfig, TraceEvent};
use hostguard::detection::DataDirection;
use hostguard::reassembly::OverlapPolicy;
use hostguard::rules::{parse_ruleset, ConnDirection, ContentPattern, Rule, RuleClass, RuleSet};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn scenario_rules() -> RuleSet {
    let text = std::fs::read_to_string(fixture("rules/rules.v1.txt")).unwrap();
    parse_ruleset(&text, 1).unwrap()
}

pub fn config(host: &str) -> AgentConfig {
    AgentConfig::load(&fixture(&format!("config/{host}.toml"))).unwrap()
}

pub fn trace(name: &str) -> Vec<TraceEvent> {
    load_trace(&fixture(&format!("traces/{name}.trc"))).unwrap()
}

/// (trace, host config) pairs for every trace fixture.
pub const TRACE_FIXTURES: [(&str, &str); 9] = [
    ("client_outbound", "desk-01"),
    ("client_inbound", "web-01"),
    ("server_outbound", "desk-02"),
    ("server_inbound", "web-02"),
    ("proxy_xff", "web-03"),
    ("proxy_noxff", "web-03"),
    ("overlap_insertion", "lab-01"),
    ("overlap_evasion", "lab-01"),
    ("mixed", "lab-01"),
];

fn eq_at(p: &ContentPattern, data: &[u8], start: usize) -> bool {
    let Some(hay) = data.get(start..start + p.bytes.len()) else {
        return false;
    };
    hay.iter()
        .zip(&p.bytes)
        .all(|(&h, &b)| if p.nocase { h.eq_ignore_ascii_case(&b) } else { h == b })
}

/// Whether `p` may start at `start`, given where the previous content ended.
fn placement_ok(p: &ContentPattern, start: usize, prev_end: Option<usize>) -> bool {
    let len = p.bytes.len();
    let off = p.offset.unwrap_or(0) as usize;
    if start < off {
        return false;
    }
    if let Some(depth) = p.depth {
        if start + len > off + depth as usize {
            return false;
        }
    }
    if let Some(prev) = prev_end {
        let from = prev + p.distance.unwrap_or(0) as usize;
        if start < from {
            return false;
        }
        if let Some(w) = p.within {
            if start + len > from + w as usize {
                return false;
            }
        }
    }
    true
}

struct Chain<'r> {
    rule: &'r Rule,
    /// Start positions where each content matches, ascending.
    starts: Vec<Vec<usize>>,
    /// Per content, per previous end: whether the rest of the chain completes.
    memo: Vec<Vec<Option<bool>>>,
}

impl Chain<'_> {
    fn from(&mut self, i: usize, prev_end: usize) -> bool {
        if i == self.rule.patterns.len() {
            return true;
        }
        if let Some(hit) = self.memo[i][prev_end] {
            return hit;
        }
        let p = &self.rule.patterns[i];
        let lo = self.starts[i].partition_point(|&s| s < prev_end);
        let mut hit = false;
        for k in lo..self.starts[i].len() {
            let s = self.starts[i][k];
            if placement_ok(p, s, Some(prev_end)) && self.from(i + 1, s + p.bytes.len()) {
                hit = true;
                break;
            }
        }
        self.memo[i][prev_end] = Some(hit);
        hit
    }
}

/// Every (offset, sid) at which a rule's first content starts a complete
/// chain over `data`. Tries every placement; no prefilter, no streaming.
pub fn brute_force<'a>(rules: impl IntoIterator<Item = &'a Rule>, data: &[u8]) -> BTreeSet<(u64, u32)> {
    let mut out = BTreeSet::new();
    for rule in rules {
        let starts = rule
            .patterns
            .iter()
            .map(|p| (0..data.len()).filter(|&s| eq_at(p, data, s)).collect())
            .collect();
        let mut chain = Chain {
            rule,
            starts,
            memo: vec![vec![None; data.len() + 1]; rule.patterns.len()],
        };
        let first = &rule.patterns[0];
        for k in 0..chain.starts[0].len() {
            let s = chain.starts[0][k];
            if placement_ok(first, s, None) && chain.from(1, s + first.bytes.len()) {
                out.insert((s as u64, rule.sid));
            }
        }
    }
    out
}

/// Stream an offline receiver would assemble from segments in arrival
/// order. Bytes below the contiguous frontier are final; above it the
/// policy decides which copy of an overlapped byte survives.
pub fn offline_assembly(policy: OverlapPolicy, segs: &[(u64, Vec<u8>)]) -> Vec<u8> {
    let end = segs.iter().map(|(o, b)| *o as usize + b.len()).max().unwrap_or(0);
    let mut bytes: Vec<Option<u8>> = vec![None; end];
    let mut frontier = 0usize;
    for (off, seg) in segs {
        for (k, &b) in seg.iter().enumerate() {
            let i = *off as usize + k;
            if i < frontier {
                continue;
            }
            match policy {
                OverlapPolicy::FirstWins => {
                    if bytes[i].is_none() {
                        bytes[i] = Some(b);
                    }
                }
                OverlapPolicy::LastWins => bytes[i] = Some(b),
            }
        }
        while frontier < end && bytes[frontier].is_some() {
            frontier += 1;
        }
    }
    bytes.into_iter().map_while(|b| b).collect()
}

/// Class of rules a host agent runs against one data direction: clients
/// are attacked by what they receive, servers by requests.
pub fn oracle_class(conn: ConnDirection, data: DataDirection) -> RuleClass {
    match (conn, data) {
        (ConnDirection::Outbound, DataDirection::In) => RuleClass::WebClient,
        (ConnDirection::Outbound, DataDirection::Out) => RuleClass::WebServer,
        (ConnDirection::Inbound, DataDirection::In) => RuleClass::WebServer,
        (ConnDirection::Inbound, DataDirection::Out) => RuleClass::WebClient,
    }
}

/// Expected (conn_id, direction, offset, sid) firings of a trace, from
/// assembling each direction offline and brute-forcing the bound class.
pub fn whole_stream_expectation(
    events: &[TraceEvent],
    rs: &RuleSet,
    cfg: &AgentConfig,
) -> BTreeSet<(String, &'static str, u64, u32)> {
    use std::collections::BTreeMap;
    let mut conns: BTreeMap<String, (TraceEvent, [Vec<(u64, Vec<u8>)>; 2], [u64; 2])> = BTreeMap::new();
    let mut out = BTreeSet::new();
    let flush = |open: &TraceEvent, segs: &[Vec<(u64, Vec<u8>)>; 2], out: &mut BTreeSet<_>| {
        let TraceEvent::Open {
            conn_id,
            local,
            remote,
            direction,
            ..
        } = open
        else {
            unreachable!()
        };
        for (k, dir) in [DataDirection::In, DataDirection::Out].into_iter().enumerate() {
            let (snd, rcv) = match dir {
                DataDirection::In => (remote, local),
                DataDirection::Out => (local, remote),
            };
            let class = oracle_class(*direction, dir);
            let stream = offline_assembly(cfg.overlap_policy, &segs[k]);
            let rules = rs.rules.iter().filter(|r| {
                r.class == class
                    && r.src_addr.contains(snd.ip(), &cfg.home_nets)
                    && r.src_port.contains(snd.port())
                    && r.dst_addr.contains(rcv.ip(), &cfg.home_nets)
                    && r.dst_port.contains(rcv.port())
            });
            for (off, sid) in brute_force(rules, &stream) {
                out.insert((conn_id.clone(), dir.as_str(), off, sid));
            }
        }
    };
    for ev in events {
        match ev {
            TraceEvent::Open { conn_id, .. } => {
                conns.insert(conn_id.clone(), (ev.clone(), Default::default(), [0, 0]));
            }
            TraceEvent::Data {
                conn_id,
                direction,
                offset,
                payload,
                ..
            } => {
                let c = conns.get_mut(conn_id).unwrap();
                let k = match direction {
                    DataDirection::In => 0,
                    DataDirection::Out => 1,
                };
                let start = offset.unwrap_or(c.2[k]);
                c.2[k] = c.2[k].max(start + payload.len() as u64);
                c.1[k].push((start, payload.clone()));
            }
            TraceEvent::Close { conn_id, .. } => {
                let (open, segs, _) = conns.remove(conn_id).unwrap();
                flush(&open, &segs, &mut out);
            }
        }
    }
    for (open, segs, _) in conns.values() {
        flush(open, segs, &mut out);
    }
    out
}
