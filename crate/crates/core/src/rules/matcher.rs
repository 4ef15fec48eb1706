use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use aho_corasick::{AhoCorasick, MatchKind};
use ipnet::IpNet;

use super::{ContentPattern, Rule, RuleClass, RuleSet};

/// How far, in stream bytes, a multi-content rule may wait for its later
/// contents before the partial match is dropped.
pub const DEFAULT_HISTORY_CAP: usize = 256 * 1024;

/// A rule that fired: `offset` is the absolute stream offset where its
/// first content matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Firing {
    pub offset: u64,
    pub sid: u32,
}

#[derive(Debug)]
struct ClassGroup {
    automaton: Option<AhoCorasick>,
    /// Automaton pattern id -> indices into `CompiledMatcher::rules`.
    by_pattern: Vec<Vec<usize>>,
}

impl ClassGroup {
    fn build(rules: &[Rule], class: RuleClass) -> ClassGroup {
        let mut ids: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut folded: Vec<Vec<u8>> = Vec::new();
        let mut by_pattern: Vec<Vec<usize>> = Vec::new();
        for (idx, rule) in rules.iter().enumerate().filter(|(_, r)| r.class == class) {
            let key = rule.patterns[0].bytes.to_ascii_lowercase();
            let id = *ids.entry(key.clone()).or_insert_with(|| {
                folded.push(key);
                by_pattern.push(Vec::new());
                folded.len() - 1
            });
            by_pattern[id].push(idx);
        }
        let automaton = if folded.is_empty() {
            None
        } else {
            Some(
                AhoCorasick::builder()
                    .ascii_case_insensitive(true)
                    .match_kind(MatchKind::Standard)
                    .build(&folded)
                    .expect("first contents are non-empty"),
            )
        };
        ClassGroup {
            automaton,
            by_pattern,
        }
    }
}

/// Immutable, shareable matcher built from a ruleset.
#[derive(Debug)]
pub struct CompiledMatcher {
    version: u64,
    home_nets: Vec<IpNet>,
    rules: Vec<Rule>,
    groups: [ClassGroup; 2],
    max_pattern_len: usize,
    history_cap: usize,
}

fn class_index(class: RuleClass) -> usize {
    match class {
        RuleClass::WebClient => 0,
        RuleClass::WebServer => 1,
    }
}

impl CompiledMatcher {
    pub fn compile(rs: &RuleSet, home_nets: &[IpNet]) -> CompiledMatcher {
        Self::with_history_cap(rs, home_nets, DEFAULT_HISTORY_CAP)
    }

    pub fn with_history_cap(rs: &RuleSet, home_nets: &[IpNet], history_cap: usize) -> CompiledMatcher {
        let rules = rs.rules.clone();
        let groups = [
            ClassGroup::build(&rules, RuleClass::WebClient),
            ClassGroup::build(&rules, RuleClass::WebServer),
        ];
        let max_pattern_len = rules.iter().map(Rule::max_pattern_len).max().unwrap_or(0);
        CompiledMatcher {
            version: rs.version,
            home_nets: home_nets.to_vec(),
            rules,
            groups,
            max_pattern_len,
            history_cap,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, sid: u32) -> Option<&Rule> {
        self.rules.iter().find(|r| r.sid == sid)
    }

    pub fn home_nets(&self) -> &[IpNet] {
        &self.home_nets
    }

    pub fn max_pattern_len(&self) -> usize {
        self.max_pattern_len
    }

    /// How many preceding bytes a stream must retain so that a first
    /// content straddling two releases is still found.
    pub fn lookbehind(&self) -> usize {
        self.max_pattern_len.saturating_sub(1)
    }

    /// Starts matching one data direction against the rules of `class`.
    /// With `flow = Some((sender, receiver))` only rules whose header
    /// accepts that sender/receiver pair take part.
    pub fn stream(self: &Arc<Self>, class: RuleClass, flow: Option<(SocketAddr, SocketAddr)>) -> StreamMatcher {
        let enabled = self
            .rules
            .iter()
            .map(|r| {
                r.class == class
                    && flow.is_none_or(|(snd, rcv)| {
                        r.src_addr.contains(snd.ip(), &self.home_nets)
                            && r.src_port.contains(snd.port())
                            && r.dst_addr.contains(rcv.ip(), &self.home_nets)
                            && r.dst_port.contains(rcv.port())
                    })
            })
            .collect();
        StreamMatcher {
            matcher: Arc::clone(self),
            class,
            enabled,
            next_offset: None,
            tail: Vec::new(),
            pending: Vec::new(),
            expired: 0,
        }
    }

    /// Every firing of every rule over a complete stream starting at
    /// offset 0, ignoring rule headers.
    pub fn scan(self: &Arc<Self>, data: &[u8]) -> Vec<Firing> {
        let mut out = Vec::new();
        for class in RuleClass::ALL {
            let mut s = self.stream(class, None);
            out.extend(s.feed(0, &[], data));
            out.extend(s.finish());
        }
        out.sort();
        out
    }
}

/// A first-content match waiting for the rule's later contents.
#[derive(Debug, Clone)]
struct Candidate {
    rule: usize,
    start: u64,
    end: u64,
    /// The first match can still lead to the second content.
    first_live: bool,
    /// `later[j]` holds the sorted reachable end offsets of content `j + 1`.
    later: Vec<Vec<u64>>,
}

impl Candidate {
    fn new(rule: usize, start: u64, end: u64) -> Candidate {
        Candidate {
            rule,
            start,
            end,
            first_live: true,
            later: Vec::new(),
        }
    }

    fn ends(&self, j: usize) -> &[u64] {
        if j == 0 {
            if self.first_live {
                std::slice::from_ref(&self.end)
            } else {
                &[]
            }
        } else {
            self.later.get(j - 1).map_or(&[], Vec::as_slice)
        }
    }

    /// Advances the chain with the later-content matches that ended in the
    /// latest feed. Returns true once the last content is reached.
    fn advance(&mut self, rule: &Rule, starts: &[Vec<u64>], stream_end: u64) -> bool {
        let last = rule.patterns.len() - 1;
        for k in 1..=last {
            let p = &rule.patterns[k];
            let len = p.len() as u64;
            let dist = p.distance.unwrap_or(0);
            let prev = self.ends(k - 1);
            let starts = &starts[k];
            if prev.is_empty() || starts.is_empty() {
                continue;
            }
            let mut found = Vec::new();
            match p.within {
                // Any start at or after the earliest allowed one is reachable.
                None => {
                    let i = starts.partition_point(|&s| s < prev[0] + dist);
                    let windowed = rule.patterns.get(k + 1).is_some_and(|n| n.within.is_some());
                    let n = if windowed { starts.len() } else { (i + 1).min(starts.len()) };
                    found.extend(starts[i..n].iter().map(|&s| s + len));
                }
                Some(w) => {
                    for &e in prev {
                        let lo = e + dist;
                        let Some(hi) = (lo + w).checked_sub(len) else { continue };
                        let i = starts.partition_point(|&s| s < lo);
                        let j = starts.partition_point(|&s| s <= hi);
                        found.extend(starts[i..j.max(i)].iter().map(|&s| s + len));
                    }
                }
            }
            if found.is_empty() {
                continue;
            }
            if k == last {
                return true;
            }
            if self.later.len() < k {
                self.later.resize(k, Vec::new());
            }
            let ends = &mut self.later[k - 1];
            ends.extend(found);
            ends.sort_unstable();
            ends.dedup();
        }
        self.prune(rule, stream_end);
        false
    }

    /// Drops ends whose window for the next content has closed, and ends
    /// dominated by an earlier one.
    fn prune(&mut self, rule: &Rule, stream_end: u64) {
        let open = |next: &ContentPattern, e: u64| end_bound(next, e).is_none_or(|b| b > stream_end);
        self.first_live &= open(&rule.patterns[1], self.end);
        for (j, ends) in self.later.iter_mut().enumerate() {
            let next = &rule.patterns[j + 2];
            ends.retain(|&e| open(next, e));
            if next.within.is_none() {
                // Without a window, the earliest end admits every placement
                // a later one would.
                ends.truncate(1);
            }
        }
    }

    fn alive(&self) -> bool {
        self.first_live || self.later.iter().any(|e| !e.is_empty())
    }
}

/// Incremental matching state for one data direction of one connection.
#[derive(Debug)]
pub struct StreamMatcher {
    matcher: Arc<CompiledMatcher>,
    class: RuleClass,
    enabled: Vec<bool>,
    next_offset: Option<u64>,
    /// Last bytes before `next_offset`, enough for a later content that
    /// straddles two feeds.
    tail: Vec<u8>,
    pending: Vec<Candidate>,
    expired: u64,
}

impl StreamMatcher {
    pub fn class(&self) -> RuleClass {
        self.class
    }

    pub fn matcher(&self) -> &Arc<CompiledMatcher> {
        &self.matcher
    }

    /// Candidates dropped because they waited longer than the history cap.
    pub fn expired(&self) -> u64 {
        self.expired
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Forgets all partial matches. Used when the stream skips a gap.
    pub fn reset(&mut self) {
        self.next_offset = None;
        self.tail.clear();
        self.pending.clear();
    }

    /// Feeds newly released bytes at absolute `offset`. `lookbehind` holds
    /// the bytes immediately preceding `offset` (empty after a gap). A feed
    /// that does not continue the previous one resets partial matches.
    pub fn feed(&mut self, offset: u64, lookbehind: &[u8], bytes: &[u8]) -> Vec<Firing> {
        if self.next_offset != Some(offset) {
            self.reset();
        }
        let lookbehind = if self.next_offset.is_none() { &[][..] } else { lookbehind };
        self.next_offset = Some(offset + bytes.len() as u64);
        if bytes.is_empty() {
            return Vec::new();
        }
        let stream_end = offset + bytes.len() as u64;
        let matcher = Arc::clone(&self.matcher);
        let rules = &matcher.rules;
        let mut fired = Vec::new();

        let group = &matcher.groups[class_index(self.class)];
        if let Some(ac) = &group.automaton {
            let mut window = Vec::with_capacity(lookbehind.len() + bytes.len());
            window.extend_from_slice(lookbehind);
            window.extend_from_slice(bytes);
            let base = offset - lookbehind.len() as u64;
            for m in ac.find_overlapping_iter(&window) {
                if m.end() <= lookbehind.len() {
                    continue;
                }
                let hay = &window[m.start()..m.end()];
                let start = base + m.start() as u64;
                for &rule in &group.by_pattern[m.pattern().as_usize()] {
                    if !self.enabled[rule] {
                        continue;
                    }
                    let r = &rules[rule];
                    let first = &r.patterns[0];
                    if !first.matches_at(hay) || !absolute_ok(first, start) {
                        continue;
                    }
                    let end = start + first.len() as u64;
                    if r.patterns.len() == 1 {
                        fired.push(Firing { offset: start, sid: r.sid });
                    } else {
                        self.pending.push(Candidate::new(rule, start, end));
                    }
                }
            }
        }

        // Later-content match starts ending inside this feed, per rule.
        let mut window = std::mem::take(&mut self.tail);
        let base = offset - window.len() as u64;
        window.extend_from_slice(bytes);
        let mut starts: HashMap<usize, Vec<Vec<u64>>> = HashMap::new();
        self.pending.retain_mut(|c| {
            let rule = &rules[c.rule];
            let starts = starts.entry(c.rule).or_insert_with(|| later_starts(rule, &window, base, offset));
            if c.advance(rule, starts, stream_end) {
                fired.push(Firing {
                    offset: c.start,
                    sid: rule.sid,
                });
                return false;
            }
            c.alive()
        });

        let cap = matcher.history_cap as u64;
        let before = self.pending.len();
        self.pending.retain(|c| stream_end - c.end <= cap);
        self.expired += (before - self.pending.len()) as u64;

        let keep = matcher.lookbehind().min(window.len());
        window.drain(..window.len() - keep);
        self.tail = window;
        fired.sort();
        fired
    }

    /// Ends the stream. Candidates still waiting for later contents can no
    /// longer complete.
    pub fn finish(&mut self) -> Vec<Firing> {
        self.reset();
        Vec::new()
    }
}

/// Start offsets of each later content of `rule` whose match ends past
/// `fresh` within `window` (which begins at absolute `base`). Index 0 is
/// left empty.
fn later_starts(rule: &Rule, window: &[u8], base: u64, fresh: u64) -> Vec<Vec<u64>> {
    let mut out = vec![Vec::new(); rule.patterns.len()];
    for (k, p) in rule.patterns.iter().enumerate().skip(1) {
        let len = p.len();
        if window.len() < len {
            continue;
        }
        let from = (fresh + 1).saturating_sub(base + len as u64) as usize;
        for i in from..=window.len() - len {
            let start = base + i as u64;
            if p.matches_at(&window[i..i + len]) && absolute_ok(p, start) {
                out[k].push(start);
            }
        }
    }
    out
}

fn absolute_ok(p: &ContentPattern, start: u64) -> bool {
    let lo = p.offset.unwrap_or(0);
    if start < lo {
        return false;
    }
    match p.depth {
        Some(depth) => start + p.len() as u64 <= lo + depth,
        None => true,
    }
}

/// Exclusive upper bound on the end of a match of `p` placed after a
/// previous match ending at `prev_end`, if any.
fn end_bound(p: &ContentPattern, prev_end: u64) -> Option<u64> {
    let rel = p
        .within
        .map(|w| prev_end + p.distance.unwrap_or(0) + w);
    let abs = p.depth.map(|d| p.offset.unwrap_or(0) + d);
    match (rel, abs) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn compile(text: &str) -> Arc<CompiledMatcher> {
        let rs = parse_ruleset(text, 1).unwrap();
        Arc::new(CompiledMatcher::compile(&rs, &["10.0.0.0/8".parse().unwrap()]))
    }

    fn rule(body: &str) -> String {
        format!("alert tcp any any -> any any ({body} classtype:web-client; sid:1;)\n")
    }

    #[test]
    fn fires_once_at_stream_offset() {
        let m = compile(&rule(r#"content:"abc";"#));
        assert_eq!(m.scan(b"xxabcxx"), vec![Firing { offset: 2, sid: 1 }]);
    }

    #[test]
    fn nocase_folds() {
        let m = compile(&rule(r#"content:"GET"; nocase;"#));
        assert_eq!(m.scan(b"get /"), vec![Firing { offset: 0, sid: 1 }]);
        let m = compile(&rule(r#"content:"GET";"#));
        assert!(m.scan(b"get /").is_empty());
        assert_eq!(m.scan(b"GET /").len(), 1);
    }

    #[test]
    fn offset_and_depth_bound_the_first_content() {
        let m = compile(&rule(r#"content:"AB"; offset:4; depth:2;"#));
        assert_eq!(m.scan(b"xxxxAB"), vec![Firing { offset: 4, sid: 1 }]);
        assert!(m.scan(b"AB").is_empty());
        assert!(m.scan(b"xxxxxAB").is_empty());
    }

    #[test]
    fn empty_ruleset_never_fires() {
        let m = Arc::new(CompiledMatcher::compile(&RuleSet::default(), &[]));
        assert!(m.scan(b"anything at all").is_empty());
        assert_eq!(m.lookbehind(), 0);
    }

    #[test]
    fn within_and_distance_are_relative() {
        let m = compile(&rule(r#"content:"ab"; content:"cd"; distance:1; within:3;"#));
        assert_eq!(m.scan(b"ab_cd").len(), 1);
        assert!(m.scan(b"abcd").is_empty(), "distance 1 skips one byte");
        assert_eq!(m.scan(b"ab__cd").len(), 1);
        assert!(m.scan(b"ab___cd").is_empty(), "outside the 3-byte window");
        let m = compile(&rule(r#"content:"ab"; content:"cd";"#));
        assert_eq!(m.scan(b"ab...........cd").len(), 1);
        assert!(m.scan(b"cd ab").is_empty(), "later contents follow the first");
    }

    #[test]
    fn chain_completes_in_a_later_feed() {
        let m = compile(&rule(r#"content:"GET"; content:"passwd";"#));
        let mut s = m.stream(RuleClass::WebClient, None);
        assert!(s.feed(0, &[], b"GET /etc/pa").is_empty());
        assert_eq!(s.pending(), 1);
        let fired = s.feed(11, b"/pa", b"sswd");
        assert_eq!(fired, vec![Firing { offset: 0, sid: 1 }]);
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn lookbehind_catches_straddling_first_content() {
        let m = compile(&rule(r#"content:"/etc/passwd";"#));
        let mut s = m.stream(RuleClass::WebClient, None);
        assert!(s.feed(0, &[], b"GET /etc/pa").is_empty());
        let lb = m.lookbehind();
        let prev = b"GET /etc/pa";
        let fired = s.feed(11, &prev[prev.len() - lb..], b"sswd");
        assert_eq!(fired, vec![Firing { offset: 4, sid: 1 }]);
    }

    #[test]
    fn discontinuous_feed_resets_state() {
        let m = compile(&rule(r#"content:"AZ";"#));
        let mut s = m.stream(RuleClass::WebClient, None);
        s.feed(0, &[], b"A");
        assert!(s.feed(5, b"A", b"Z").is_empty());
    }

    #[test]
    fn header_filter_uses_home_nets() {
        let m = compile(
            "alert tcp $EXTERNAL_NET any -> $HOME_NET any (content:\"x\"; classtype:web-client; sid:1;)\n",
        );
        let outside: SocketAddr = "8.8.8.8:80".parse().unwrap();
        let inside: SocketAddr = "10.0.0.5:5000".parse().unwrap();
        let mut s = m.stream(RuleClass::WebClient, Some((outside, inside)));
        assert_eq!(s.feed(0, &[], b"x").len(), 1);
        let mut s = m.stream(RuleClass::WebClient, Some((inside, outside)));
        assert!(s.feed(0, &[], b"x").is_empty());
        let mut s = m.stream(RuleClass::WebServer, Some((outside, inside)));
        assert!(s.feed(0, &[], b"x").is_empty());
    }

    #[test]
    fn history_cap_expires_stale_candidates() {
        let rs = parse_ruleset(&rule(r#"content:"ab"; content:"zz";"#), 1).unwrap();
        let m = Arc::new(CompiledMatcher::with_history_cap(&rs, &[], 16));
        let mut s = m.stream(RuleClass::WebClient, None);
        s.feed(0, &[], b"ab");
        s.feed(2, b"b", &[b'.'; 32]);
        assert_eq!(s.pending(), 0);
        assert_eq!(s.expired(), 1);
    }
}
