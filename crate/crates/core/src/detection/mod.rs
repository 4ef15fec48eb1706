//! Per-connection detection: reassembles both data directions, runs the
//! rules bound to each direction, and turns firings into events classified
//! by who is attacking whom.

mod xff;

use std::collections::HashMap;
use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

pub use xff::{extract_xff, parse_xff_value, HEAD_CAP as XFF_HEAD_CAP};

use crate::reassembly::{OverlapPolicy, ReassemblyError, Released, Segment, StreamBuffer, DEFAULT_BUFFER_CAP};
use crate::rules::{Action, CompiledMatcher, ConnDirection, Firing, RuleClass, StreamMatcher};
use xff::XffScanner;

/// Direction of data relative to the monitored host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataDirection {
    /// Received by the local application.
    In,
    /// Sent by the local application.
    Out,
}

impl DataDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            DataDirection::In => "in",
            DataDirection::Out => "out",
        }
    }

    fn index(self) -> usize {
        match self {
            DataDirection::In => 0,
            DataDirection::Out => 1,
        }
    }
}

impl FromStr for DataDirection {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "in" => Ok(DataDirection::In),
            "out" => Ok(DataDirection::Out),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    InsideClientVictimized,
    InsideServerVictimized,
    InsideClientAttacking,
    InsideServerAttacking,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::InsideClientVictimized,
        EventKind::InsideServerVictimized,
        EventKind::InsideClientAttacking,
        EventKind::InsideServerAttacking,
    ];

    /// Short code used on the wire and in the store.
    pub fn code(self) -> &'static str {
        match self {
            EventKind::InsideClientVictimized => "ICV",
            EventKind::InsideServerVictimized => "ISV",
            EventKind::InsideClientAttacking => "ICA",
            EventKind::InsideServerAttacking => "ISA",
        }
    }

    pub fn from_code(code: &str) -> Option<EventKind> {
        EventKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// The inside application launched the attack; such events feed the
    /// quarantine store.
    pub fn is_attacking(self) -> bool {
        matches!(
            self,
            EventKind::InsideClientAttacking | EventKind::InsideServerAttacking
        )
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Which rule class watches a data direction. Client rules watch the data
/// a client receives, server rules the data a server receives.
pub fn bound_class(conn: ConnDirection, data: DataDirection) -> RuleClass {
    match (conn, data) {
        (ConnDirection::Outbound, DataDirection::In) => RuleClass::WebClient,
        (ConnDirection::Outbound, DataDirection::Out) => RuleClass::WebServer,
        (ConnDirection::Inbound, DataDirection::In) => RuleClass::WebServer,
        (ConnDirection::Inbound, DataDirection::Out) => RuleClass::WebClient,
    }
}

/// Event kind for a firing. Returns `None` for combinations the binding in
/// [`bound_class`] never produces.
pub fn derive_event_kind(conn: ConnDirection, data: DataDirection, class: RuleClass) -> Option<EventKind> {
    use ConnDirection::*;
    use DataDirection::*;
    match (conn, data, class) {
        (Outbound, In, RuleClass::WebClient) => Some(EventKind::InsideClientVictimized),
        (Outbound, Out, RuleClass::WebServer) => Some(EventKind::InsideClientAttacking),
        (Inbound, In, RuleClass::WebServer) => Some(EventKind::InsideServerVictimized),
        (Inbound, Out, RuleClass::WebClient) => Some(EventKind::InsideServerAttacking),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectionContext {
    pub conn_id: String,
    pub opened_ts: u64,
    pub local: SocketAddr,
    pub remote: SocketAddr,
    pub direction: ConnDirection,
    pub app_name: String,
    pub app_version: String,
    /// Real remote peer behind a proxy, from `X-Forwarded-For`.
    pub real_remote: Option<IpAddr>,
    pub blocked: bool,
}

impl ConnectionContext {
    pub fn new(
        conn_id: impl Into<String>,
        opened_ts: u64,
        local: SocketAddr,
        remote: SocketAddr,
        direction: ConnDirection,
        app_name: impl Into<String>,
        app_version: impl Into<String>,
    ) -> Self {
        ConnectionContext {
            conn_id: conn_id.into(),
            opened_ts,
            local,
            remote,
            direction,
            app_name: app_name.into(),
            app_version: app_version.into(),
            real_remote: None,
            blocked: false,
        }
    }

    /// (sender, receiver) of data flowing in `dir`.
    pub fn endpoints(&self, dir: DataDirection) -> (SocketAddr, SocketAddr) {
        match dir {
            DataDirection::In => (self.remote, self.local),
            DataDirection::Out => (self.local, self.remote),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionEvent {
    pub ts: u64,
    pub host_id: String,
    pub conn_id: String,
    /// Sender of the matched data.
    pub src: SocketAddr,
    /// Receiver of the matched data.
    pub dst: SocketAddr,
    pub real_src: Option<IpAddr>,
    pub app_name: String,
    pub app_version: String,
    pub sid: u32,
    pub rev: u32,
    pub msg: String,
    pub severity: u8,
    pub kind: EventKind,
    pub quarantine: bool,
    pub action: Action,
    pub match_offset: u64,
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub host_id: String,
    pub overlap_policy: OverlapPolicy,
    pub buffer_cap: usize,
    /// When false, `drop` rules only alert.
    pub drop_enabled: bool,
}

impl EngineOptions {
    pub fn new(host_id: impl Into<String>) -> Self {
        EngineOptions {
            host_id: host_id.into(),
            overlap_policy: OverlapPolicy::FirstWins,
            buffer_cap: DEFAULT_BUFFER_CAP,
            drop_enabled: false,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DetectionError {
    #[error("connection `{0}` is already open")]
    DuplicateConnection(String),
    #[error("unknown connection `{0}`")]
    UnknownConnection(String),
    #[error("connection `{conn_id}`: {source}")]
    Reassembly {
        conn_id: String,
        #[source]
        source: ReassemblyError,
    },
}

#[derive(Debug)]
struct DirState {
    dir: DataDirection,
    buffer: StreamBuffer,
    stream: StreamMatcher,
}

/// Detection state of one open connection.
#[derive(Debug)]
pub struct ConnState {
    ctx: ConnectionContext,
    host_id: String,
    drop_enabled: bool,
    matcher: Arc<CompiledMatcher>,
    dirs: [DirState; 2],
    xff: Option<XffScanner>,
    suppressed_segments: u64,
    suppressed_bytes: u64,
}

impl ConnState {
    /// Sets up both directions, each watched by the rule class bound to it.
    pub fn open(ctx: ConnectionContext, matcher: Arc<CompiledMatcher>, opts: &EngineOptions) -> ConnState {
        let make = |dir: DataDirection| DirState {
            dir,
            buffer: StreamBuffer::new(opts.overlap_policy, opts.buffer_cap, matcher.lookbehind()),
            stream: matcher.stream(bound_class(ctx.direction, dir), Some(ctx.endpoints(dir))),
        };
        let dirs = [make(DataDirection::In), make(DataDirection::Out)];
        let xff = (ctx.direction == ConnDirection::Inbound).then(XffScanner::default);
        ConnState {
            ctx,
            host_id: opts.host_id.clone(),
            drop_enabled: opts.drop_enabled,
            matcher,
            dirs,
            xff,
            suppressed_segments: 0,
            suppressed_bytes: 0,
        }
    }

    pub fn context(&self) -> &ConnectionContext {
        &self.ctx
    }

    pub fn matcher_version(&self) -> u64 {
        self.matcher.version()
    }

    pub fn watched_class(&self, dir: DataDirection) -> RuleClass {
        self.dirs[dir.index()].stream.class()
    }

    pub fn is_blocked(&self) -> bool {
        self.ctx.blocked
    }

    pub fn suppressed_segments(&self) -> u64 {
        self.suppressed_segments
    }

    pub fn suppressed_bytes(&self) -> u64 {
        self.suppressed_bytes
    }

    /// Reassembles `seg` and matches whatever it makes contiguous. Data on a
    /// blocked connection is counted and otherwise ignored.
    pub fn on_data(&mut self, ts: u64, dir: DataDirection, seg: Segment) -> Result<Vec<DetectionEvent>, ReassemblyError> {
        if self.ctx.blocked {
            self.suppressed_segments += 1;
            self.suppressed_bytes += seg.bytes.len() as u64;
            return Ok(Vec::new());
        }
        let released = self.dirs[dir.index()].buffer.ingest_segment(seg)?;
        Ok(self.inspect(ts, dir, released))
    }

    /// Skips the hole at the front of `dir`'s buffer and inspects what
    /// follows it.
    pub fn force_gap(&mut self, ts: u64, dir: DataDirection) -> Vec<DetectionEvent> {
        let released = self.dirs[dir.index()].buffer.force_gap();
        if self.ctx.blocked {
            return Vec::new();
        }
        self.inspect(ts, dir, released)
    }

    /// Flushes both directions past any holes and ends matching.
    pub fn close(mut self, ts: u64) -> Vec<DetectionEvent> {
        let mut events = Vec::new();
        for dir in [DataDirection::In, DataDirection::Out] {
            while self.dirs[dir.index()].buffer.has_pending() {
                events.extend(self.force_gap(ts, dir));
            }
            self.dirs[dir.index()].stream.finish();
        }
        events
    }

    fn inspect(&mut self, ts: u64, dir: DataDirection, released: Released) -> Vec<DetectionEvent> {
        if released.is_empty() {
            return Vec::new();
        }
        if dir == DataDirection::In {
            if let Some(scanner) = self.xff.as_mut() {
                if released.after_gap {
                    scanner.abandon();
                } else if let Some(found) = scanner.push(&released.bytes) {
                    self.ctx.real_remote = found;
                }
            }
        }

        let state = &mut self.dirs[dir.index()];
        if released.after_gap {
            state.stream.reset();
        }
        // Each (rule, first-content position) becomes a candidate once, so
        // firings are already unique per (sid, offset).
        let firings: Vec<Firing> = state.stream.feed(released.offset, &released.context, &released.bytes);
        let class = state.stream.class();
        let data_dir = state.dir;
        let (src, dst) = self.ctx.endpoints(data_dir);
        let kind = derive_event_kind(self.ctx.direction, data_dir, class)
            .expect("bound_class only yields consistent bindings");

        let mut events = Vec::with_capacity(firings.len());
        let mut block = false;
        for f in firings {
            let rule = self.matcher.rule(f.sid).expect("firing refers to a compiled rule");
            let action = if rule.action == Action::Drop && self.drop_enabled {
                block = true;
                Action::Drop
            } else {
                Action::Alert
            };
            events.push(DetectionEvent {
                ts,
                host_id: self.host_id.clone(),
                conn_id: self.ctx.conn_id.clone(),
                src,
                dst,
                real_src: self.ctx.real_remote,
                app_name: self.ctx.app_name.clone(),
                app_version: self.ctx.app_version.clone(),
                sid: rule.sid,
                rev: rule.rev,
                msg: rule.msg.clone(),
                severity: rule.severity,
                kind,
                quarantine: kind.is_attacking(),
                action,
                match_offset: f.offset,
            });
        }
        if block {
            self.ctx.blocked = true;
        }
        events
    }
}

/// Open connections of one host, keyed by connection id.
#[derive(Debug)]
pub struct ConnectionTable {
    opts: EngineOptions,
    conns: HashMap<String, ConnState>,
}

impl ConnectionTable {
    pub fn new(opts: EngineOptions) -> Self {
        ConnectionTable {
            opts,
            conns: HashMap::new(),
        }
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    pub fn len(&self) -> usize {
        self.conns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conns.is_empty()
    }

    pub fn get(&self, conn_id: &str) -> Option<&ConnState> {
        self.conns.get(conn_id)
    }

    pub fn open_connection(&mut self, ctx: ConnectionContext, matcher: Arc<CompiledMatcher>) -> Result<(), DetectionError> {
        if self.conns.contains_key(&ctx.conn_id) {
            return Err(DetectionError::DuplicateConnection(ctx.conn_id));
        }
        let id = ctx.conn_id.clone();
        let state = ConnState::open(ctx, matcher, &self.opts);
        self.conns.insert(id, state);
        Ok(())
    }

    pub fn on_data(&mut self, conn_id: &str, ts: u64, dir: DataDirection, seg: Segment) -> Result<Vec<DetectionEvent>, DetectionError> {
        let state = self
            .conns
            .get_mut(conn_id)
            .ok_or_else(|| DetectionError::UnknownConnection(conn_id.into()))?;
        state.on_data(ts, dir, seg).map_err(|source| DetectionError::Reassembly {
            conn_id: conn_id.into(),
            source,
        })
    }

    pub fn force_gap(&mut self, conn_id: &str, ts: u64, dir: DataDirection) -> Result<Vec<DetectionEvent>, DetectionError> {
        let state = self
            .conns
            .get_mut(conn_id)
            .ok_or_else(|| DetectionError::UnknownConnection(conn_id.into()))?;
        Ok(state.force_gap(ts, dir))
    }

    /// Final events of the connection plus its state, which is released.
    pub fn close_connection(&mut self, conn_id: &str, ts: u64) -> Result<(Vec<DetectionEvent>, ConnectionContext, u64), DetectionError> {
        let state = self
            .conns
            .remove(conn_id)
            .ok_or_else(|| DetectionError::UnknownConnection(conn_id.into()))?;
        let suppressed = state.suppressed_segments;
        let ctx = state.ctx.clone();
        Ok((state.close(ts), ctx, suppressed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::parse_ruleset;

    const RULES: &str = "\
alert tcp any any -> any any (msg:\"passwd\"; content:\"/etc/passwd\"; classtype:web-server; sid:10; rev:1;)
alert tcp any any -> any any (msg:\"url.dll\"; content:\"url.dll\"; classtype:web-client; sid:20; rev:1;)
drop tcp any any -> any any (msg:\"kill\"; content:\"KILL\"; classtype:web-server; sid:30; rev:1;)
";

    fn matcher() -> Arc<CompiledMatcher> {
        let rs = parse_ruleset(RULES, 1).unwrap();
        Arc::new(CompiledMatcher::compile(&rs, &["10.0.0.0/8".parse().unwrap()]))
    }

    fn ctx(id: &str, direction: ConnDirection) -> ConnectionContext {
        ConnectionContext::new(
            id,
            0,
            "10.0.0.5:8080".parse().unwrap(),
            "198.51.100.7:40000".parse().unwrap(),
            direction,
            "tomcat",
            "7.0",
        )
    }

    fn opts(drop_enabled: bool) -> EngineOptions {
        EngineOptions {
            drop_enabled,
            ..EngineOptions::new("h1")
        }
    }

    #[test]
    fn event_kind_table() {
        use ConnDirection::*;
        use DataDirection::*;
        assert_eq!(derive_event_kind(Outbound, In, RuleClass::WebClient), Some(EventKind::InsideClientVictimized));
        assert_eq!(derive_event_kind(Outbound, Out, RuleClass::WebServer), Some(EventKind::InsideClientAttacking));
        assert_eq!(derive_event_kind(Inbound, In, RuleClass::WebServer), Some(EventKind::InsideServerVictimized));
        assert_eq!(derive_event_kind(Inbound, Out, RuleClass::WebClient), Some(EventKind::InsideServerAttacking));
        assert_eq!(derive_event_kind(Inbound, In, RuleClass::WebClient), None);
        for conn in [Outbound, Inbound] {
            for data in [In, Out] {
                let kind = derive_event_kind(conn, data, bound_class(conn, data)).unwrap();
                assert_eq!(kind.is_attacking(), data == Out);
            }
        }
    }

    #[test]
    fn kind_codes_round_trip() {
        for k in EventKind::ALL {
            assert_eq!(EventKind::from_code(k.code()), Some(k));
        }
        assert_eq!(EventKind::from_code("XYZ"), None);
    }

    #[test]
    fn direction_binding() {
        let m = matcher();
        let out = ConnState::open(ctx("a", ConnDirection::Outbound), m.clone(), &opts(false));
        assert_eq!(out.watched_class(DataDirection::In), RuleClass::WebClient);
        assert_eq!(out.watched_class(DataDirection::Out), RuleClass::WebServer);
        let inb = ConnState::open(ctx("b", ConnDirection::Inbound), m, &opts(false));
        assert_eq!(inb.watched_class(DataDirection::In), RuleClass::WebServer);
        assert_eq!(inb.watched_class(DataDirection::Out), RuleClass::WebClient);
    }

    #[test]
    fn split_pattern_fires_once_at_absolute_offset() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), matcher(), &opts(false));
        let e1 = c.on_data(1, DataDirection::In, Segment::new(0, *b"GET /etc/pa")).unwrap();
        assert!(e1.is_empty());
        let e2 = c.on_data(2, DataDirection::In, Segment::new(11, *b"sswd HTTP/1.1\r\n\r\n")).unwrap();
        assert_eq!(e2.len(), 1);
        let ev = &e2[0];
        assert_eq!(ev.match_offset, 4);
        assert_eq!(ev.sid, 10);
        assert_eq!(ev.kind, EventKind::InsideServerVictimized);
        assert!(!ev.quarantine);
        assert_eq!(ev.src, "198.51.100.7:40000".parse().unwrap());
        assert_eq!(ev.dst, "10.0.0.5:8080".parse().unwrap());

        let mut whole = ConnState::open(ctx("b", ConnDirection::Inbound), matcher(), &opts(false));
        let e = whole
            .on_data(1, DataDirection::In, Segment::new(0, *b"GET /etc/passwd HTTP/1.1\r\n\r\n"))
            .unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!((e[0].sid, e[0].match_offset), (ev.sid, ev.match_offset));
    }

    #[test]
    fn attacking_direction_sets_quarantine_and_orientation() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), matcher(), &opts(false));
        let e = c.on_data(1, DataDirection::Out, Segment::new(0, *b"HTTP/1.1 200 OK\r\n\r\nurl.dll")).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].kind, EventKind::InsideServerAttacking);
        assert!(e[0].quarantine);
        assert_eq!(e[0].src, c.context().local);
        assert_eq!(e[0].dst, c.context().remote);
    }

    #[test]
    fn drop_latches_when_enabled() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), matcher(), &opts(true));
        let e = c.on_data(1, DataDirection::In, Segment::new(0, *b"KILL")).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].action, Action::Drop);
        assert!(c.is_blocked());
        let e = c.on_data(2, DataDirection::In, Segment::new(4, *b"/etc/passwd")).unwrap();
        assert!(e.is_empty());
        assert_eq!(c.suppressed_segments(), 1);
        assert_eq!(c.suppressed_bytes(), 11);
        assert!(c.close(3).is_empty());
    }

    #[test]
    fn drop_rule_only_alerts_when_disabled() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), matcher(), &opts(false));
        let e = c.on_data(1, DataDirection::In, Segment::new(0, *b"KILL")).unwrap();
        assert_eq!(e[0].action, Action::Alert);
        assert!(!c.is_blocked());
    }

    #[test]
    fn gap_resets_match_state() {
        let rs = parse_ruleset(
            "alert tcp any any -> any any (content:\"AZ\"; classtype:web-server; sid:1;)\n",
            1,
        )
        .unwrap();
        let m = Arc::new(CompiledMatcher::compile(&rs, &[]));
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), m, &opts(false));
        assert!(c.on_data(1, DataDirection::In, Segment::new(0, *b"A")).unwrap().is_empty());
        assert!(c.on_data(1, DataDirection::In, Segment::new(2, *b"Z")).unwrap().is_empty());
        assert!(c.close(2).is_empty());
    }

    #[test]
    fn close_flushes_pending_tail() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), matcher(), &opts(false));
        c.on_data(1, DataDirection::In, Segment::new(0, *b"GET ")).unwrap();
        assert!(c.on_data(2, DataDirection::In, Segment::new(9, *b"/etc/passwd")).unwrap().is_empty());
        let e = c.close(3);
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].match_offset, 9);
        assert_eq!(e[0].ts, 3);
    }

    #[test]
    fn xff_sets_real_remote_before_matching() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Inbound), matcher(), &opts(false));
        let e = c
            .on_data(
                1,
                DataDirection::In,
                Segment::new(0, *b"GET /etc/passwd HTTP/1.1\r\nX-Forwarded-For: 203.0.113.9, 10.0.0.1\r\n\r\n"),
            )
            .unwrap();
        assert_eq!(e[0].real_src, Some("203.0.113.9".parse().unwrap()));
        assert_eq!(c.context().real_remote, e[0].real_src);
    }

    #[test]
    fn xff_ignored_on_outbound_connections() {
        let mut c = ConnState::open(ctx("a", ConnDirection::Outbound), matcher(), &opts(false));
        c.on_data(1, DataDirection::In, Segment::new(0, *b"GET / HTTP/1.1\r\nX-Forwarded-For: 203.0.113.9\r\n\r\n"))
            .unwrap();
        assert_eq!(c.context().real_remote, None);
    }

    #[test]
    fn table_rejects_duplicate_and_unknown_ids() {
        let m = matcher();
        let mut t = ConnectionTable::new(opts(false));
        t.open_connection(ctx("a", ConnDirection::Inbound), m.clone()).unwrap();
        t.open_connection(ctx("b", ConnDirection::Outbound), m.clone()).unwrap();
        assert_eq!(
            t.open_connection(ctx("a", ConnDirection::Outbound), m.clone()),
            Err(DetectionError::DuplicateConnection("a".into()))
        );
        assert_eq!(t.len(), 2);
        let (events, _, _) = t.close_connection("a", 5).unwrap();
        assert!(events.is_empty());
        assert_eq!(
            t.close_connection("a", 6).unwrap_err(),
            DetectionError::UnknownConnection("a".into())
        );
        assert!(matches!(
            t.on_data("zz", 1, DataDirection::In, Segment::new(0, *b"x")),
            Err(DetectionError::UnknownConnection(_))
        ));
    }

    #[test]
    fn independent_connection_state() {
        let m = matcher();
        let mut t = ConnectionTable::new(opts(false));
        t.open_connection(ctx("in", ConnDirection::Inbound), m.clone()).unwrap();
        t.open_connection(ctx("out", ConnDirection::Outbound), m).unwrap();
        assert!(t.on_data("in", 1, DataDirection::In, Segment::new(0, *b"/etc/pa")).unwrap().is_empty());
        assert!(t.on_data("out", 1, DataDirection::Out, Segment::new(0, *b"/etc/pa")).unwrap().is_empty());
        let a = t.on_data("in", 2, DataDirection::In, Segment::new(7, *b"sswd")).unwrap();
        assert_eq!(a[0].kind, EventKind::InsideServerVictimized);
        let b = t.on_data("out", 2, DataDirection::Out, Segment::new(7, *b"sswd")).unwrap();
        assert_eq!(b[0].kind, EventKind::InsideClientAttacking);
    }
}
