//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::agent::{load_trace, replay_agent, replay_into, AgentConfig, ReplayOptions};
use crate::collector::{self, event_line, EventFilter, Store};
use crate::detection::EventKind;
use crate::rules::{parse_ruleset, render_ruleset, RuleClass, RuleSet};
use crate::sigupdate::{self, Catalog};

/// Artifact version plus the wire, trace and update protocol versions.
pub const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (wire HGEV1, trace HGTRC1, sigupdate HGSIG1)"
);

#[derive(Parser, Debug)]
#[command(name = "hostguard", version = LONG_VERSION, about = "Host-based intrusion detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Host agent.
    #[command(subcommand)]
    Agent(AgentCmd),
    /// Event collector.
    #[command(subcommand)]
    Collector(CollectorCmd),
    /// Signature administration server.
    #[command(subcommand)]
    Sigserver(SigserverCmd),
    /// Ruleset tooling.
    #[command(subcommand)]
    Rules(RulesCmd),
}

#[derive(Subcommand, Debug)]
enum AgentCmd {
    /// Replay a socket-event trace through the detection engine.
    Run(AgentRun),
}

#[derive(Args, Debug)]
struct AgentRun {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Append every event datagram to this file.
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Do not send datagrams to the collector.
    #[arg(long)]
    no_send: bool,
    /// Signature server to check before replay (overrides `admin_addr`).
    #[arg(long)]
    admin: Option<SocketAddr>,
    /// Version of the --rules file; taken from a `rules.v<N>.txt` name, else 0.
    #[arg(long)]
    rules_version: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum CollectorCmd {
    /// Receive event datagrams into a store.
    Run {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        store: PathBuf,
        /// Stop after this many milliseconds instead of running forever.
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Print stored events matching every given filter.
    Query(QueryArgs),
    /// Per-host sequence accounting.
    Stats {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        host: Option<String>,
    },
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    /// ICV, ISV, ICA or ISA.
    #[arg(long, value_parser = parse_kind)]
    kind: Option<EventKind>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    sid: Option<u32>,
    #[arg(long, requires = "until")]
    since: Option<u64>,
    #[arg(long, requires = "since")]
    until: Option<u64>,
    #[arg(long)]
    quarantined: bool,
}

fn parse_kind(s: &str) -> Result<EventKind, String> {
    EventKind::from_code(s).ok_or_else(|| format!("unknown event kind `{s}` (expected ICV, ISV, ICA or ISA)"))
}

#[derive(Subcommand, Debug)]
enum SigserverCmd {
    /// Serve the newest `rules.v<N>.txt` bundle in a directory.
    Run {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        duration_ms: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum RulesCmd {
    /// Validate a ruleset and print its class and category census.
    Check { file: PathBuf },
    /// Print a ruleset in canonical form.
    Fmt { file: PathBuf },
}

struct Failure {
    msg: String,
    /// The reader of our output went away; nothing worth reporting.
    broken_pipe: bool,
}

impl Failure {
    fn new(msg: String) -> Self {
        Failure { msg, broken_pipe: false }
    }
}

impl<E: std::error::Error + 'static> From<E> for Failure {
    fn from(e: E) -> Self {
        let broken_pipe = (&e as &dyn std::error::Error)
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe);
        Failure {
            msg: e.to_string(),
            broken_pipe,
        }
    }
}

type Outcome = Result<(), Failure>;

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit output streams.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Agent(AgentCmd::Run(args)) => agent_run(args, out, err),
        Cmd::Collector(CollectorCmd::Run {
            listen,
            store,
            duration_ms,
        }) => collector_run(listen, &store, duration_ms, out),
        Cmd::Collector(CollectorCmd::Query(args)) => collector_query(args, out),
        Cmd::Collector(CollectorCmd::Stats { store, host }) => collector_stats(&store, host, out),
        Cmd::Sigserver(SigserverCmd::Run {
            dir,
            listen,
            duration_ms,
        }) => sigserver_run(&dir, listen, duration_ms, out),
        Cmd::Rules(RulesCmd::Check { file }) => rules_check(&file, out),
        Cmd::Rules(RulesCmd::Fmt { file }) => rules_fmt(&file, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure { broken_pipe: true, .. }) => 0,
        Err(Failure { msg, .. }) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
    }
}

/// `N` from a `rules.v<N>.txt` file name.
pub fn version_from_name(path: &Path) -> Option<u64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("rules.v")?.strip_suffix(".txt")?.parse().ok()
}

fn load_rules(path: &Path, version: u64) -> Result<RuleSet, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::new(format!("{}: {e}", path.display())))?;
    parse_ruleset(&text, version).map_err(|e| Failure::new(format!("{}: {e}", path.display())))
}

fn agent_run(args: AgentRun, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let cfg = AgentConfig::load(&args.config)?;
    let version = args.rules_version.or_else(|| version_from_name(&args.rules)).unwrap_or(0);
    let ruleset = load_rules(&args.rules, version)?;
    let trace = load_trace(&args.trace).map_err(|e| Failure::new(format!("{}: {e}", args.trace.display())))?;
    let opts = ReplayOptions {
        journal: args.journal,
        send: !args.no_send,
    };
    let admin = args.admin.or(cfg.admin_addr);
    let mut agent = replay_agent(ruleset, cfg, &opts)?;
    if let Some(addr) = admin {
        match sigupdate::check_and_fetch(agent.ruleset().version, addr) {
            Ok(Some(bundle)) => match agent.apply_ruleset_update(bundle.ruleset) {
                Ok(r) => writeln!(
                    out,
                    "update: v{} -> v{} ({} rules changed)",
                    r.old_version, r.new_version, r.rule_delta_count
                )?,
                Err(e) => writeln!(err, "warning: update refused: {e}")?,
            },
            Ok(None) => writeln!(out, "update: v{} is current", agent.ruleset().version)?,
            Err(e) => writeln!(err, "warning: signature check failed, keeping v{}: {e}", agent.ruleset().version)?,
        }
    }
    let replay = replay_into(&mut agent, &trace)?;
    let s = &replay.stats;
    writeln!(out, "ruleset_version={}", s.ruleset_version)?;
    writeln!(out, "connections={}", s.connections)?;
    writeln!(out, "bytes={}", s.bytes)?;
    writeln!(out, "events={}", s.events)?;
    for kind in EventKind::ALL {
        writeln!(out, "kind.{}={}", kind.code(), s.kind_count(kind))?;
    }
    writeln!(out, "datagrams_sent={}", s.datagrams_sent)?;
    writeln!(out, "send_failures={}", s.send_failures)?;
    writeln!(out, "drops_latched={}", s.drops_latched)?;
    writeln!(out, "suppressed_segments={}", s.suppressed_segments)?;
    writeln!(out, "overflow_gaps={}", s.overflow_gaps)?;
    writeln!(out, "discarded_segments={}", s.discarded_segments)?;
    writeln!(out, "sampler_intervals={}", s.sampler_intervals)?;
    writeln!(out, "sampler_interval_ms={}", s.sampler_interval_ms)?;
    Ok(())
}

fn stop_after(duration_ms: Option<u64>) -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    if let Some(ms) = duration_ms {
        let f = Arc::clone(&flag);
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(ms));
            f.store(true, Ordering::Relaxed);
        });
    }
    flag
}

fn collector_run(listen: SocketAddr, dir: &Path, duration_ms: Option<u64>, out: &mut dyn Write) -> Outcome {
    let mut store = Store::open(dir)?;
    let socket = UdpSocket::bind(listen)?;
    writeln!(out, "listening on {}", socket.local_addr()?)?;
    out.flush()?;
    let stop = stop_after(duration_ms);
    collector::serve(&socket, &mut store, &stop)?;
    for host in store.hosts() {
        let g = store.gap_stats(&host)?;
        writeln!(
            out,
            "host={host} max_seq={} received={} duplicates={} gaps={}",
            g.max_seq_seen, g.received, g.duplicates, g.gaps
        )?;
    }
    for (reason, n) in store.rejects() {
        writeln!(out, "rejected {reason}={n}")?;
    }
    Ok(())
}

fn collector_query(args: QueryArgs, out: &mut dyn Write) -> Outcome {
    let filter = EventFilter {
        kind: args.kind,
        host: args.host,
        sid: args.sid,
        since: args.since,
        until: args.until,
        quarantined_only: args.quarantined,
    };
    if !args.store.is_dir() {
        return Err(Failure::new(format!("{}: no such store", args.store.display())));
    }
    for rec in collector::query_events(&args.store, &filter)? {
        writeln!(out, "{}", event_line(&rec))?;
    }
    Ok(())
}

fn collector_stats(dir: &Path, host: Option<String>, out: &mut dyn Write) -> Outcome {
    if !dir.is_dir() {
        return Err(Failure::new(format!("{}: no such store", dir.display())));
    }
    let stats = collector::store_gap_stats(dir)?;
    let hosts: Vec<&String> = match &host {
        Some(h) if !stats.contains_key(h) => return Err(Failure::new(format!("no events from host `{h}`"))),
        Some(h) => vec![h],
        None => stats.keys().collect(),
    };
    for h in hosts {
        let g = stats[h];
        writeln!(out, "host={h} max_seq={} received={} gaps={}", g.max_seq_seen, g.received, g.gaps)?;
    }
    let quarantined = collector::read_quarantine_table(dir)?;
    for q in quarantined.iter().filter(|q| host.as_ref().is_none_or(|h| &q.key.host_id == h)) {
        let sids: Vec<String> = q.sids.iter().map(u32::to_string).collect();
        writeln!(
            out,
            "quarantine host={} app={} appver={} count={} sids={}",
            q.key.host_id,
            q.key.app_name,
            q.key.app_version,
            q.count,
            sids.join(",")
        )?;
    }
    Ok(())
}

fn sigserver_run(dir: &Path, listen: SocketAddr, duration_ms: Option<u64>, out: &mut dyn Write) -> Outcome {
    let catalog = Catalog::load(dir)?;
    let listener = TcpListener::bind(listen)?;
    writeln!(out, "serving CURRENT {} on {}", catalog.current(), listener.local_addr()?)?;
    out.flush()?;
    let stop = stop_after(duration_ms);
    sigupdate::serve(listener, Arc::new(catalog), &stop)?;
    Ok(())
}

fn rules_check(file: &Path, out: &mut dyn Write) -> Outcome {
    let rs = load_rules(file, version_from_name(file).unwrap_or(0))?;
    writeln!(out, "rules={}", rs.len())?;
    for class in RuleClass::ALL {
        writeln!(out, "class.{}={}", class.as_str(), rs.count_class(class))?;
    }
    for (cat, n) in rs.census() {
        writeln!(out, "category.{}={}", cat.as_str(), n)?;
    }
    Ok(())
}

fn rules_fmt(file: &Path, out: &mut dyn Write) -> Outcome {
    let rs = load_rules(file, 0)?;
    write!(out, "{}", render_ruleset(&rs))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("hostguard").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(call(&["frobnicate"]).0, 1);
        assert_eq!(call(&[]).0, 1);
        let (code, _, err) = call(&["agent", "run", "--rules", "r", "--config", "c"]);
        assert_eq!(code, 1);
        assert!(err.contains("--trace"), "{err}");
        assert_eq!(call(&["collector", "query", "--store", "s", "--kind", "XYZ"]).0, 1);
        assert_eq!(call(&["collector", "query", "--store", "s", "--since", "3"]).0, 1);
    }

    #[test]
    fn version_names_formats() {
        let (code, out, _) = call(&["--version"]);
        assert_eq!(code, 0);
        assert!(out.contains(crate::wire::MAGIC) && out.contains(crate::agent::TRACE_MAGIC), "{out}");
        assert!(out.contains(sigupdate::PROTO));
    }

    #[test]
    fn census() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("web.rules");
        std::fs::write(
            &path,
            "alert tcp any any -> any any (content:\"a\"; classtype:web-client; sid:1;)\n\
             alert tcp any any -> any any (content:\"b\"; classtype:web-client; sid:2;)\n\
             alert tcp any any -> any any (content:\"c\"; classtype:web-server; sid:3;)\n",
        )
        .unwrap();
        let (code, out, _) = call(&["rules", "check", path.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert_eq!(
            out,
            "rules=3\nclass.web-client=2\nclass.web-server=1\n\
             category.server-inbound=1\ncategory.client-inbound=2\n\
             category.server-outbound=1\ncategory.client-outbound=2\n"
        );
        let (code, out, _) = call(&["rules", "fmt", path.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 3);
    }

    #[test]
    fn runtime_failures_exit_2() {
        let (code, _, err) = call(&["rules", "check", "/nonexistent/web.rules"]);
        assert_eq!(code, 2);
        assert!(err.starts_with("error:"));
        assert_eq!(call(&["collector", "stats", "--store", "/nonexistent"]).0, 2);
    }

    #[test]
    fn rules_version_from_name() {
        assert_eq!(version_from_name(Path::new("/x/rules.v12.txt")), Some(12));
        assert_eq!(version_from_name(Path::new("web.rules")), None);
    }
}
