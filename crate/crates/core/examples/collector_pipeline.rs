//! Agent journal into a collector store with lost and repeated datagrams,
//! then loss accounting, queries and the quarantine table.
//!
//!     cargo run --example collector_pipeline

use hostguard::agent::{load_trace, run_replay, AgentConfig, ReplayOptions};
use hostguard::collector::{EventFilter, Store};
use hostguard::detection::EventKind;
use hostguard::rules::parse_ruleset;
use hostguard::wire::split_journal;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn main() {
    let work = tempfile::tempdir().unwrap();
    let journal = work.path().join("lab-01.journal");
    let rs = parse_ruleset(&std::fs::read_to_string(format!("{FIXTURES}/rules/rules.v1.txt")).unwrap(), 1).unwrap();
    let cfg = AgentConfig::load(format!("{FIXTURES}/config/lab-01.toml").as_ref()).unwrap();
    let trace = load_trace(format!("{FIXTURES}/traces/mixed.trc").as_ref()).unwrap();
    let opts = ReplayOptions {
        journal: Some(journal.clone()),
        send: false,
    };
    let replay = run_replay(&trace, rs, cfg, &opts).unwrap();
    println!("agent: {} events over {} connections", replay.stats.events, replay.stats.connections);

    let bytes = std::fs::read(&journal).unwrap();
    let datagrams = split_journal(&bytes);
    let mut store = Store::open(&work.path().join("store")).unwrap();
    // Lose every seventh datagram, deliver every fifth one twice.
    for (i, d) in datagrams.iter().enumerate() {
        if i % 7 == 3 {
            continue;
        }
        store.ingest_datagram(d).unwrap();
        if i % 5 == 0 {
            store.ingest_datagram(d).unwrap();
        }
    }
    store.ingest_datagram(b"HGEV2\nseq=1\n").unwrap();

    let g = store.gap_stats("lab-01").unwrap();
    println!(
        "collector: max_seq={} received={} duplicates={} gaps={} rejects={:?}",
        g.max_seq_seen,
        g.received,
        g.duplicates,
        g.gaps,
        store.rejects()
    );
    let isa = EventFilter {
        kind: Some(EventKind::InsideServerAttacking),
        ..Default::default()
    };
    println!("ISA rows: {}", store.query(&isa).unwrap().len());
    for q in store.quarantine() {
        println!(
            "quarantine {}/{}/{} count={} sids={:?} seen {}..{}",
            q.key.host_id, q.key.app_name, q.key.app_version, q.count, q.sids, q.first_seen, q.last_seen
        );
    }
    store.audit().expect("quarantine table agrees with the event log");
}
