//! Overlapping segments under both overlap policies: what each reassembled
//! stream looks like and whether the traversal rule fires.
//!
//!     cargo run --example reassembly_evasion

use hostguard::agent::{load_trace, run_replay, AgentConfig, ReplayOptions, TraceEvent};
use hostguard::reassembly::{OverlapPolicy, Segment, StreamBuffer};
use hostguard::rules::parse_ruleset;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");

fn main() {
    let rs = parse_ruleset(&std::fs::read_to_string(format!("{FIXTURES}/rules/rules.v1.txt")).unwrap(), 1).unwrap();
    for trace in ["overlap_insertion", "overlap_evasion"] {
        let events = load_trace(format!("{FIXTURES}/traces/{trace}.trc").as_ref()).unwrap();
        println!("{trace}:");
        for policy in [OverlapPolicy::FirstWins, OverlapPolicy::LastWins] {
            let mut buf = StreamBuffer::new(policy, 1 << 16, 0);
            let mut stream = Vec::new();
            for ev in &events {
                if let TraceEvent::Data { offset, payload, .. } = ev {
                    let r = buf.ingest_segment(Segment::new(offset.unwrap_or(0), payload.clone())).unwrap();
                    stream.extend_from_slice(&r.bytes);
                }
            }
            let mut cfg = AgentConfig::load(format!("{FIXTURES}/config/lab-01.toml").as_ref()).unwrap();
            cfg.overlap_policy = policy;
            let replay = run_replay(&events, rs.clone(), cfg, &ReplayOptions::default()).unwrap();
            let sids: Vec<u32> = replay.records.iter().map(|r| r.event.sid).collect();
            println!("  {:<10} {:?}  fired {sids:?}", policy.as_str(), String::from_utf8_lossy(&stream));
        }
    }

    // A hole that never fills: close forces a gap and the rest still gets scanned.
    let mut buf = StreamBuffer::new(OverlapPolicy::FirstWins, 64, 0);
    buf.ingest_segment(Segment::new(0, &b"abc"[..])).unwrap();
    buf.ingest_segment(Segment::new(10, &b"Z"[..])).unwrap();
    let released = buf.force_gap();
    println!("\nafter gap: {:?} next_offset={}", released, buf.next_offset());
}
